import numpy as np
import pytest
import torch

from ecglang.delineate import delineate_record, extract_segments
from ecglang.ingest import generate_synthetic
from ecglang.preprocess import preprocess_record

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def synthetic_segments(n_records, seed=1, rhythm_class="regular"):
    records, _ = generate_synthetic(n_records, seed=seed, rhythm_class=rhythm_class)
    segments = []
    for r in records:
        r = preprocess_record(r)
        segments += extract_segments(r.samples, delineate_record(r.samples, r.fs), r.record_id)
    return segments


@pytest.fixture(scope="session")
def segments_60():
    """Wave segments from 60 preprocessed synthetic regular records."""
    return synthetic_segments(60)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        request.config.stash[_VERDICTS].append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance")
        for _, line in lines:
            terminalreporter.write_line(line)
