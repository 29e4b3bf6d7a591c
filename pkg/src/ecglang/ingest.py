"""Record I/O, synthetic ECG generation and dataset splitting.

A dataset on disk is a directory holding::

    manifest.json   version, fs, label names and one entry per record
    signals.bin     concatenated little-endian float32 samples
    labels.bin      optional, one uint8 (0/1) per label per labelled record

Each manifest record entry carries ``id``, ``fs``, ``sample_count``,
``offset`` (byte offset into ``signals.bin``) and ``label_offset`` (byte
offset into ``labels.bin`` or ``null``).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .delineate import BeatFiducials, Wave
from .errors import (
    DataError,
    LabelLengthError,
    MalformedHeaderError,
    NonFiniteSampleError,
    SamplingRateError,
)

FORMAT_VERSION = 1
RHYTHM_CLASSES = ("regular", "irregular_rr", "absent_p")


@dataclass
class LabelSet:
    names: list[str]

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        if not self.names or any(not n for n in self.names):
            raise ValueError("label names must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError("label names must be unique")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class EcgRecord:
    """One single-lead recording in millivolts."""

    record_id: str
    samples: np.ndarray
    fs: int
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError(f"record {self.record_id!r}: samples must be a non-empty 1-D array")
        if int(self.fs) != self.fs or self.fs <= 0:
            raise SamplingRateError(f"record {self.record_id!r}: fs must be a positive integer, got {self.fs}")
        self.fs = int(self.fs)
        if not np.all(np.isfinite(self.samples)):
            bad = int(np.flatnonzero(~np.isfinite(self.samples))[0])
            raise NonFiniteSampleError(f"record {self.record_id!r}: non-finite sample at index {bad}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.ndim != 1 or np.any(self.labels > 1):
                raise DataError(f"record {self.record_id!r}: labels must be a 1-D multi-hot vector")

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def replace_samples(self, samples: np.ndarray) -> "EcgRecord":
        return EcgRecord(self.record_id, samples, self.fs,
                         None if self.labels is None else self.labels.copy())

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.record_id == other.record_id and self.fs == other.fs
                and self.samples.dtype == other.samples.dtype
                and np.array_equal(self.samples.view(np.uint32), other.samples.view(np.uint32))
                and same_labels)


# ---------------------------------------------------------------------------
# interchange format
# ---------------------------------------------------------------------------

def write_records(records: Sequence[EcgRecord], path, label_set: LabelSet | None = None) -> None:
    """Write ``records`` as a dataset directory at ``path``.

    Files are written to temporaries and renamed, so a crashed write never
    leaves a half-valid dataset behind.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n_labels = len(label_set) if label_set is not None else None
    fs_values = {r.fs for r in records}
    entries = []
    signal_chunks, label_chunks = [], []
    offset = label_offset = 0
    for rec in records:
        if rec.labels is not None:
            if n_labels is None:
                n_labels = rec.labels.size
            if rec.labels.size != n_labels:
                raise LabelLengthError(
                    f"record {rec.record_id!r}: {rec.labels.size} labels, label set has {n_labels}")
        data = rec.samples.astype("<f4").tobytes()
        entry = {"id": rec.record_id, "fs": rec.fs, "sample_count": int(rec.samples.size),
                 "offset": offset, "label_offset": None}
        signal_chunks.append(data)
        offset += len(data)
        if rec.labels is not None:
            entry["label_offset"] = label_offset
            label_chunks.append(rec.labels.astype(np.uint8).tobytes())
            label_offset += rec.labels.size
        entries.append(entry)

    names = label_set.names if label_set is not None else (
        [f"label_{i}" for i in range(n_labels)] if n_labels else None)
    manifest = {
        "version": FORMAT_VERSION,
        "fs": fs_values.pop() if len(fs_values) == 1 else None,
        "labels": names,
        "records": entries,
    }
    _atomic_write(path / "signals.bin", b"".join(signal_chunks))
    if label_chunks:
        _atomic_write(path / "labels.bin", b"".join(label_chunks))
    elif (path / "labels.bin").exists():
        (path / "labels.bin").unlink()
    _atomic_write(path / "manifest.json",
                  (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())


def read_records(path) -> list[EcgRecord]:
    """Read every record of the dataset at ``path`` in manifest order."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    try:
        text = manifest_path.read_text()
    except OSError as exc:
        raise DataError(f"{manifest_path}: cannot read manifest ({exc})") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(
            f"{manifest_path}: invalid JSON at line {exc.lineno}, byte offset {exc.pos}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != FORMAT_VERSION:
        raise MalformedHeaderError(f"{manifest_path}: missing or unsupported version (byte offset 0)")
    entries = manifest.get("records")
    if not isinstance(entries, list):
        raise MalformedHeaderError(f"{manifest_path}: 'records' must be a list (byte offset 0)")
    label_names = manifest.get("labels")
    n_labels = len(label_names) if label_names else None

    signals = np.fromfile(path / "signals.bin", dtype="<f4") if entries else np.zeros(0, "<f4")
    labels_blob = None
    if (path / "labels.bin").exists():
        labels_blob = np.fromfile(path / "labels.bin", dtype=np.uint8)

    records = []
    for i, entry in enumerate(entries):
        rid = entry.get("id") if isinstance(entry, dict) else None
        try:
            fs = entry["fs"] if entry.get("fs") is not None else manifest["fs"]
            count, offset = int(entry["sample_count"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedHeaderError(f"{manifest_path}: record #{i} ({rid!r}) header malformed: {exc}") from exc
        if rid is None or count <= 0 or offset < 0 or offset % 4:
            raise MalformedHeaderError(
                f"{manifest_path}: record #{i} ({rid!r}) has invalid id/sample_count/offset")
        if fs is None or not isinstance(fs, (int, float)) or fs <= 0 or int(fs) != fs:
            raise SamplingRateError(f"record {rid!r}: fs must be a positive integer, got {fs} "
                                    f"(signals.bin byte offset {offset})")
        start = offset // 4
        if start + count > signals.size:
            raise MalformedHeaderError(
                f"record {rid!r}: sample range exceeds signals.bin (byte offset {offset})")
        samples = signals[start:start + count].astype(np.float32)
        finite = np.isfinite(samples)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise NonFiniteSampleError(
                f"record {rid!r}: non-finite sample at signals.bin byte offset {offset + 4 * bad}")
        labels = None
        if entry.get("label_offset") is not None:
            lo = int(entry["label_offset"])
            if labels_blob is None or n_labels is None:
                raise LabelLengthError(f"record {rid!r}: label vector present but no label set "
                                       f"(labels.bin byte offset {lo})")
            labels = labels_blob[lo:lo + n_labels]
            if labels.size != n_labels:
                raise LabelLengthError(f"record {rid!r}: label vector has {labels.size} entries, "
                                       f"label set has {n_labels} (labels.bin byte offset {lo})")
        records.append(EcgRecord(str(rid), samples, int(fs), labels))
    return records


def read_label_set(path) -> LabelSet | None:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    names = manifest.get("labels")
    return LabelSet(names) if names else None


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic records
# ---------------------------------------------------------------------------

@dataclass
class SyntheticGroundTruth:
    record_id: str
    beats: list[BeatFiducials]
    # one dict per beat: bump name -> (amplitude mV, centre s, sigma s)
    params: list[dict] = field(default_factory=list)


def _beat_bumps(rng, rr, with_p):
    """Gaussian bumps of one beat, centres relative to the R peak in seconds."""
    r_amp = rng.uniform(0.8, 1.4)
    bumps = {
        "Q": (-r_amp * rng.uniform(0.08, 0.2), -rng.uniform(0.02, 0.028), rng.uniform(0.006, 0.009)),
        "R": (r_amp, 0.0, rng.uniform(0.008, 0.012)),
        "S": (-r_amp * rng.uniform(0.1, 0.3), rng.uniform(0.02, 0.028), rng.uniform(0.006, 0.009)),
        "T": (rng.uniform(0.2, 0.4), rng.uniform(0.26, 0.3) * math.sqrt(min(rr, 1.2)),
              rng.uniform(0.03, 0.045)),
    }
    if with_p:
        bumps["P"] = (rng.uniform(0.1, 0.2), -rng.uniform(0.15, 0.18), rng.uniform(0.012, 0.016))
    return bumps


def _support(bumps, names):
    lo = min(bumps[n][1] - 3 * bumps[n][2] for n in names)
    hi = max(bumps[n][1] + 3 * bumps[n][2] for n in names)
    return lo, hi


def generate_synthetic(n_records: int, fs: int = 500, duration: float = 10.0,
                       rhythm_class: str = "regular", seed: int = 0,
                       noise_std: float = 0.01, id_prefix: str = "syn"):
    """Sum-of-Gaussians ECG with analytic fiducials.

    Each beat is five Gaussian bumps (P, Q, R, S, T) on a flat baseline.
    Fiducials are bump centre +/- 3 sigma; QRS spans the union of Q, R and S.
    Only beats whose every fiducial lies inside the record are synthesised.

    Returns ``(records, truths)``.
    """
    if rhythm_class not in RHYTHM_CLASSES:
        raise ValueError(f"rhythm_class must be one of {RHYTHM_CLASSES}, got {rhythm_class!r}")
    if n_records < 0 or fs <= 0 or duration <= 0 or noise_std < 0:
        raise ValueError("n_records, fs, duration and noise_std must be non-negative/positive")
    n = int(round(duration * fs))
    if duration < 1.5:
        raise ValueError("duration must cover at least one full beat (>= 1.5 s)")

    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    records, truths = [], []
    for i in range(n_records):
        with_p = rhythm_class != "absent_p"
        base_rr = 60.0 / rng.uniform(50, 90)
        r_time = rng.uniform(0.25, 0.25 + 0.5 * base_rr)
        x = np.zeros(n)
        beats, params = [], []
        rr_next = base_rr
        while True:
            if rhythm_class == "irregular_rr":
                rr_next = rng.uniform(0.6, 1.3)
            else:
                rr_next = base_rr * rng.uniform(0.98, 1.02)
            bumps = _beat_bumps(rng, rr_next, with_p)
            names = [k for k in ("P", "Q", "R", "S", "T") if k in bumps]
            lo, hi = _support(bumps, names)
            if r_time + hi >= (n - 1) / fs:
                break
            if r_time + lo >= 0:
                for amp, c, s in bumps.values():
                    x += amp * np.exp(-0.5 * ((t - r_time - c) / s) ** 2)
                beats.append(_fiducials_from_bumps(bumps, r_time, fs))
                params.append({k: tuple(float(v) for v in (a, r_time + c, s))
                               for k, (a, c, s) in bumps.items()})
            r_time += rr_next
        if noise_std > 0:
            x += rng.normal(0.0, noise_std, size=n)
        rid = f"{id_prefix}{i:05d}"
        records.append(EcgRecord(rid, x.astype(np.float32), fs))
        truths.append(SyntheticGroundTruth(rid, beats, params))
    return records, truths


def _fiducials_from_bumps(bumps, r_time, fs):
    def idx(sec):
        return int(round((r_time + sec) * fs))

    def wave(names, peak_name):
        lo, hi = _support(bumps, names)
        return Wave(idx(lo), idx(bumps[peak_name][1]), idx(hi))

    return BeatFiducials(
        r_peak=idx(0.0),
        p=wave(["P"], "P") if "P" in bumps else None,
        qrs=wave(["Q", "R", "S"], "R"),
        t=wave(["T"], "T"),
    )


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    label_fraction: float = 1.0
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(not 0 < f < 1 for f in self.fractions):
            raise ValueError(f"each split fraction must lie in (0, 1), got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")


def make_splits(records: Sequence[EcgRecord], spec: SplitSpec,
                groups: Sequence[str] | None = None):
    """Partition record ids into ``(train, val, test)`` lists.

    With ``groups`` (e.g. patient ids) whole groups are assigned to one split.
    The training list is afterwards subsampled to ``spec.label_fraction``
    (rounded up, at least one record).
    """
    if len(records) < 3:
        raise ValueError("need at least 3 records to split")
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    rng = np.random.default_rng(spec.seed)

    if groups is None:
        units = [[rid] for rid in ids]
    else:
        if len(groups) != len(ids):
            raise ValueError("groups must align with records")
        by_group: dict[str, list[str]] = {}
        for rid, g in zip(ids, groups):
            by_group.setdefault(g, []).append(rid)
        units = [by_group[g] for g in sorted(by_group)]
        if len(units) < 3:
            raise ValueError("need at least 3 groups to split")

    order = rng.permutation(len(units))
    sizes = _split_sizes(len(units), spec.fractions)
    parts, start = [], 0
    for size in sizes:
        parts.append([rid for u in order[start:start + size] for rid in units[u]])
        start += size
    train, val, test = parts

    if spec.label_fraction < 1.0:
        train = _subsample(train, records, spec, rng)
    return train, val, test


def _split_sizes(n, fractions):
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    return n_train, n_val, n - n_train - n_val


def label_fraction_size(n_train: int, label_fraction: float) -> int:
    # 1e-9 guards against 70 * 0.1 == 7.000000000000001
    return max(1, math.ceil(n_train * label_fraction - 1e-9))


def _subsample(train, records, spec, rng):
    target = label_fraction_size(len(train), spec.label_fraction)
    if not spec.stratify:
        keep = set(rng.choice(len(train), size=target, replace=False).tolist())
        return [rid for i, rid in enumerate(train) if i in keep]

    labels = {r.record_id: r.labels for r in records}
    pools: dict[int, list[str]] = {}
    for rid in train:
        lab = labels.get(rid)
        positives = [] if lab is None else np.flatnonzero(lab).tolist()
        for j in positives or [-1]:
            pools.setdefault(j, []).append(rid)
    queues = {j: [pool[i] for i in rng.permutation(len(pool))] for j, pool in sorted(pools.items())}
    chosen: list[str] = []
    taken: set[str] = set()
    while len(chosen) < target:
        progressed = False
        for j in sorted(queues):
            q = queues[j]
            while q and q[0] in taken:
                q.pop(0)
            if q and len(chosen) < target:
                rid = q.pop(0)
                chosen.append(rid)
                taken.add(rid)
                progressed = True
        if not progressed:
            break
    return [rid for rid in train if rid in taken]


def records_by_id(records: Iterable[EcgRecord]) -> dict[str, EcgRecord]:
    return {r.record_id: r for r in records}
