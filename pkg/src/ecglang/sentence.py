"""Heartbeat sentences, padding and masked-token batches.

A record becomes a sequence of 4-token frames ``[P, QRS, T, SEP]`` with
``[MISS]`` standing in for an absent P or T wave.  Each waveform token keeps a
locator ``(beat_idx, wave_type)`` pointing back at its raw segment so the
model can add a morphology embedding.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .delineate import WAVE_TYPES, WaveSegment
from .vocab import MASK, MISS, N_SPECIAL, PAD, SEP

IGNORE = -100
FRAME = 4


class BeatTokens(NamedTuple):
    """Token IDs (or ``None``) and matching segments for one beat."""

    beat_idx: int
    tokens: dict
    segments: dict


@dataclass
class TokenSequence:
    record_id: str
    token_ids: np.ndarray
    locators: list = field(default_factory=list)
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        n = len(self.token_ids)
        if not self.locators:
            self.locators = [None] * n
        if not self.segments:
            self.segments = [None] * n
        if len(self.locators) != n or len(self.segments) != n:
            raise ValueError("token_ids, locators and segments must have equal length")

    def __len__(self) -> int:
        return len(self.token_ids)

    def truncated(self, max_len: int) -> "TokenSequence":
        """Drop whole beats from the end so the length fits ``max_len``."""
        keep = min(len(self), (max_len // FRAME) * FRAME)
        return TokenSequence(self.record_id, self.token_ids[:keep], self.locators[:keep], self.segments[:keep])


def build_sequence(record_id: str, beats: Sequence[BeatTokens], counter: Counter | None = None) -> TokenSequence:
    """Emit ``[P|MISS, QRS, T|MISS, SEP]`` per beat; beats without a QRS token are dropped."""
    ids, locs, segs = [], [], []
    for beat in beats:
        if beat.tokens.get("QRS") is None:
            if counter is not None:
                counter["dropped_no_qrs"] += 1
            continue
        for w in WAVE_TYPES:
            tok = beat.tokens.get(w)
            if tok is None:
                ids.append(MISS)
                locs.append(None)
                segs.append(None)
            else:
                if tok < N_SPECIAL:
                    raise ValueError(f"{record_id}: waveform slot holds special token {tok}")
                ids.append(int(tok))
                locs.append((beat.beat_idx, w))
                segs.append(beat.segments.get(w))
        ids.append(SEP)
        locs.append(None)
        segs.append(None)
    return TokenSequence(record_id, np.array(ids, dtype=np.int64), locs, segs)


def sequences_from_segments(segments: Sequence[WaveSegment], tokens: Sequence[int],
                            beat_counts: dict[str, int] | None = None,
                            counter: Counter | None = None) -> list[TokenSequence]:
    """Group tokenised segments by record and beat, then build one sequence per record.

    ``beat_counts`` lists every record (even one without segments) in
    output order; otherwise records appear in first-seen order.
    """
    by_record: dict[str, dict[int, BeatTokens]] = {}
    if beat_counts is not None:
        for rid in beat_counts:
            by_record[rid] = {}
    for seg, tok in zip(segments, tokens):
        beats = by_record.setdefault(seg.record_id, {})
        beat = beats.setdefault(seg.beat_idx, BeatTokens(seg.beat_idx, {}, {}))
        beat.tokens[seg.wave_type] = int(tok)
        beat.segments[seg.wave_type] = np.asarray(seg.samples, dtype=np.float32)
    out = []
    for rid, beats in by_record.items():
        n_beats = beat_counts.get(rid, 0) if beat_counts is not None else 0
        if counter is not None:
            counter["dropped_no_qrs"] += max(0, n_beats - len(beats))
        ordered = [beats[i] for i in sorted(beats)]
        out.append(build_sequence(rid, ordered, counter))
    return out


@dataclass
class Batch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    segments: list
    record_ids: list

    @property
    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1)


@dataclass
class MaskedBatch(Batch):
    mlm_labels: np.ndarray = None


def pad_and_batch(seqs: Sequence[TokenSequence], max_len: int = 256, truncate: bool = True) -> Batch:
    """Right-pad with ``[PAD]`` to the longest (possibly truncated) sequence."""
    if not truncate and any(len(s) > max_len for s in seqs):
        raise ValueError(f"sequence longer than max_len={max_len} and truncation is off")
    seqs = [s.truncated(max_len) if len(s) > max_len else s for s in seqs]
    width = max([len(s) for s in seqs] + [1])
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    att = np.zeros((len(seqs), width), dtype=bool)
    segs = []
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.token_ids
        att[i, :len(s)] = True
        segs.append(list(s.segments) + [None] * (width - len(s)))
    return Batch(ids, att, segs, [s.record_id for s in seqs])


def mask_count(n_maskable: int, mask_prob: float) -> int:
    if n_maskable == 0:
        return 0
    return max(1, math.floor(mask_prob * n_maskable + 1e-9))


def apply_mlm_mask(batch: Batch, mask_prob: float = 0.2, seed: int = 0, strategy: str = "mask",
                   vocab_size: int | None = None) -> MaskedBatch:
    """Mask ``floor(mask_prob * maskable)`` waveform tokens per row (at least one).

    ``strategy="mask"`` replaces every selected token by ``[MASK]``.
    ``strategy="bert"`` uses the 80/10/10 split (mask, random waveform
    token, unchanged) and needs ``vocab_size``.  Selected positions lose
    their morphology segment either way.
    """
    if strategy not in ("mask", "bert"):
        raise ValueError("strategy must be 'mask' or 'bert'")
    if strategy == "bert" and (vocab_size is None or vocab_size <= N_SPECIAL):
        raise ValueError("bert strategy needs vocab_size > number of special tokens")
    rng = np.random.default_rng(seed)
    ids = batch.input_ids.copy()
    labels = np.full_like(ids, IGNORE)
    segs = [list(row) for row in batch.segments]
    for i in range(len(ids)):
        cand = np.flatnonzero(batch.attention_mask[i] & (batch.input_ids[i] >= N_SPECIAL))
        n = mask_count(len(cand), mask_prob)
        if n == 0:
            continue
        chosen = np.sort(rng.choice(cand, size=n, replace=False))
        labels[i, chosen] = ids[i, chosen]
        if strategy == "mask":
            ids[i, chosen] = MASK
        else:
            u = rng.random(n)
            ids[i, chosen[u < 0.8]] = MASK
            rand_pos = chosen[(u >= 0.8) & (u < 0.9)]
            ids[i, rand_pos] = rng.integers(N_SPECIAL, vocab_size, size=len(rand_pos))
        for p in chosen:
            segs[i][p] = None
    return MaskedBatch(ids, batch.attention_mask.copy(), segs, list(batch.record_ids), labels)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_token_stream(path, seqs: Sequence[TokenSequence]) -> None:
    lines = [json.dumps({"record_id": s.record_id, "token_ids": [int(t) for t in s.token_ids],
                         "locators": [None if loc is None else [int(loc[0]), loc[1]] for loc in s.locators]},
                        sort_keys=True) for s in seqs]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_token_stream(path, segment_store: dict | None = None) -> list[TokenSequence]:
    """Load sequences; ``segment_store`` (from :func:`read_segments`) re-attaches raw segments."""
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            locs = [None if loc is None else (int(loc[0]), loc[1]) for loc in d["locators"]]
            segs = [None] * len(locs)
            if segment_store is not None:
                segs = [None if loc is None else segment_store[(d["record_id"], loc[0], loc[1])].samples
                        for loc in locs]
            out.append(TokenSequence(d["record_id"], np.array(d["token_ids"], dtype=np.int64), locs, segs))
    return out


def _segment_key(seg: WaveSegment) -> str:
    return f"{seg.record_id}\x1f{seg.beat_idx}\x1f{seg.wave_type}"


def write_segments(path, segments: Sequence[WaveSegment]) -> str:
    """Store segments in the checkpoint container; returns the content hash."""
    tensors = {_segment_key(s): np.asarray(s.samples, dtype=np.float32) for s in segments}
    meta = {"kind": "segments", "peak_offsets": [int(s.peak_offset) for s in segments]}
    return save_checkpoint(path, tensors, meta)


def read_segments(path) -> list[WaveSegment]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "segments":
        raise ValueError(f"{path}: not a segment store")
    out = []
    for (key, arr), peak in zip(tensors.items(), meta["peak_offsets"]):
        rid, beat, wave = key.split("\x1f")
        out.append(WaveSegment(wave, arr, rid, int(beat), peak))
    return out


def segment_index(segments: Sequence[WaveSegment]) -> dict:
    return {(s.record_id, s.beat_idx, s.wave_type): s for s in segments}
