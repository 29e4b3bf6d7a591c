"""Wavelet-based R-peak detection and P/QRS/T delineation.

The transform is the undecimated (a trous) quadratic-spline wavelet
transform: every scale is a smoothed first derivative of the signal at a
dyadic width.  The detection rules are tuned at 250 Hz, so at other sampling
rates the scale index is shifted by ``round(log2(fs / 250))`` and a "scale
2^k" rule always refers to the same physical bandwidth.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

WAVE_TYPES = ("P", "QRS", "T")


class Wave(NamedTuple):
    onset: int
    peak: int
    offset: int

    def shifted(self, s: int) -> "Wave":
        return Wave(self.onset + s, self.peak + s, self.offset + s)


@dataclass
class BeatFiducials:
    r_peak: int
    p: Wave | None = None
    qrs: Wave | None = None
    t: Wave | None = None

    def wave(self, wave_type: str) -> Wave | None:
        return {"P": self.p, "QRS": self.qrs, "T": self.t}[wave_type]

    def present(self) -> list[str]:
        return [w for w in WAVE_TYPES if self.wave(w) is not None]

    def shifted(self, s: int) -> "BeatFiducials":
        return BeatFiducials(self.r_peak + s, *(None if w is None else w.shifted(s)
                                                 for w in (self.p, self.qrs, self.t)))

    def check(self, n_samples: int | None = None) -> None:
        """Raise ``ValueError`` when an ordering or bounds invariant fails."""
        for name in WAVE_TYPES:
            w = self.wave(name)
            if w is None:
                continue
            if not w.onset < w.peak < w.offset:
                raise ValueError(f"{name}: onset < peak < offset violated: {tuple(w)}")
            if w.onset < 0 or (n_samples is not None and w.offset >= n_samples):
                raise ValueError(f"{name}: index outside record")
        if self.p is not None and self.qrs is not None and self.p.offset > self.qrs.onset:
            raise ValueError("P.offset > QRS.onset")
        if self.qrs is not None and self.t is not None and self.qrs.offset > self.t.onset:
            raise ValueError("QRS.offset > T.onset")

    def to_dict(self) -> dict:
        out = {"r_peak": int(self.r_peak)}
        for name in WAVE_TYPES:
            w = self.wave(name)
            out[name] = None if w is None else {"onset": int(w.onset), "peak": int(w.peak),
                                                "offset": int(w.offset)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BeatFiducials":
        def wave(v):
            return None if v is None else Wave(int(v["onset"]), int(v["peak"]), int(v["offset"]))
        return cls(int(d["r_peak"]), wave(d.get("P")), wave(d.get("QRS")), wave(d.get("T")))


@dataclass
class WaveSegment:
    wave_type: str
    samples: np.ndarray
    record_id: str = ""
    beat_idx: int = -1
    peak_offset: int = 0

    def __post_init__(self):
        if self.wave_type not in WAVE_TYPES:
            raise ValueError(f"unknown wave type {self.wave_type!r}")
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("segment must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("segment samples must be finite")

    @property
    def source(self) -> tuple[str, int]:
        return self.record_id, self.beat_idx

    def __len__(self):
        return self.samples.size


@dataclass
class DelineationConfig:
    """Every threshold of the detector and delineator.

    Times are in seconds, ``gamma_*`` are fractions of the modulus of the
    wavelet maximum the search starts from, ``theta_*`` are presence
    thresholds relative to the record's robust noise level at that scale.
    """

    reference_fs: float = 250.0
    # R peaks (scale 2^2)
    r_threshold: float = 1.5
    r_noise_factor: float = 4.0
    rms_window: float = 2.0
    refractory: float = 0.2
    pair_window: float = 0.07
    # QRS (scale 2^2)
    qrs_pair_window: float = 0.05
    qrs_extension_window: float = 0.04
    qrs_significance: float = 0.06
    gamma_qrs_on: float = 0.05
    gamma_qrs_off: float = 0.09
    qrs_limit: float = 0.08
    qrs_window: float = 0.12
    # T and P (scale 2^4)
    t_start: float = 0.08
    t_max: float = 0.6
    t_rr_fraction: float = 0.7
    p_start: float = 0.22
    p_end: float = 0.06
    gamma_t_on: float = 0.12
    gamma_t_off: float = 0.12
    gamma_p_on: float = 0.45
    gamma_p_off: float = 0.45
    theta_t: float = 3.0
    theta_p: float = 3.0
    wave_rel_floor: float = 0.03
    t_limit: float = 0.2
    p_limit: float = 0.1


def scale_offset(fs: float, reference_fs: float = 250.0) -> int:
    return max(0, int(round(math.log2(fs / reference_fs))))


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------

def _take(a: np.ndarray, offset: int) -> np.ndarray:
    idx = np.clip(np.arange(a.size) + offset, 0, a.size - 1)
    return a[idx]


def dwt_transform(samples, n_scales: int) -> list[np.ndarray]:
    """Undecimated quadratic-spline wavelet transform.

    Returns ``n_scales`` detail arrays (scales 2^1 .. 2^n), each the length of
    the input.  Scale 2^k is ``2 * (a[n + d] - a[n - d])`` of the signal
    smoothed by ``k - 1`` cascaded [1, 3, 3, 1] / 8 kernels; every detail is
    sampled half a sample late (it estimates the derivative at ``n + 0.5``).
    Boundaries are extended with the edge values.
    """
    if n_scales < 1:
        raise ValueError("n_scales must be >= 1")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("samples must be a non-empty 1-D array")
    pad = 4 * 2 ** n_scales
    a = np.pad(x, pad, mode="edge")
    details = []
    for j in range(n_scales):
        step = 2 ** j
        if j == 0:
            g_lo, g_hi = 0, 1
            h = (-1, 0, 1, 2)
        else:
            g_lo, g_hi = -step // 2, step // 2
            h = (-3 * step // 2, -step // 2, step // 2, 3 * step // 2)
        d = 2.0 * (_take(a, g_hi) - _take(a, g_lo))
        details.append(d[pad:pad + x.size].copy())
        a = (_take(a, h[0]) + 3.0 * _take(a, h[1]) + 3.0 * _take(a, h[2]) + _take(a, h[3])) / 8.0
    return details


def modulus_maxima(w: np.ndarray, start: int = 1, stop: int | None = None) -> np.ndarray:
    """Indices of strict local maxima of ``|w|`` in ``[start, stop)``."""
    stop = w.size - 1 if stop is None else min(stop, w.size - 1)
    start = max(start, 1)
    if stop <= start:
        return np.zeros(0, dtype=int)
    m = np.abs(w)
    seg = m[start:stop]
    left = m[start - 1:stop - 1]
    right = m[start + 1:stop + 1]
    hits = (seg > left) & (seg >= right) & (seg > 0)
    return np.flatnonzero(hits) + start


def _rolling_rms(w: np.ndarray, width: int) -> np.ndarray:
    kernel = np.full(width, 1.0 / width)
    # direct convolution: each output is computed independently of its position
    return np.sqrt(np.convolve(w * w, kernel, mode="same"))


# ---------------------------------------------------------------------------
# R peaks
# ---------------------------------------------------------------------------

def detect_r_peaks(samples, fs: float, config: DelineationConfig | None = None) -> list[int]:
    """Locate R peaks from opposite-sign modulus-maxima pairs at scale 2^2.

    A maximum counts when its modulus exceeds ``r_threshold`` times the
    rolling RMS of the scale and ``r_noise_factor`` times the estimated noise
    level; a pair is two consecutive such maxima of
    opposite sign closer than ``pair_window``.  Pairs compete by summed
    modulus under a ``refractory`` exclusion.
    """
    cfg = config or DelineationConfig()
    x = np.asarray(samples, dtype=np.float64)
    win = int(round(cfg.rms_window * fs))
    if x.size < win:
        raise ValueError(f"signal of {x.size} samples is shorter than one analysis window ({win})")
    o = scale_offset(fs, cfg.reference_fs)
    pad = win + 8 * 2 ** (2 + o)
    xp = np.pad(x, pad, mode="edge")
    details = dwt_transform(xp, 2 + o)
    w = details[1 + o]
    floor = cfg.r_noise_factor * noise_level([d[pad:pad + x.size] for d in details], 1 + o)
    thr = np.maximum(cfg.r_threshold * _rolling_rms(w, win), floor)

    maxima = modulus_maxima(w)
    maxima = maxima[np.abs(w[maxima]) > thr[maxima]]
    max_sep = cfg.pair_window * fs
    candidates = []
    for m1, m2 in zip(maxima[:-1], maxima[1:]):
        if m2 - m1 > max_sep or np.sign(w[m1]) == np.sign(w[m2]):
            continue
        seg = xp[m1:m2 + 2]
        r = m1 + int(np.argmax(seg) if w[m1] > 0 else np.argmin(seg))
        if pad <= r < pad + x.size:
            candidates.append((abs(w[m1]) + abs(w[m2]), r - pad))

    refractory = cfg.refractory * fs
    accepted: list[int] = []
    for _, r in sorted(candidates, key=lambda c: (-c[0], c[1])):
        if all(abs(r - a) >= refractory for a in accepted):
            accepted.append(r)
    return sorted(accepted)


# ---------------------------------------------------------------------------
# delineation
# ---------------------------------------------------------------------------

def _search_limit(w, start, thr, direction, limit, lo, hi):
    """Walk from ``start`` until ``|w|`` drops below ``thr`` or hits a local minimum."""
    m = np.abs(w)
    n = start
    for _ in range(limit):
        nxt = n + direction
        if nxt <= lo or nxt >= hi:
            return nxt
        n = nxt
        if m[n] < thr or (m[n] <= m[n - 1] and m[n] <= m[n + 1]):
            return n
    return n


def _robust_sigma(w: np.ndarray) -> float:
    return float(1.4826 * np.median(np.abs(w - np.median(w))))


def _noise_gain(scale_index: int, n_scales: int) -> float:
    """L2 norm of the scale's impulse response relative to scale 2^1."""
    size = 16 * 2 ** n_scales
    impulse = np.zeros(size)
    impulse[size // 2] = 1.0
    d = dwt_transform(impulse, n_scales)
    return float(np.linalg.norm(d[scale_index]) / np.linalg.norm(d[0]))


def noise_level(details: Sequence[np.ndarray], scale_index: int) -> float:
    """White-noise standard deviation expected at ``scale_index``.

    Estimated from the median absolute deviation of the finest scale, where
    the sparse QRS slopes barely move the median, then carried to the coarser
    scale through the filter bank's noise gain.
    """
    return _robust_sigma(details[0]) * _noise_gain(scale_index, len(details))


def delineate_beats(samples, fs: float, r_peaks: Sequence[int],
                    config: DelineationConfig | None = None) -> list[BeatFiducials]:
    """One :class:`BeatFiducials` per R peak; undetectable waves are ``None``."""
    cfg = config or DelineationConfig()
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    r_peaks = [int(r) for r in r_peaks]
    if not r_peaks:
        return []
    o = scale_offset(fs, cfg.reference_fs)
    pad = int(round(cfg.rms_window * fs)) + 8 * 2 ** (4 + o)
    xp = np.pad(x, pad, mode="edge")
    details = dwt_transform(xp, 4 + o)
    wq = details[1 + o]
    ww = details[3 + o]
    noise = noise_level([d[pad:pad + n] for d in details], 3 + o)

    def sec(v):
        return int(round(v * fs))

    beats = []
    for i, r in enumerate(r_peaks):
        rr = (r_peaks[i + 1] - r) if i + 1 < len(r_peaks) else (
            (r - r_peaks[i - 1]) if i > 0 else sec(1.0))
        rp = r + pad
        qrs, qrs_mod = _delineate_qrs(wq, ww, rp, pad, n, cfg, sec)
        floor = cfg.wave_rel_floor * qrs_mod
        t_lo = rp + sec(cfg.t_start)
        t_hi = min(rp + min(sec(cfg.t_max), int(cfg.t_rr_fraction * rr)), pad + n - 2)
        t = None
        if t_hi > t_lo:
            t = _delineate_wave(ww, t_lo, t_hi, cfg.gamma_t_on, cfg.gamma_t_off,
                                max(cfg.theta_t * noise, floor), sec(cfg.t_limit), pad, n)
        p_lo, p_hi = max(rp - sec(cfg.p_start), pad + 1), rp - sec(cfg.p_end)
        p = None
        if p_hi > p_lo:
            p = _delineate_wave(ww, p_lo, p_hi, cfg.gamma_p_on, cfg.gamma_p_off,
                                max(cfg.theta_p * noise, floor), sec(cfg.p_limit), pad, n)
        beat = BeatFiducials(r, *(None if w is None else w.shifted(-pad) for w in (p, qrs, t)))
        beats.append(_enforce_order(beat, n))
    return beats


def _delineate_qrs(wq, ww, rp, pad, n, cfg, sec):
    lo, hi = rp - sec(cfg.qrs_window), rp + sec(cfg.qrs_window)
    qrs_mod = float(np.max(np.abs(ww[max(lo, 0):hi])))
    if lo < pad or hi >= pad + n:
        return None, qrs_mod
    maxima = modulus_maxima(wq, lo, hi)
    half = sec(cfg.qrs_pair_window)
    before = [m for m in maxima if rp - half <= m < rp]
    after = [m for m in maxima if rp < m <= rp + half]
    if not before or not after:
        return None, qrs_mod
    mag = np.abs(wq)
    npre = max(before, key=lambda m: (mag[m], m))
    npost = max(after, key=lambda m: (mag[m], -m))
    sig = cfg.qrs_significance * max(mag[npre], mag[npost])
    ext = sec(cfg.qrs_extension_window)
    first = [m for m in maxima if npre - ext <= m < npre
             and np.sign(wq[m]) != np.sign(wq[npre]) and mag[m] > sig]
    last = [m for m in maxima if npost < m <= npost + ext
            and np.sign(wq[m]) != np.sign(wq[npost]) and mag[m] > sig]
    nfirst = first[-1] if first else npre
    nlast = last[0] if last else npost
    limit = sec(cfg.qrs_limit)
    onset = _search_limit(wq, nfirst, cfg.gamma_qrs_on * mag[nfirst], -1, limit, pad - 1, pad + n)
    offset = _search_limit(wq, nlast, cfg.gamma_qrs_off * mag[nlast], +1, limit, pad - 1, pad + n)
    if not pad <= onset < rp < offset < pad + n:
        return None, qrs_mod
    return Wave(int(onset), int(rp), int(offset)), qrs_mod


def _delineate_wave(w, lo, hi, gamma_on, gamma_off, presence, limit, pad, n):
    maxima = modulus_maxima(w, lo, hi)
    if maxima.size < 2:
        return None
    mag = np.abs(w)
    best = None
    for m1, m2 in zip(maxima[:-1], maxima[1:]):
        if np.sign(w[m1]) == np.sign(w[m2]):
            continue
        strength = min(mag[m1], mag[m2])
        if best is None or strength > best[0]:
            best = (strength, m1, m2)
    if best is None or best[0] < presence:
        return None
    _, m1, m2 = best
    sign = np.sign(w[m1])
    crossing = np.flatnonzero(np.sign(w[m1:m2 + 1]) != sign)
    peak = m1 + int(crossing[0])
    onset = _search_limit(w, m1, gamma_on * mag[m1], -1, limit, pad - 1, pad + n)
    offset = _search_limit(w, m2, gamma_off * mag[m2], +1, limit, pad - 1, pad + n)
    if not pad <= onset < peak < offset < pad + n:
        return None
    return Wave(int(onset), int(peak), int(offset))


def _enforce_order(beat: BeatFiducials, n: int) -> BeatFiducials:
    p, qrs, t = beat.p, beat.qrs, beat.t
    if qrs is not None:
        if p is not None and p.offset > qrs.onset:
            p = Wave(p.onset, p.peak, qrs.onset)
        if t is not None and t.onset < qrs.offset:
            t = Wave(qrs.offset, t.peak, t.offset)
    checked = []
    for w in (p, qrs, t):
        ok = w is not None and 0 <= w.onset < w.peak < w.offset < n
        checked.append(w if ok else None)
    return BeatFiducials(beat.r_peak, *checked)


def delineate_record(samples, fs: float, config: DelineationConfig | None = None) -> list[BeatFiducials]:
    """Detection followed by delineation; empty for signals without beats."""
    r = detect_r_peaks(samples, fs, config)
    return delineate_beats(samples, fs, r, config)


# ---------------------------------------------------------------------------
# segments
# ---------------------------------------------------------------------------

def zscore(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean()
    sd = centred.std()
    return centred / sd if sd > 1e-8 else centred


def extract_segments(samples, fiducials: Iterable[BeatFiducials], record_id: str = "",
                     counter: Counter | None = None, normalize: bool = True) -> list[WaveSegment]:
    """Cut ``samples[onset..offset]`` (inclusive) for every present wave.

    Segments shorter than three samples are dropped and tallied in
    ``counter["degenerate"]``.
    """
    x = np.asarray(samples, dtype=np.float64)
    out = []
    for beat_idx, beat in enumerate(fiducials):
        for name in WAVE_TYPES:
            w = beat.wave(name)
            if w is None:
                continue
            if w.offset - w.onset < 2:
                if counter is not None:
                    counter["degenerate"] += 1
                continue
            seg = x[w.onset:w.offset + 1]
            out.append(WaveSegment(name, zscore(seg) if normalize else seg, record_id,
                                   beat_idx, w.peak - w.onset))
    return out


# ---------------------------------------------------------------------------
# fiducials JSONL
# ---------------------------------------------------------------------------

def write_fiducials(path, by_record: dict[str, list[BeatFiducials]]) -> None:
    lines = []
    for rid, beats in by_record.items():
        for i, b in enumerate(beats):
            lines.append(json.dumps({"record_id": rid, "beat_idx": i, **b.to_dict()}, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_fiducials(path) -> dict[str, list[BeatFiducials]]:
    out: dict[str, list[BeatFiducials]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.setdefault(d["record_id"], []).append(BeatFiducials.from_dict(d))
    return out


def match_fiducials(detected: Sequence[BeatFiducials], truth: Sequence[BeatFiducials],
                    r_tolerance: int, tolerance: int) -> dict:
    """Score detected beats against ground truth by nearest R peak.

    Returns counts useful for sensitivity/precision and per-fiducial hit
    rates; a wave missing in the detection counts as a miss for all three
    of its fiducials.
    """
    det_r = np.array([b.r_peak for b in detected], dtype=int)
    stats = Counter()
    used = set()
    for tb in truth:
        stats["true_beats"] += 1
        if det_r.size == 0:
            continue
        j = int(np.argmin(np.abs(det_r - tb.r_peak)))
        if abs(det_r[j] - tb.r_peak) > r_tolerance or j in used:
            continue
        used.add(j)
        stats["matched_beats"] += 1
        db = detected[j]
        for name in WAVE_TYPES:
            tw, dw = tb.wave(name), db.wave(name)
            if tw is None:
                stats[f"{name}_truth_absent"] += 1
                if dw is None:
                    stats[f"{name}_flagged_absent"] += 1
                continue
            for k, field_name in enumerate(("onset", "peak", "offset")):
                stats[f"{name}_{field_name}_total"] += 1
                if dw is not None and abs(dw[k] - tw[k]) <= tolerance:
                    stats[f"{name}_{field_name}_hit"] += 1
    stats["detected_beats"] = int(det_r.size)
    return dict(stats)
