"""Discrete wave vocabulary: k-means++ quantisation, knee selection, silhouette.

Token-ID layout::

    0 [PAD]  1 [MASK]  2 [SEP]  3 [MISS]  4 [CLS] (reserved)
    5 ... 5+k_P-1             P clusters
    next k_QRS IDs            QRS clusters
    next k_T IDs              T clusters
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .delineate import WAVE_TYPES
from .errors import DataError

PAD, MASK, SEP, MISS, CLS = 0, 1, 2, 3, 4
N_SPECIAL = 5
SPECIAL_NAMES = {PAD: "[PAD]", MASK: "[MASK]", SEP: "[SEP]", MISS: "[MISS]", CLS: "[CLS]"}
DEFAULT_K = {"P": 13, "QRS": 11, "T": 10}

_CHUNK = 4096


def pairwise_sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, computed row by row so results do not depend on batch layout."""
    out = np.empty((len(points), len(centroids)))
    for i in range(0, len(points), _CHUNK):
        diff = points[i:i + _CHUNK, None, :] - centroids[None, :, :]
        out[i:i + _CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid (ties go to the lowest index) and its squared distance."""
    d = pairwise_sq_dists(points, centroids)
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(points)), idx]


def _validate_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    return x


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = pairwise_sq_dists(x, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        # all remaining points coincide with chosen centroids
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centroids.append(x[i])
        d2 = np.minimum(d2, pairwise_sq_dists(x, x[i:i + 1])[:, 0])
    return np.array(centroids)


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    assignments: np.ndarray
    wcss: float
    history: list


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    Stops when the largest centroid shift falls below ``tol`` or after
    ``max_iter`` rounds.  Empty clusters keep their previous centroid.
    The returned assignments and wcss always correspond to the returned
    centroids; ``history`` lists the wcss after each assignment step.
    """
    x = _validate_points(points)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    history = []
    for _ in range(max_iter):
        assign, d = nearest(x, centroids)
        history.append(float(d.sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    assign, d = nearest(x, centroids)
    wcss = float(d.sum())
    history.append(wcss)
    return KMeansResult(centroids, assign, wcss, history)


def best_kmeans(points, k: int, seed: int = 0, restarts: int = 5, **kw) -> KMeansResult:
    """Lowest-wcss run among ``restarts`` seeds derived from ``seed`` (earliest wins ties)."""
    seeds = np.random.SeedSequence([seed, k]).generate_state(restarts)
    best = None
    for s in seeds:
        res = kmeans(points, k, int(s), **kw)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


@dataclass(frozen=True)
class KneeCurve:
    ks: tuple[int, ...]
    wcss: tuple[float, ...]

    def __post_init__(self):
        if len(self.ks) != len(self.wcss):
            raise ValueError("ks and wcss must have equal length")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise ValueError("ks must be strictly increasing")
        if any(w < 0 for w in self.wcss):
            raise ValueError("wcss must be non-negative")


def wcss_curve(points, k_range, seed: int = 0, restarts: int = 5) -> KneeCurve:
    x = _validate_points(points)
    ks = tuple(int(k) for k in k_range)
    if max(ks) > len(x):
        raise ValueError(f"k={max(ks)} exceeds number of points {len(x)}")
    return KneeCurve(ks, tuple(best_kmeans(x, k, seed, restarts).wcss for k in ks))


def find_knee(curve: KneeCurve) -> int | None:
    """Kneedle knee for a convex, decreasing curve; ``None`` when there is no knee.

    Both axes are min-max normalised.  For a convex decreasing curve the
    difference curve is ``(1 - y_norm) - x_norm``, the normalised curve's
    height above the chord after flipping it to the concave increasing form.
    The knee is the ``k`` where that difference peaks.
    """
    if len(curve.ks) < 3:
        raise ValueError("need at least 3 points")
    x = np.asarray(curve.ks, dtype=np.float64)
    y = np.asarray(curve.wcss, dtype=np.float64)
    if np.any(np.diff(y) > 1e-9 * max(1.0, abs(y).max())):
        raise ValueError("wcss must be weakly decreasing")
    if y[0] - y[-1] <= 0:
        return None
    xn = (x - x[0]) / (x[-1] - x[0])
    yn = (y - y.min()) / (y.max() - y.min())
    diff = (1.0 - yn) - xn
    i = int(np.argmax(diff))
    if diff[i] <= 1e-9:
        return None
    return int(curve.ks[i])


def silhouette(points, assignments) -> float:
    """Mean silhouette; singleton clusters and ``a == b == 0`` points score 0."""
    x = _validate_points(points)
    labels = np.asarray(assignments)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    dist = np.sqrt(pairwise_sq_dists(x, x))
    n = len(x)
    scores = np.zeros(n)
    sizes = {c: int((labels == c).sum()) for c in uniq}
    sums = np.stack([dist[:, labels == c].sum(axis=1) for c in uniq], axis=1)
    for i in range(n):
        own = int(np.searchsorted(uniq, labels[i]))
        if sizes[labels[i]] == 1:
            continue
        a = sums[i, own] / (sizes[labels[i]] - 1)
        b = min(sums[i, j] / sizes[c] for j, c in enumerate(uniq) if j != own)
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


@dataclass
class WaveVocabulary:
    """Centroids per wave type plus the global token-ID layout."""

    centroids: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for w in WAVE_TYPES:
            if w not in self.centroids:
                raise ValueError(f"missing centroids for {w}")
            c = np.asarray(self.centroids[w], dtype=np.float64)
            if c.ndim != 2 or len(c) < 1 or not np.all(np.isfinite(c)):
                raise ValueError(f"{w} centroids must be a finite (k, d) array with k >= 1")
            self.centroids[w] = c

    @property
    def k(self) -> dict[str, int]:
        return {w: len(self.centroids[w]) for w in WAVE_TYPES}

    @property
    def offsets(self) -> dict[str, int]:
        out, nxt = {}, N_SPECIAL
        for w in WAVE_TYPES:
            out[w] = nxt
            nxt += len(self.centroids[w])
        return out

    @property
    def size(self) -> int:
        return N_SPECIAL + sum(self.k.values())

    def token_id(self, wave_type: str, cluster: int) -> int:
        if not 0 <= cluster < self.k[wave_type]:
            raise ValueError(f"{wave_type} cluster {cluster} out of range")
        return self.offsets[wave_type] + int(cluster)

    def decode_id(self, token: int) -> tuple[str, int]:
        """Inverse layout lookup: ``(wave_type, cluster)`` or ``(special name, -1)``."""
        if token in SPECIAL_NAMES:
            return SPECIAL_NAMES[token], -1
        for w in WAVE_TYPES:
            off = self.offsets[w]
            if off <= token < off + self.k[w]:
                return w, token - off
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")

    def assign(self, wave_type: str, latents) -> np.ndarray:
        """Token IDs for a batch of latents of one wave type."""
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        c = self.centroids[wave_type]
        if z.shape[1] != c.shape[1]:
            raise ValueError(f"{wave_type} latents have {z.shape[1]} dims, centroids {c.shape[1]}")
        idx, _ = nearest(z, c)
        return idx + self.offsets[wave_type]

    def to_dict(self) -> dict:
        return {
            "layout": {"specials": {v: k for k, v in SPECIAL_NAMES.items()},
                       "offsets": self.offsets, "k": self.k, "size": self.size},
            "centroids": {w: self.centroids[w].tolist() for w in WAVE_TYPES},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WaveVocabulary":
        return cls({w: np.array(d["centroids"][w], dtype=np.float64) for w in WAVE_TYPES},
                   d.get("provenance", {}))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "WaveVocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def assign_token(vocab: WaveVocabulary, wave_type: str, z) -> int:
    return int(vocab.assign(wave_type, z)[0])


def choose_k(points, seed: int = 0, k_max: int = 40, restarts: int = 5, default: int | None = None):
    """Knee of the wcss curve over ``k = 2..min(k_max, n-1)``, falling back to ``default``."""
    n = len(points)
    hi = min(k_max, n - 1)
    if hi < 4:
        return (default if default is not None else max(1, min(2, n))), None
    curve = wcss_curve(points, range(2, hi + 1), seed, restarts)
    # restart noise can leave small upticks; the knee is read off the running minimum
    knee = find_knee(KneeCurve(curve.ks, tuple(np.minimum.accumulate(curve.wcss))))
    if knee is None:
        knee = default if default is not None else 2
    return min(knee, n), curve


def build_vocabulary(latents: dict, k="auto", seed: int = 0, restarts: int = 5,
                     silhouette_max: int = 10_000) -> WaveVocabulary:
    """Cluster each wave type's latents and assemble the vocabulary.

    ``k`` is ``"auto"`` (knee search, defaults on failure) or a mapping from
    wave type to cluster count.
    """
    centroids, prov = {}, {"seed": seed, "restarts": restarts, "k_mode": "auto" if k == "auto" else "fixed"}
    for w in WAVE_TYPES:
        z = _validate_points(latents.get(w, np.zeros((0, 1))))
        if len(z) == 0:
            raise DataError(f"no {w} latents to cluster")
        curve = None
        if k == "auto":
            kw, curve = choose_k(z, seed, default=min(DEFAULT_K[w], len(z)), restarts=restarts)
        else:
            kw = int(k[w])
            if kw > len(z):
                raise DataError(f"k={kw} for {w} exceeds its {len(z)} latents")
        res = best_kmeans(z, kw, seed, restarts)
        centroids[w] = res.centroids
        sil = None
        if kw >= 2 and len(np.unique(res.assignments)) >= 2:
            sub = np.arange(len(z))
            if len(z) > silhouette_max:
                sub = np.sort(np.random.default_rng(seed).choice(len(z), silhouette_max, replace=False))
            if len(np.unique(res.assignments[sub])) >= 2:
                sil = silhouette(z[sub], res.assignments[sub])
        prov[w] = {"n": len(z), "k": kw, "wcss": res.wcss, "silhouette": sil,
                   "curve": None if curve is None else {"ks": list(curve.ks), "wcss": list(curve.wcss)}}
    return WaveVocabulary(centroids, prov)
