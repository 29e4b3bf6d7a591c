"""Ranking metrics and evaluation reports."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def auroc(scores, labels) -> float | None:
    """Area under the ROC curve via midranks; ``None`` when only one class is present.

    Equals ``P(s_pos > s_neg) + 0.5 * P(s_pos == s_neg)`` over all
    positive/negative pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks for ties
    # sum of positive ranks minus its minimum is the Mann-Whitney U; all
    # quantities are multiples of 0.5 so this is exact in floating point
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce(scores, labels) -> float | None:
    """Pairwise counting reference, O(n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def macro_auroc(scores, labels) -> tuple[float, list[float | None]]:
    """Mean AUROC over label columns that contain both classes.

    Returns ``(macro, per_label)`` with ``None`` marking undefined columns.
    Raises ``ValueError`` if no column is defined.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ValueError("score and label matrices differ in shape")
    per = [auroc(s[:, j], y[:, j]) for j in range(s.shape[1])]
    defined = [a for a in per if a is not None]
    if not defined:
        raise ValueError("AUROC is undefined for every label")
    return float(np.mean(defined)), per


@dataclass
class EvalReport:
    label_names: list[str]
    per_label: dict[str, float | None]
    macro_auroc: float
    undefined_labels: list[str]
    n_eval: int
    hashes: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, label_names, hashes=None) -> "EvalReport":
        macro, per = macro_auroc(scores, labels)
        names = list(label_names)
        return cls(names, dict(zip(names, per)), macro,
                   [n for n, a in zip(names, per) if a is None], int(np.asarray(scores).shape[0]), hashes or {})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json() + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))
