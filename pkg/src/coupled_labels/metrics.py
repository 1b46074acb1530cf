"""Ranking and agreement metrics: exact ROC-AUC via the Mann-Whitney
statistic with midrank tie handling, macro averaging with the single-class
skip rule, and the cross-fold diagnostic statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .datamodel import CoupledLabelsError


class MetricError(CoupledLabelsError):
    pass


class UndefinedAucError(MetricError):
    """AUC asked for a score set with only one class present."""


def roc_auc(scores, targets) -> float:
    """Probability a random positive outranks a random negative, ties
    counted half: AUC = (R_pos - n_pos(n_pos+1)/2) / (n_pos * n_neg) with
    R_pos the midrank sum of the positives."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and targets {y.shape} differ in length")
    pos = y == 1.0
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC undefined: only one class present")
    ranks = rankdata(s, method="average")
    r_pos = float(ranks[pos].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class AucReport:
    per_label_auc: list[float | None]  # None where the label was skipped
    macro_auc: float
    skipped_labels: list[int]

    def to_json_dict(self) -> dict:
        return {
            "per_label_auc": self.per_label_auc,
            "macro_auc": self.macro_auc,
            "skipped_labels": self.skipped_labels,
        }


def macro_auc(probs, labels) -> AucReport:
    """Per-label ROC-AUC, macro-averaged; single-class labels are skipped
    and listed. Raises if every label is single-class."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise MetricError(f"probs {p.shape} and labels {y.shape} must be equal 2-D shapes")
    per_label: list[float | None] = []
    skipped: list[int] = []
    for l in range(y.shape[1]):
        col = y[:, l]
        if col.min() == col.max():
            per_label.append(None)
            skipped.append(l)
        else:
            per_label.append(roc_auc(p[:, l], col))
    present = [v for v in per_label if v is not None]
    if not present:
        raise UndefinedAucError("macro-AUC undefined: every label has a single class")
    return AucReport(
        per_label_auc=per_label,
        macro_auc=float(np.mean(present)),
        skipped_labels=skipped,
    )


def pearson_label_correlation(probs) -> np.ndarray:
    """L x L Pearson correlation between probability columns. Columns with
    zero variance produce NaN rows/columns (reported as absent)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"expected 2-D probabilities, got shape {p.shape}")
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(p, rowvar=False)
    corr = np.atleast_2d(corr)
    valid = ~np.isnan(corr)
    corr[valid] = np.clip(corr[valid], -1.0, 1.0)
    return corr


@dataclass(frozen=True)
class FoldAgreement:
    """Cell-level agreement among K fold models' thresholded predictions."""

    majority_counts: dict[int, int]  # majority size -> number of cells
    unanimous_cells: int
    split_cells: int
    pair_agreement: np.ndarray       # (K, K), fraction of cells agreeing

    def to_json_dict(self) -> dict:
        return {
            "majority_counts": {str(k): v for k, v in sorted(self.majority_counts.items())},
            "unanimous_cells": self.unanimous_cells,
            "split_cells": self.split_cells,
            "pair_agreement": self.pair_agreement.tolist(),
        }


def _stack_folds(fold_probs) -> np.ndarray:
    mats = [np.asarray(m, dtype=np.float64) for m in fold_probs]
    if len(mats) < 2:
        raise MetricError("need at least two fold prediction matrices")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats) or mats[0].ndim != 2:
        raise MetricError("fold prediction matrices must share one 2-D shape")
    return np.stack(mats, axis=0)


def fold_agreement(fold_probs, threshold: float = 0.5) -> FoldAgreement:
    """Binarize each fold's probabilities at the threshold (p >= t -> 1) and
    count, per cell, how many folds voted with the majority."""
    stack = _stack_folds(fold_probs)
    K = stack.shape[0]
    binary = (stack >= threshold).astype(np.int64)
    ones = binary.sum(axis=0)
    majority = np.maximum(ones, K - ones)
    levels, counts = np.unique(majority, return_counts=True)
    majority_counts = {int(lv): int(c) for lv, c in zip(levels, counts)}
    unanimous = int((majority == K).sum())
    pair = np.ones((K, K))
    for a in range(K):
        for b in range(a + 1, K):
            rate = float((binary[a] == binary[b]).mean())
            pair[a, b] = pair[b, a] = rate
    return FoldAgreement(
        majority_counts=majority_counts,
        unanimous_cells=unanimous,
        split_cells=int(majority.size - unanimous),
        pair_agreement=pair,
    )


def per_label_fold_std(fold_probs) -> np.ndarray:
    """Population std across folds per cell, then mean over examples."""
    stack = _stack_folds(fold_probs)
    return stack.std(axis=0, ddof=0).mean(axis=0)


def probability_histograms(probs, bins: int = 20) -> np.ndarray:
    """Per-label counts over uniform bins of [0, 1].

    Bins are half-open [lo, hi) with the last bin right-closed, i.e. the bin
    index is min(floor(p * bins), bins - 1); p = 0.5 with two bins lands in
    the upper bin.
    """
    if bins < 1:
        raise MetricError(f"bins must be >= 1, got {bins}")
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"expected 2-D probabilities, got shape {p.shape}")
    idx = np.minimum((p * bins).astype(np.int64), bins - 1)
    counts = np.zeros((p.shape[1], bins), dtype=np.int64)
    for l in range(p.shape[1]):
        counts[l] = np.bincount(idx[:, l], minlength=bins)
    return counts
