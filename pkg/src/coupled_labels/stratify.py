"""K-fold assignment builders that keep per-label positive counts balanced.

``mis_split`` is the greedy iterative-stratification procedure (rarest label
first); ``bucketed_kfold`` deals exact label combinations round-robin; both
are pure functions of (labels, K, seed). ``random_kfold`` is the uniform
baseline the stratifiers are measured against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import CoupledLabelsError, check_label_matrix


class SplitError(CoupledLabelsError):
    """Invalid splitter input (e.g. more folds than examples)."""


@dataclass(frozen=True)
class FoldAssignment:
    """Exact partition of N examples into K folds."""

    fold_of: np.ndarray  # length N, int, entries in [0, K)
    K: int

    def __post_init__(self):
        arr = np.asarray(self.fold_of, dtype=np.int64)
        if arr.ndim != 1:
            raise SplitError("fold_of must be one-dimensional")
        if arr.size and (arr.min() < 0 or arr.max() >= self.K):
            raise SplitError(f"fold indices must lie in [0, {self.K})")
        if arr.size >= self.K:
            sizes = np.bincount(arr, minlength=self.K)
            if (sizes == 0).any():
                empty = int(np.argmin(sizes))
                raise SplitError(f"fold {empty} is empty although N >= K")
        arr.setflags(write=False)
        object.__setattr__(self, "fold_of", arr)

    @property
    def n_examples(self) -> int:
        return self.fold_of.shape[0]

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K)

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)


def save_folds(assign: FoldAssignment, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_index", "fold"])
        for i, f in enumerate(assign.fold_of):
            writer.writerow([i, int(f)])


def load_folds(path) -> FoldAssignment:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["example_index", "fold"]:
            raise SplitError(f"{path}: expected header 'example_index,fold'")
        rows = [(int(r[0]), int(r[1])) for r in reader]
    rows.sort()
    if [i for i, _ in rows] != list(range(len(rows))):
        raise SplitError(f"{path}: example indices must be 0..N-1 without gaps")
    folds = np.array([f for _, f in rows], dtype=np.int64)
    return FoldAssignment(fold_of=folds, K=int(folds.max()) + 1 if folds.size else 0)


@dataclass(frozen=True)
class MisStats:
    """Bookkeeping from one mis_split run.

    ``label_order`` is the sequence in which labels were exhausted;
    ``pre_assigned`` counts, per entry of label_order, how many of that
    label's positives had already been placed while serving earlier labels.
    A label picked with pre_assigned == 0 is guaranteed per-fold positive
    counts within +-1 of its real-valued quota.
    """

    label_order: list[int]
    pre_assigned: list[int]


def _check_split_args(labels: np.ndarray, K: int):
    n = labels.shape[0]
    if K < 2:
        raise SplitError(f"K must be >= 2, got {K}")
    if K > n:
        raise SplitError(f"cannot split {n} examples into {K} folds")


def mis_split(labels, K: int, seed: int, with_stats: bool = False):
    """Multilabel iterative stratification.

    Repeatedly takes the label with the fewest remaining unassigned positives
    (ties: lowest label index) and deals each of its unassigned positive
    examples, in index order, to the fold with the largest remaining quota
    for that label. Ties fall through to the largest remaining example quota
    and finally to a seeded uniform choice. Every quota the example touches
    is decremented. Examples with no positive labels are dealt last by
    example quota alone.
    """
    y = check_label_matrix(labels)
    n, n_labels = y.shape
    _check_split_args(y, K)
    rng = np.random.default_rng(seed)

    fold_of = np.full(n, -1, dtype=np.int64)
    example_quota = np.full(K, n / K, dtype=np.float64)
    counts = y.sum(axis=0)
    label_quota = np.tile(counts / K, (K, 1))  # (K, L)
    remaining_pos = counts.copy()
    positives = [np.flatnonzero(y[:, l] == 1.0) for l in range(n_labels)]
    unassigned = np.ones(n, dtype=bool)

    label_order: list[int] = []
    pre_assigned: list[int] = []

    def pick_fold(quota_row: np.ndarray) -> int:
        best = quota_row.max()
        tied = np.flatnonzero(quota_row == best)
        if tied.size > 1:
            sub = example_quota[tied]
            tied = tied[np.flatnonzero(sub == sub.max())]
        if tied.size > 1:
            return int(tied[rng.integers(tied.size)])
        return int(tied[0])

    while True:
        active = np.flatnonzero(remaining_pos > 0)
        if active.size == 0:
            break
        lab = int(active[np.argmin(remaining_pos[active])])
        label_order.append(lab)
        pre_assigned.append(int(counts[lab] - remaining_pos[lab]))
        for i in positives[lab]:
            if not unassigned[i]:
                continue
            f = pick_fold(label_quota[:, lab])
            fold_of[i] = f
            unassigned[i] = False
            example_quota[f] -= 1.0
            row = y[i]
            label_quota[f, row == 1.0] -= 1.0
            remaining_pos[row == 1.0] -= 1.0

    for i in np.flatnonzero(unassigned):
        best = example_quota.max()
        tied = np.flatnonzero(example_quota == best)
        f = int(tied[rng.integers(tied.size)]) if tied.size > 1 else int(tied[0])
        fold_of[i] = f
        example_quota[f] -= 1.0

    assign = FoldAssignment(fold_of=fold_of, K=K)
    if with_stats:
        return assign, MisStats(label_order=label_order, pre_assigned=pre_assigned)
    return assign


def bucketed_kfold(labels, K: int, seed: int) -> FoldAssignment:
    """Group examples by their exact label combination and deal each bucket
    round-robin across folds.

    A single fold counter runs across buckets (bucket order and within-bucket
    order both seeded), so singleton buckets degrade to a seeded random
    K-fold of near-equal sizes.
    """
    y = check_label_matrix(labels)
    n, _ = y.shape
    _check_split_args(y, K)
    rng = np.random.default_rng(seed)

    buckets: dict[str, list[int]] = {}
    for i in range(n):
        key = "".join("1" if v else "0" for v in y[i])
        buckets.setdefault(key, []).append(i)

    order = sorted(buckets)
    rng.shuffle(order)
    fold_of = np.full(n, -1, dtype=np.int64)
    counter = 0
    for key in order:
        members = np.array(buckets[key], dtype=np.int64)
        rng.shuffle(members)
        for i in members:
            fold_of[i] = counter % K
            counter += 1
    return FoldAssignment(fold_of=fold_of, K=K)


def random_kfold(n: int, K: int, seed: int) -> FoldAssignment:
    """Uniform random near-equal K-fold; the comparison baseline."""
    if K < 2:
        raise SplitError(f"K must be >= 2, got {K}")
    if K > n:
        raise SplitError(f"cannot split {n} examples into {K} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % K
    return FoldAssignment(fold_of=fold_of, K=K)


@dataclass(frozen=True)
class SplitQuality:
    """Exact arithmetic summary of how well a split preserves prevalences."""

    fold_sizes: np.ndarray          # (K,)
    prevalence: np.ndarray          # (K, L) per-fold positive rate
    global_prevalence: np.ndarray   # (L,)
    deviation: np.ndarray           # (K, L) |fold - global|
    max_deviation: float

    def rows(self) -> list[tuple[int, int, float, float, float]]:
        """One row per (fold, label): (fold, label, prevalence, global, deviation)."""
        K, L = self.prevalence.shape
        return [
            (f, l, float(self.prevalence[f, l]), float(self.global_prevalence[l]),
             float(self.deviation[f, l]))
            for f in range(K)
            for l in range(L)
        ]


def split_quality(labels, assign: FoldAssignment) -> SplitQuality:
    y = check_label_matrix(labels)
    if y.shape[0] != assign.n_examples:
        raise SplitError(
            f"labels have {y.shape[0]} rows but assignment covers {assign.n_examples}"
        )
    K = assign.K
    sizes = assign.fold_sizes().astype(np.float64)
    pos = np.zeros((K, y.shape[1]))
    for f in range(K):
        pos[f] = y[assign.fold_of == f].sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        prevalence = np.where(sizes[:, None] > 0, pos / np.maximum(sizes[:, None], 1), np.nan)
    global_prev = y.mean(axis=0)
    deviation = np.abs(prevalence - global_prev[None, :])
    return SplitQuality(
        fold_sizes=sizes.astype(np.int64),
        prevalence=prevalence,
        global_prevalence=global_prev,
        deviation=deviation,
        max_deviation=float(np.nanmax(deviation)),
    )
