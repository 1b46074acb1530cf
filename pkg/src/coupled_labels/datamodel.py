"""Core records shared by every stage: datasets, label/probability/logit
matrices, and the experiment configuration.

All numeric state is float64. Datasets live on disk as plain CSV with a
one-line header: feature columns first (any names), then label columns
whose names carry a ``label:`` prefix. Label cells are strict ``0``/``1``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_PREFIX = "label:"


class CoupledLabelsError(Exception):
    """Base class for all validation errors raised by this package."""


class DataFormatError(CoupledLabelsError):
    """A dataset file or array violates the dataset contract."""


class ConfigError(CoupledLabelsError):
    """An ExperimentConfig violates one of its invariants."""


# ---------------------------------------------------------------------------
# array validators
#
# LabelMatrix / ProbMatrix / LogitMatrix are plain float64 ndarrays; the
# checkers below are the single place their invariants are enforced, and are
# called at module boundaries.
# ---------------------------------------------------------------------------


def check_label_matrix(values) -> np.ndarray:
    """Validate an N x L matrix of {0,1} entries and return it as float64."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataFormatError(f"label matrix must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataFormatError("label matrix contains non-finite entries")
    if not np.isin(arr, (0.0, 1.0)).all():
        bad = np.argwhere(~np.isin(arr, (0.0, 1.0)))[0]
        raise DataFormatError(
            f"label matrix entry at row {bad[0]}, column {bad[1]} is not 0 or 1"
        )
    return arr


def check_prob_matrix(values) -> np.ndarray:
    """Validate an N x L matrix of probabilities in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataFormatError(f"probability matrix must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min(initial=0.0) < 0.0 or arr.max(initial=1.0) > 1.0:
        raise DataFormatError("probability matrix entries must lie in [0, 1]")
    return arr


def check_logit_matrix(values) -> np.ndarray:
    """Validate an N x L matrix of finite logits."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataFormatError(f"logit matrix must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataFormatError("logit matrix contains NaN/Inf entries")
    return arr


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of features (N x D), binary labels (N x L) and names.

    Treated as read-only after construction; safe to share across fold
    workers.
    """

    features: np.ndarray
    labels: np.ndarray
    label_names: list[str]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labs = check_label_matrix(self.labels)
        if feats.ndim != 2:
            raise DataFormatError(f"features must be 2-D, got shape {feats.shape}")
        if not np.isfinite(feats).all():
            raise DataFormatError("features contain non-finite entries")
        if feats.shape[0] != labs.shape[0]:
            raise DataFormatError(
                f"features have {feats.shape[0]} rows but labels have {labs.shape[0]}"
            )
        if feats.shape[0] < 1:
            raise DataFormatError("dataset must contain at least one example")
        if feats.shape[1] < 1:
            raise DataFormatError("dataset must have at least one feature")
        if labs.shape[1] < 2:
            raise DataFormatError("dataset must have at least two labels")
        if len(self.label_names) != labs.shape[1]:
            raise DataFormatError(
                f"{len(self.label_names)} label names for {labs.shape[1]} label columns"
            )
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)
        object.__setattr__(self, "label_names", list(self.label_names))

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_labels(self) -> int:
        return self.labels.shape[1]


def load_dataset(path, format: str = "csv") -> Dataset:
    """Load a Dataset from a CSV file.

    The header must name the D feature columns, then the L label columns
    prefixed with ``label:``. Label cells are parsed strictly as ``0``/``1``.
    """
    if format != "csv":
        raise DataFormatError(f"unsupported dataset format: {format!r}")
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected a header row") from None
        n_cols = len(header)
        label_start = None
        for idx, name in enumerate(header):
            if name.startswith(LABEL_PREFIX):
                label_start = idx
                break
        if label_start is None:
            raise DataFormatError(f"{path}: header has no '{LABEL_PREFIX}' columns")
        for idx in range(label_start, n_cols):
            if not header[idx].startswith(LABEL_PREFIX):
                raise DataFormatError(
                    f"{path}: feature column {header[idx]!r} appears after label columns"
                )
        label_names = [name[len(LABEL_PREFIX):] for name in header[label_start:]]

        feats: list[list[float]] = []
        labs: list[list[float]] = []
        for row_idx, row in enumerate(reader):
            if len(row) != n_cols:
                raise DataFormatError(
                    f"{path}: row {row_idx} has {len(row)} columns, expected {n_cols}"
                )
            try:
                feats.append([float(cell) for cell in row[:label_start]])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {row_idx}: bad feature value ({exc})") from None
            lab_row = []
            for col_off, cell in enumerate(row[label_start:]):
                if cell == "0":
                    lab_row.append(0.0)
                elif cell == "1":
                    lab_row.append(1.0)
                else:
                    raise DataFormatError(
                        f"{path}: row {row_idx}, column {header[label_start + col_off]!r}: "
                        f"label value {cell!r} is not 0 or 1"
                    )
            labs.append(lab_row)
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labs, dtype=np.float64),
        label_names=label_names,
    )


def save_dataset(ds: Dataset, path) -> None:
    """Write a Dataset as CSV; floats use repr so a reload is bit-exact."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{i}" for i in range(ds.n_features)]
        header += [LABEL_PREFIX + name for name in ds.label_names]
        writer.writerow(header)
        for i in range(ds.n_examples):
            row = [repr(float(v)) for v in ds.features[i]]
            row += [str(int(v)) for v in ds.labels[i]]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# ExperimentConfig
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AslParams:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable of the training/evaluation pipeline, with the published
    defaults baked in."""

    K: int = 3
    alpha: float = 0.3
    lambda_l1: float = 1e-3
    loss_kind: str = "ASL"  # "ASL" | "WeightedBCE"
    asl: AslParams = field(default_factory=AslParams)
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 24
    eval_batch_multiplier: int = 2
    epochs: int = 3
    patience: int = 3
    ema_decay: float = 0.999
    grad_clip_norm: float = 1.0
    seed: int = 0
    refinement_enabled: bool = True

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["asl"] = dataclasses.asdict(self.asl)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_ASL_FIELDS = {f.name for f in dataclasses.fields(AslParams)}
LOSS_KINDS = ("ASL", "WeightedBCE")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a (possibly partial) JSON dict, filling defaults
    for absent fields and rejecting unknown ones. Validates before returning."""
    unknown = set(raw) - _CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
    kwargs = dict(raw)
    if "asl" in kwargs:
        asl_raw = kwargs["asl"]
        if not isinstance(asl_raw, dict):
            raise ConfigError("asl: must be an object with gamma_pos/gamma_neg/clip")
        bad = set(asl_raw) - _ASL_FIELDS
        if bad:
            raise ConfigError(f"unknown asl field(s): {sorted(bad)}")
        kwargs["asl"] = AslParams(**asl_raw)
    return validate_config(ExperimentConfig(**kwargs))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config JSON must be an object")
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return cfg unchanged if every invariant holds; otherwise raise a
    ConfigError naming each violated field."""
    problems = []
    if not isinstance(cfg.K, int) or cfg.K < 2:
        problems.append(f"K: must be an integer >= 2, got {cfg.K}")
    if cfg.alpha < 0:
        problems.append(f"alpha: must be >= 0, got {cfg.alpha}")
    if cfg.lambda_l1 < 0:
        problems.append(f"lambda_l1: must be >= 0, got {cfg.lambda_l1}")
    if cfg.loss_kind not in LOSS_KINDS:
        problems.append(f"loss_kind: must be one of {LOSS_KINDS}, got {cfg.loss_kind!r}")
    if cfg.asl.gamma_pos < 0:
        problems.append(f"asl.gamma_pos: must be >= 0, got {cfg.asl.gamma_pos}")
    if cfg.asl.gamma_neg < 0:
        problems.append(f"asl.gamma_neg: must be >= 0, got {cfg.asl.gamma_neg}")
    if not 0.0 <= cfg.asl.clip < 1.0:
        problems.append(f"asl.clip: must lie in [0, 1), got {cfg.asl.clip}")
    if cfg.lr <= 0:
        problems.append(f"lr: must be > 0, got {cfg.lr}")
    if cfg.weight_decay < 0:
        problems.append(f"weight_decay: must be >= 0, got {cfg.weight_decay}")
    if not isinstance(cfg.batch_size, int) or cfg.batch_size < 1:
        problems.append(f"batch_size: must be a positive integer, got {cfg.batch_size}")
    if not isinstance(cfg.eval_batch_multiplier, int) or cfg.eval_batch_multiplier < 1:
        problems.append(
            f"eval_batch_multiplier: must be a positive integer, got {cfg.eval_batch_multiplier}"
        )
    if not isinstance(cfg.epochs, int) or cfg.epochs < 1:
        problems.append(f"epochs: must be a positive integer, got {cfg.epochs}")
    if not isinstance(cfg.patience, int) or cfg.patience < 1:
        problems.append(f"patience: must be a positive integer, got {cfg.patience}")
    if not 0.0 < cfg.ema_decay < 1.0:
        problems.append(f"ema_decay: must lie in (0, 1), got {cfg.ema_decay}")
    if cfg.grad_clip_norm <= 0:
        problems.append(f"grad_clip_norm: must be > 0, got {cfg.grad_clip_norm}")
    if not isinstance(cfg.seed, int):
        problems.append(f"seed: must be an integer, got {cfg.seed!r}")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return cfg
