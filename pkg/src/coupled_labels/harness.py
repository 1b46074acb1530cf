"""Experiment orchestration: K-fold stratified training with early stopping
and best-checkpoint selection, view-averaged prediction, cross-fold
ensembling, ablation, and report assembly.

Reports are fully deterministic for a given (dataset, config, seed): no
timestamps, fixed key order, repr-exact floats.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import metrics
from .coupling import CouplingMatrix, new_coupling, refine_forward, save_coupling_csv
from .datamodel import (
    CoupledLabelsError,
    Dataset,
    ExperimentConfig,
    save_config,
    validate_config,
)
from .losses import compute_pos_weights
from .optim import Schedule, StepLog, init_train_state, save_train_log, train_step
from .predictor import PredictorParams, init_params, predict_forward, save_checkpoint
from .stratify import FoldAssignment, mis_split, save_folds

THREADS_ENV = "COUPLED_LABELS_THREADS"


class HarnessError(CoupledLabelsError):
    pass


# ---------------------------------------------------------------------------
# prediction views (TTA hook)
#
# Views are named input transforms; an image-backed predictor registers its
# "flip" here. The synthetic pipeline uses the identity view only.
# ---------------------------------------------------------------------------

VIEW_REGISTRY: dict = {"identity": lambda x: x}


def register_view(name: str, transform) -> None:
    VIEW_REGISTRY[name] = transform


def predict_probs(params: PredictorParams, coupling: CouplingMatrix | None, x,
                  batch_size: int | None = None) -> np.ndarray:
    """Eval-mode probabilities (post-refinement sigmoid), chunked."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    step = n if batch_size is None else max(1, batch_size)
    out = np.empty((n, params.n_labels))
    for lo in range(0, n, step):
        chunk = x[lo:lo + step]
        z, _ = predict_forward(chunk, params, mode="eval")
        if coupling is not None:
            z, _ = refine_forward(z, coupling)
        out[lo:lo + step] = expit(z)
    return out


def predict_with_views(params: PredictorParams, coupling: CouplingMatrix | None, x,
                       views=("identity",), batch_size: int | None = None) -> np.ndarray:
    """Average of predictions over the named input views."""
    views = list(views)
    if not views:
        raise HarnessError("views must be non-empty")
    if views[0] != "identity":
        raise HarnessError("the first view must be 'identity'")
    unknown = [v for v in views if v not in VIEW_REGISTRY]
    if unknown:
        raise HarnessError(f"unregistered view(s): {unknown}")
    x = np.asarray(x, dtype=np.float64)
    acc = None
    for name in views:
        probs = predict_probs(params, coupling, VIEW_REGISTRY[name](x), batch_size=batch_size)
        acc = probs if acc is None else acc + probs
    return acc / len(views)


# ---------------------------------------------------------------------------
# per-fold training
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_val_macro_auc: float
    epochs_run: int
    skipped_steps: int
    checkpoint_params: PredictorParams       # EMA weights at the best epoch
    checkpoint_coupling: CouplingMatrix | None
    val_auc: metrics.AucReport
    train_log: list[StepLog]


def _materialize_ema(shadow: dict[str, np.ndarray], template: PredictorParams,
                     coupling: CouplingMatrix | None):
    params = PredictorParams(
        variant=template.variant,
        W2=shadow["W2"].copy(),
        b2=shadow["b2"].copy(),
        W1=shadow["W1"].copy() if "W1" in shadow else None,
        b1=shadow["b1"].copy() if "b1" in shadow else None,
        dropout_p=template.dropout_p,
    )
    cm = None
    if coupling is not None:
        cm = CouplingMatrix(A=shadow["A"].copy(), alpha=coupling.alpha)
    return params, cm


def run_fold(train_x, train_y, val_x, val_y, cfg: ExperimentConfig, seed: int,
             fold_index: int = 0, variant: str = "linear", hidden: int = 32,
             views=("identity",)) -> FoldResult:
    """Train one fold: per-epoch validation on EMA weights, keep the best
    checkpoint, stop early after `patience` epochs without improvement."""
    cfg = validate_config(cfg)
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    n_train = train_x.shape[0]
    if n_train < 1 or np.asarray(val_x).shape[0] < 1:
        raise HarnessError(f"fold {fold_index}: empty train or validation subset")

    ss = np.random.SeedSequence(seed)
    rng_init, rng_dropout, rng_shuffle = (np.random.default_rng(c) for c in ss.spawn(3))

    predictor = init_params(variant, train_x.shape[1], train_y.shape[1], rng_init,
                            hidden=hidden)
    coupling = new_coupling(train_y.shape[1], alpha=cfg.alpha) if cfg.refinement_enabled else None

    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if total_steps < 2:
        raise HarnessError(
            f"fold {fold_index}: schedule needs at least 2 steps, got {total_steps}"
        )
    schedule = Schedule(
        warmup_steps=min(steps_per_epoch, total_steps - 1),
        total_steps=total_steps,
    )
    pos_weight = compute_pos_weights(train_y) if cfg.loss_kind == "WeightedBCE" else None
    state = init_train_state(predictor, coupling, schedule, cfg, rng_dropout,
                             pos_weight=pos_weight)

    eval_batch = cfg.batch_size * cfg.eval_batch_multiplier
    best_auc = -math.inf
    best_epoch = 0
    best_ckpt = None
    best_report = None
    epochs_without_improvement = 0
    epochs_run = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(n_train)
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            train_step(train_x[idx], train_y[idx], state, cfg)
        epochs_run = epoch

        ema_params, ema_coupling = _materialize_ema(state.ema.shadow, predictor, coupling)
        val_probs = predict_with_views(ema_params, ema_coupling, val_x, views=views,
                                       batch_size=eval_batch)
        try:
            report = metrics.macro_auc(val_probs, val_y)
        except metrics.UndefinedAucError as exc:
            raise HarnessError(f"fold {fold_index}: {exc}") from None

        if report.macro_auc > best_auc:
            best_auc = report.macro_auc
            best_epoch = epoch
            best_ckpt = (ema_params, ema_coupling)
            best_report = report
            epochs_without_improvement = 0
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                break

    ckpt_params, ckpt_coupling = best_ckpt
    return FoldResult(
        fold=fold_index,
        best_epoch=best_epoch,
        best_val_macro_auc=best_auc,
        epochs_run=epochs_run,
        skipped_steps=state.skips,
        checkpoint_params=ckpt_params,
        checkpoint_coupling=ckpt_coupling,
        val_auc=best_report,
        train_log=state.log,
    )


# ---------------------------------------------------------------------------
# full experiment
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    config: ExperimentConfig
    label_names: list[str]
    assignment: FoldAssignment
    fold_results: list[FoldResult]
    ensemble_source: str               # "test" | "oof"
    ensemble_auc: metrics.AucReport
    ensemble_probs: np.ndarray
    fold_eval_probs: list[np.ndarray]  # each fold model on the common eval set
    coupling_mean: np.ndarray | None
    agreement: metrics.FoldAgreement
    per_label_std: np.ndarray
    correlation: np.ndarray
    histograms: np.ndarray
    histogram_bins: int

    def to_json_dict(self) -> dict:
        return _jsonify({
            "config": self.config.to_json_dict(),
            "label_names": self.label_names,
            "fold_assignment": self.assignment.fold_of.tolist(),
            "folds": [
                {
                    "fold": fr.fold,
                    "best_epoch": fr.best_epoch,
                    "best_val_macro_auc": fr.best_val_macro_auc,
                    "epochs_run": fr.epochs_run,
                    "skipped_steps": fr.skipped_steps,
                    "val_auc": fr.val_auc.to_json_dict(),
                }
                for fr in self.fold_results
            ],
            "ensemble": {
                "source": self.ensemble_source,
                "auc": self.ensemble_auc.to_json_dict(),
            },
            "coupling_mean": None if self.coupling_mean is None else self.coupling_mean.tolist(),
            "diagnostics": {
                "fold_agreement": self.agreement.to_json_dict(),
                "per_label_fold_std": self.per_label_std.tolist(),
                "pearson_correlation": self.correlation.tolist(),
                "probability_histograms": {
                    "bins": self.histogram_bins,
                    "counts": self.histograms.tolist(),
                },
            },
        })


def _jsonify(obj):
    """Recursively replace NaN/Inf floats with None for strict JSON."""
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _fold_workers(k: int) -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        cap = int(raw)
    except ValueError:
        raise HarnessError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(k, cap))


def run_experiment(dataset: Dataset, cfg: ExperimentConfig,
                   test_dataset: Dataset | None = None, variant: str = "linear",
                   hidden: int = 32, views=("identity",),
                   histogram_bins: int = 20) -> RunReport:
    """Stratified K-fold training plus fold-ensemble evaluation.

    With a test dataset, fold models are ensembled (arithmetic mean) on it.
    Without one, the headline AUC, correlations and histograms come from
    out-of-fold predictions, while agreement/variability diagnostics use the
    fold models' predictions on the full feature matrix (they need common
    inputs).
    """
    cfg = validate_config(cfg)
    if test_dataset is not None and test_dataset.n_labels != dataset.n_labels:
        raise HarnessError("train and test datasets disagree on label count")

    assign = mis_split(dataset.labels, cfg.K, cfg.seed)

    def one_fold(k: int) -> FoldResult:
        val_idx = assign.indices(k)
        train_idx = np.flatnonzero(assign.fold_of != k)
        return run_fold(
            dataset.features[train_idx], dataset.labels[train_idx],
            dataset.features[val_idx], dataset.labels[val_idx],
            cfg, seed=cfg.seed + k, fold_index=k, variant=variant, hidden=hidden,
            views=views,
        )

    workers = _fold_workers(cfg.K)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fold_results = list(pool.map(one_fold, range(cfg.K)))
    else:
        fold_results = [one_fold(k) for k in range(cfg.K)]

    eval_batch = cfg.batch_size * cfg.eval_batch_multiplier
    if test_dataset is not None:
        eval_x, eval_labels = test_dataset.features, test_dataset.labels
    else:
        eval_x, eval_labels = dataset.features, dataset.labels
    fold_eval_probs = [
        predict_with_views(fr.checkpoint_params, fr.checkpoint_coupling, eval_x,
                           views=views, batch_size=eval_batch)
        for fr in fold_results
    ]
    ensemble_probs = np.mean(np.stack(fold_eval_probs, axis=0), axis=0)

    if test_dataset is not None:
        source = "test"
        headline_probs = ensemble_probs
    else:
        source = "oof"
        headline_probs = np.empty_like(ensemble_probs)
        for k in range(cfg.K):
            val_idx = assign.indices(k)
            headline_probs[val_idx] = fold_eval_probs[k][val_idx]
    ensemble_auc = metrics.macro_auc(headline_probs, eval_labels)

    coupling_mean = None
    if cfg.refinement_enabled:
        coupling_mean = np.mean(
            np.stack([fr.checkpoint_coupling.A for fr in fold_results], axis=0), axis=0
        )

    return RunReport(
        config=cfg,
        label_names=dataset.label_names,
        assignment=assign,
        fold_results=fold_results,
        ensemble_source=source,
        ensemble_auc=ensemble_auc,
        ensemble_probs=headline_probs,
        fold_eval_probs=fold_eval_probs,
        coupling_mean=coupling_mean,
        agreement=metrics.fold_agreement(fold_eval_probs),
        per_label_std=metrics.per_label_fold_std(fold_eval_probs),
        correlation=metrics.pearson_label_correlation(headline_probs),
        histograms=metrics.probability_histograms(headline_probs, bins=histogram_bins),
        histogram_bins=histogram_bins,
    )


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


def write_run_report(report: RunReport, outdir) -> Path:
    """Materialize a run directory: report.json, config snapshot, fold
    assignment, per-fold logs and checkpoints, mean coupling CSV."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.json", "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_config(report.config, outdir / "config.json")
    save_folds(report.assignment, outdir / "folds.csv")
    cfg_hash = report.config.hash()
    for fr in report.fold_results:
        save_train_log(fr.train_log, outdir / f"fold{fr.fold}_train_log.csv")
        save_checkpoint(
            outdir / "checkpoints" / f"fold{fr.fold}.json",
            fr.checkpoint_params,
            None if fr.checkpoint_coupling is None else fr.checkpoint_coupling.A,
            cfg_hash,
            alpha=None if fr.checkpoint_coupling is None else fr.checkpoint_coupling.alpha,
        )
    if report.coupling_mean is not None:
        save_coupling_csv(report.coupling_mean, report.label_names,
                          outdir / "coupling_mean.csv")
    return outdir


def read_report_json(rundir) -> dict:
    path = Path(rundir) / "report.json"
    if not path.exists():
        raise HarnessError(f"no report.json under {rundir}")
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    refined: RunReport
    baseline: RunReport

    def comparison(self, near_zero: float = 0.05) -> dict:
        A = self.refined.coupling_mean
        off = A[~np.eye(A.shape[0], dtype=bool)]
        summary = {
            "n_positive": int((off > near_zero).sum()),
            "n_negative": int((off < -near_zero).sum()),
            "n_near_zero": int((np.abs(off) <= near_zero).sum()),
            "near_zero_threshold": near_zero,
        }
        return _jsonify({
            "macro_auc_refined": self.refined.ensemble_auc.macro_auc,
            "macro_auc_baseline": self.baseline.ensemble_auc.macro_auc,
            "delta": self.refined.ensemble_auc.macro_auc - self.baseline.ensemble_auc.macro_auc,
            "source": self.refined.ensemble_source,
            "coupling_sign_summary": summary,
        })


def run_ablation(dataset: Dataset, cfg: ExperimentConfig,
                 test_dataset: Dataset | None = None, variant: str = "linear",
                 hidden: int = 32) -> AblationResult:
    """Same data, same seeds, refinement on vs off."""
    cfg_on = dataclasses.replace(validate_config(cfg), refinement_enabled=True)
    cfg_off = dataclasses.replace(cfg_on, refinement_enabled=False)
    refined = run_experiment(dataset, cfg_on, test_dataset=test_dataset, variant=variant,
                             hidden=hidden)
    baseline = run_experiment(dataset, cfg_off, test_dataset=test_dataset, variant=variant,
                              hidden=hidden)
    return AblationResult(refined=refined, baseline=baseline)
