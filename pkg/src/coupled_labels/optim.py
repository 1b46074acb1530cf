"""Training mechanics: decoupled-weight-decay Adam, per-step cosine schedule
with a one-epoch linear warm-up, global-norm gradient clipping, an EMA shadow
of every trainable (coupling matrix included), and non-finite-step skipping.

A skipped step still advances the schedule clock so total_steps keeps its
meaning; parameters, moments and EMA are left untouched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .coupling import CouplingMatrix, enforce_zero_diag, refine_backward, refine_forward
from .datamodel import CoupledLabelsError, ExperimentConfig
from .predictor import PredictorParams, predict_backward, predict_forward

# weight matrices are decayed; biases are not
DECAY_KEYS = frozenset({"W1", "W2", "A"})


class ScheduleError(CoupledLabelsError):
    pass


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ScheduleError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}"
            )


def lr_at(sched: Schedule, t: int, base_lr: float) -> float:
    """Linear ramp to base_lr over the warm-up, then cosine decay to zero."""
    if not 0 <= t <= sched.total_steps:
        raise ScheduleError(f"step {t} outside [0, {sched.total_steps}]")
    if t < sched.warmup_steps:
        return base_lr * (t + 1) / sched.warmup_steps
    progress = (t - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so the joint L2 norm is at most max_norm.

    Returns the observed pre-clip norm; a non-finite norm leaves the
    gradients untouched and signals the caller to skip the step.
    """
    if max_norm <= 0:
        raise ScheduleError(f"max_norm must be > 0, got {max_norm}")
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.square(g)))
    norm = math.sqrt(sq)
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


@dataclass
class OptimState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    base_lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim(params: dict[str, np.ndarray], base_lr: float, weight_decay: float) -> OptimState:
    return OptimState(
        t=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        base_lr=base_lr,
        weight_decay=weight_decay,
    )


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState, lr: float,
               decay_keys: frozenset[str] = DECAY_KEYS) -> None:
    """Standard decoupled update, in place on the live parameter arrays."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if k in decay_keys:
            update = update + state.weight_decay * p
        p -= lr * update


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float

    def __post_init__(self):
        # decay 0 is the degenerate "shadow tracks params exactly" case
        if not 0.0 <= self.decay < 1.0:
            raise ScheduleError(f"ema decay must lie in [0, 1), got {self.decay}")


def init_ema(params: dict[str, np.ndarray], decay: float) -> EmaState:
    return EmaState(shadow={k: p.copy() for k, p in params.items()}, decay=decay)


def ema_update(ema: EmaState, params: dict[str, np.ndarray]) -> EmaState:
    d = ema.decay
    for k, p in params.items():
        s = ema.shadow[k]
        s *= d
        s += (1.0 - d) * p
    return ema


# ---------------------------------------------------------------------------
# full training step
# ---------------------------------------------------------------------------


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    grad_norm: float
    skipped: bool


@dataclass
class TrainState:
    """Everything one fold's training run mutates; owned by a single run."""

    predictor: PredictorParams
    coupling: CouplingMatrix | None
    opt: OptimState
    ema: EmaState
    schedule: Schedule
    rng_dropout: np.random.Generator
    pos_weight: np.ndarray | None = None
    step: int = 0
    skips: int = 0
    log: list[StepLog] = field(default_factory=list)

    def trainables(self) -> dict[str, np.ndarray]:
        params = self.predictor.trainable()
        if self.coupling is not None:
            params["A"] = self.coupling.A
        return params


def init_train_state(predictor: PredictorParams, coupling: CouplingMatrix | None,
                     schedule: Schedule, cfg: ExperimentConfig,
                     rng_dropout: np.random.Generator,
                     pos_weight: np.ndarray | None = None) -> TrainState:
    params = predictor.trainable()
    if coupling is not None:
        params = dict(params)
        params["A"] = coupling.A
    return TrainState(
        predictor=predictor,
        coupling=coupling,
        opt=init_optim(params, cfg.lr, cfg.weight_decay),
        ema=init_ema(params, cfg.ema_decay),
        schedule=schedule,
        rng_dropout=rng_dropout,
        pos_weight=pos_weight,
    )


def _supervised_loss(z, y, cfg: ExperimentConfig, pos_weight) -> losses.LossOutput:
    if cfg.loss_kind == "ASL":
        return losses.asl_loss(z, y, gamma_pos=cfg.asl.gamma_pos,
                               gamma_neg=cfg.asl.gamma_neg, clip=cfg.asl.clip)
    if pos_weight is None:
        pos_weight = losses.compute_pos_weights(y)
    return losses.weighted_bce_loss(z, y, pos_weight)


def train_step(x, y, state: TrainState, cfg: ExperimentConfig) -> StepLog:
    """One optimization step over a batch; skips the update entirely if the
    loss or any gradient is non-finite."""
    lr = lr_at(state.schedule, state.step, cfg.lr)
    z, pcache = predict_forward(x, state.predictor, mode="train", rng=state.rng_dropout)
    if state.coupling is not None:
        z_ref, ccache = refine_forward(z, state.coupling)
        l1_value, l1_grad = losses.l1_penalty(state.coupling.A, cfg.lambda_l1)
    else:
        z_ref, ccache = z, None
        l1_value, l1_grad = 0.0, None

    sup = _supervised_loss(z_ref, y, cfg, state.pos_weight)
    total = sup.value + l1_value

    skipped = False
    grad_norm = math.nan
    if not sup.is_finite or not math.isfinite(total):
        skipped = True
    else:
        if state.coupling is not None:
            grad_z, grad_A = refine_backward(sup.grad_logits, ccache, state.coupling)
            grad_A = grad_A + l1_grad
        else:
            grad_z = sup.grad_logits
        grads, _ = predict_backward(grad_z, pcache, state.predictor)
        if state.coupling is not None:
            grads["A"] = grad_A
        grads, grad_norm = clip_global_norm(grads, cfg.grad_clip_norm)
        if not math.isfinite(grad_norm):
            skipped = True
        else:
            params = state.trainables()
            adamw_step(params, grads, state.opt, lr)
            if state.coupling is not None:
                enforce_zero_diag(state.coupling)
            ema_update(state.ema, params)

    entry = StepLog(step=state.step, lr=lr, loss=total, grad_norm=grad_norm, skipped=skipped)
    state.step += 1
    if skipped:
        state.skips += 1
    state.log.append(entry)
    return entry


def save_train_log(log: list[StepLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "grad_norm", "skipped"])
        for e in log:
            writer.writerow([e.step, repr(e.lr), repr(e.loss), repr(e.grad_norm), int(e.skipped)])
