"""Shared oracles for the test suite: central finite differences, a
relative-error reducer, the pair-count AUC reference, and a training loop
that never touches the coupling module."""

import math

import numpy as np
from scipy.special import expit


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at x, coordinate-wise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad


def max_rel_err(a, b, floor=1e-4):
    """Max over entries of |a-b| / max(|a|, |b|, floor).

    The floor keeps the check meaningful where the true gradient is below
    the central-difference noise level (~1e-10 absolute at h=1e-6): such
    entries are judged on absolute error against the floor instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    rel = np.abs(a - b) / scale
    return float(rel.max()) if rel.size else 0.0


def brute_force_auc(scores, targets):
    """O(n^2) pair-count AUC oracle: ties credited half."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    pos = scores[targets == 1]
    neg = scores[targets == 0]
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum()
    ties = (diff == 0).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def couplings_free_fold(train_x, train_y, val_x, val_y, cfg, seed):
    """Reference fold trainer that never imports the coupling module.

    Mirrors the harness fold loop (same rng streams, batching, EMA, early
    stopping) using only the predictor/loss/optimizer primitives, so a
    refinement-disabled harness run must match it bit for bit. Returns
    (best_macro_auc, best_epoch, best_eval_params).
    """
    from coupled_labels import metrics
    from coupled_labels.losses import asl_loss
    from coupled_labels.optim import (
        Schedule, adamw_step, clip_global_norm, ema_update, init_ema,
        init_optim, lr_at,
    )
    from coupled_labels.predictor import (
        PredictorParams, init_params, predict_backward, predict_forward,
    )

    ss = np.random.SeedSequence(seed)
    rng_init, rng_dropout, rng_shuffle = (np.random.default_rng(c) for c in ss.spawn(3))
    pred = init_params("linear", train_x.shape[1], train_y.shape[1], rng_init, hidden=32)
    n = train_x.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    sched = Schedule(warmup_steps=min(steps_per_epoch, total - 1), total_steps=total)
    params = pred.trainable()
    opt = init_optim(params, cfg.lr, cfg.weight_decay)
    ema = init_ema(params, cfg.ema_decay)
    step = 0
    best_auc, best_params, best_epoch = -np.inf, None, 0
    bad = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            lr = lr_at(sched, step, cfg.lr)
            z, cache = predict_forward(train_x[idx], pred, mode="train", rng=rng_dropout)
            sup = asl_loss(z, train_y[idx], cfg.asl.gamma_pos, cfg.asl.gamma_neg,
                           cfg.asl.clip)
            grads, _ = predict_backward(sup.grad_logits, cache, pred)
            grads, _ = clip_global_norm(grads, cfg.grad_clip_norm)
            adamw_step(params, grads, opt, lr)
            ema_update(ema, params)
            step += 1
        eval_params = PredictorParams(variant="linear", W2=ema.shadow["W2"].copy(),
                                      b2=ema.shadow["b2"].copy(),
                                      dropout_p=pred.dropout_p)
        eval_batch = cfg.batch_size * cfg.eval_batch_multiplier
        probs = np.empty((val_x.shape[0], train_y.shape[1]))
        for lo in range(0, val_x.shape[0], eval_batch):
            chunk = val_x[lo:lo + eval_batch]
            zz, _ = predict_forward(chunk, eval_params, mode="eval")
            probs[lo:lo + eval_batch] = expit(zz)
        auc = metrics.macro_auc(probs, val_y).macro_auc
        if auc > best_auc:
            best_auc, best_params, best_epoch = auc, eval_params, epoch
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return best_auc, best_epoch, best_params
