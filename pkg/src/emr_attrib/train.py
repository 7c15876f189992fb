"""Mini-batch training with per-timestep binary cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DivergenceError, UndefinedMetricError
from .metrics import compute_auc
from .model import ModelParams, _backward, _forward, dropout_masks, forward
from .optim import PlateauSchedule, RMSProp

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    patience: int = 15
    lr_factor: float = 5.0
    max_lr_reductions: int = 2
    max_epochs: int = 100
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    prior_bias: bool = True  # start the output bias at the training log-odds

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.lr_factor, self.max_epochs, self.eps) <= 0:
            raise ConfigurationError("training hyperparameters must be positive")
        if self.patience < 1 or self.max_lr_reductions < 1:
            raise ConfigurationError("patience and max_lr_reductions must be >= 1")


# Desk-scale preset: the small model and ~600 encounters need a larger step
# than the 1e-4 default to converge within 100 epochs.
DESK_TRAIN = TrainConfig(learning_rate=3e-3)


def _bce_from_logits(logits, labels):
    # log(1 + e^l) - y*l, stable for large |l|
    return np.logaddexp(0.0, logits) - labels * logits


def _pad_batch(batch):
    """Stack encounters into (T_max, B, N) with a (T_max, B) loss-weight mask."""
    T = max(d.length_hours for d in batch)
    N = batch[0].values.shape[0]
    X = np.zeros((T, len(batch), N))
    W = np.zeros((T, len(batch)))
    labels = np.empty(len(batch))
    for b, d in enumerate(batch):
        t = d.length_hours
        X[:t, b] = d.values.T
        W[:t, b] = 1.0 / t  # mean over own timesteps
        labels[b] = float(d.label)
    return X, W / len(batch), labels


def batch_loss(params: ModelParams, batch, rng=None, train: bool = False, with_grads: bool = False):
    """Mean-over-time, mean-over-batch BCE (+ L2 when training)."""
    X, W, labels = _pad_batch(batch)
    masks = dropout_masks(params, X.shape[0], X.shape[1], rng) if train else None
    logits, cache = _forward(params, X, masks)
    loss = float((W * _bce_from_logits(logits, labels[None, :])).sum())
    l2 = params.config.l2
    if train and l2:  # the penalty belongs to the training objective only
        loss += l2 * sum(float((a * a).sum()) for a, r in zip(params.arrays(), params.regularized()) if r)
    if not with_grads:
        return loss, None
    dlogits = W * (expit(logits) - labels[None, :])
    _, grads = _backward(params, cache, dlogits, masks)
    if train and l2:
        grads = [g + 2.0 * l2 * a if r else g for g, a, r in zip(grads, params.arrays(), params.regularized())]
    return loss, grads


def _batches(dataset, batch_size, rng):
    """Shuffle, sort by length inside windows of 4 batches, then shuffle batch order."""
    order = rng.permutation(len(dataset))
    window = 4 * batch_size
    chunks = []
    for s in range(0, len(order), window):
        win = sorted(order[s:s + window], key=lambda i: dataset[i].length_hours)
        chunks += [win[k:k + batch_size] for k in range(0, len(win), batch_size)]
    for j in rng.permutation(len(chunks)):
        yield [dataset[i] for i in chunks[j]]


def validation_metrics(params: ModelParams, dataset) -> tuple[float, float]:
    """(BCE, AUC of the final-hour prediction) in eval mode."""
    loss = 0.0
    last = np.empty(len(dataset))
    for k, d in enumerate(dataset):
        y = forward(params, d.values)
        lab = float(d.label)
        yc = np.clip(y, 1e-15, 1 - 1e-15)
        loss += float(np.mean(-(lab * np.log(yc) + (1 - lab) * np.log(1 - yc))))
        last[k] = y[-1]
    try:
        auc = compute_auc(last, [bool(d.label) for d in dataset])
    except UndefinedMetricError:
        auc = float("nan")
    return loss / len(dataset), auc


def train(params: ModelParams, train_set: Sequence, val_set: Sequence, cfg: TrainConfig = DESK_TRAIN):
    """Fit ``params`` (copied, not mutated); return (best params, epoch log).

    Labels are broadcast to every timestep.  Weights with the lowest
    validation BCE are kept.  The LR is cut by ``lr_factor`` when validation
    BCE stalls for ``patience`` epochs; training ends at the
    ``max_lr_reductions``-th stall or after ``max_epochs``.
    """
    if not train_set or not val_set:
        raise ConfigurationError("train and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = params.copy()
    if cfg.prior_bias:
        prev = np.mean([bool(d.label) for d in train_set])
        prev = min(max(prev, 1e-3), 1 - 1e-3)
        params.b_out[0] = np.log(prev / (1 - prev))
    arrays = params.arrays()
    opt = RMSProp(arrays, cfg.learning_rate, cfg.rho, cfg.eps)
    sched = PlateauSchedule(opt, cfg.patience, cfg.lr_factor, cfg.max_lr_reductions)
    best = params.copy()
    log = []
    stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        lr = opt.lr
        total, n = 0.0, 0
        for batch in _batches(train_set, cfg.batch_size, rng):
            loss, grads = batch_loss(params, batch, rng, train=True, with_grads=True)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                logger.error("epoch %d: non-finite loss, aborting", epoch)
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.step(arrays, grads)
            total += loss * len(batch)
            n += len(batch)
        val_loss, val_auc = validation_metrics(params, val_set)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        keep_going = sched.step(val_loss)
        if sched.improved:
            best = params.copy()
        log.append({"epoch": epoch, "train_loss": total / n, "val_loss": val_loss,
                    "val_auc": val_auc, "lr": lr, "best": sched.improved})
        logger.info("epoch %3d  train %.4f  val %.4f  auc %.3f  lr %.1e", epoch, total / n, val_loss, val_auc, lr)
        if not keep_going:
            stop_reason = "lr_reductions"
            break
    best_row = min(log, key=lambda r: r["val_loss"])
    best.meta = {
        "epochs": len(log),
        "stop_reason": stop_reason,
        "best_epoch": best_row["epoch"],
        "best_val_loss": best_row["val_loss"],
        "best_val_auc": best_row["val_auc"],
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
    }
    return best, log
