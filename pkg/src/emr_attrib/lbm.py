"""Learned Binary Masks: which non-zero inputs carry the evidence for risk.

Two stages.  First a soft mask ``m = sigmoid(A * z)`` over the non-zero
entries of the dt-matrix is fitted by RMSProp so that the masked input
drives the ROM trajectory down while leaving as many entries unmasked as
possible.  Then one threshold per timestep binarizes ``m``; thresholds are
searched backwards in time over the unique soft-mask values of each column.
The attribution is ``1 - M``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import expit

from .attribution import Attribution
from .errors import ConfigurationError, DivergenceError
from .model import ModelParams, _check_input, forward, forward_and_input_gradients, \
    run_from_state, state_trajectory, states_at
from .optim import PlateauSchedule, RMSProp


@dataclass(frozen=True)
class LbmConfig:
    lambda1_soft: float = 0.005
    lambda2_soft: float = 0.0005
    steepness: float = 5.0
    learning_rate: float = 0.1
    lr_factor: float = 10.0
    lr_patience: int = 5
    max_iterations: int = 5000
    max_lr_reductions: int = 2  # stop when the loss stalls again after this many cuts
    min_delta: float = 1e-4
    lambda1_thresh: float = 1e-4
    s_min: float = 0.05
    max_sweeps: int = 3

    def __post_init__(self):
        positive = (self.lambda1_soft, self.steepness, self.learning_rate, self.lr_factor,
                    self.lr_patience, self.max_iterations, self.max_lr_reductions, self.max_sweeps)
        if min(positive) <= 0 or min(self.lambda2_soft, self.lambda1_thresh, self.min_delta) < 0:
            raise ConfigurationError("LBM hyperparameters must be positive")
        if not 0 < self.s_min < 1:
            raise ConfigurationError("s_min must lie in (0, 1)")


# The algorithm listing uses a much stronger near-binary penalty.
STRONG_BINARY_PRESET = LbmConfig(lambda2_soft=0.5)
PRESETS = {"default": LbmConfig(), "strong-binary": STRONG_BINARY_PRESET}


@dataclass
class SoftMask:
    logits: np.ndarray  # z, N x T
    mask: np.ndarray  # m in (0, 1]; exactly 1 where not trainable
    trainable: np.ndarray  # bool N x T
    loss_trace: list
    iterations: int


@dataclass
class BinaryMask:
    M: np.ndarray  # {0, 1}, N x T
    eta: np.ndarray  # per-timestep thresholds, length T
    masked_trajectory: np.ndarray
    converged: bool
    sweeps: int


def _soft_objective(params, x, z, trainable, cfg: LbmConfig):
    """Loss and d(loss)/dz for the soft-mask problem."""
    A = cfg.steepness
    T = x.shape[1]
    m = np.where(trainable, expit(A * z), 1.0)
    y, g_in = forward_and_input_gradients(params, x * m, lambda y: np.full(T, 1.0 / T))
    dm = m * (1.0 - m)
    tgt = (m > 0.5).astype(float)
    # BCE(target, sigmoid(A z)) via softplus for stability; target held constant
    az = A * z[trainable]
    bce = tgt[trainable] * np.logaddexp(0.0, -az) + (1 - tgt[trainable]) * np.logaddexp(0.0, az)
    loss = float(y.mean() + cfg.lambda1_soft * (1.0 - m[trainable]).sum() + cfg.lambda2_soft * bce.sum())
    grad = A * (g_in * x * dm - cfg.lambda1_soft * dm + cfg.lambda2_soft * (m - tgt))
    return loss, np.where(trainable, grad, 0.0)


def optimize_soft_mask(params: ModelParams, x, cfg: LbmConfig = LbmConfig()) -> SoftMask:
    """Fit the soft mask by RMSProp; returns the lowest-loss iterate."""
    x = _check_input(params, x)
    trainable = x != 0
    z = np.ones_like(x)
    if not trainable.any():
        return SoftMask(z, np.ones_like(x), trainable, [], 0)
    opt = RMSProp([z], cfg.learning_rate)
    sched = PlateauSchedule(opt, cfg.lr_patience, cfg.lr_factor, cfg.max_lr_reductions + 1, cfg.min_delta)
    best_z, best_loss = z.copy(), np.inf
    trace = []
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        loss, grad = _soft_objective(params, x, z, trainable, cfg)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite LBM loss at iteration {it}")
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_z = loss, z.copy()
        if not sched.step(loss):
            break
        opt.step([z], [grad])
    mask = np.where(trainable, expit(cfg.steepness * best_z), 1.0)
    return SoftMask(best_z, mask, trainable, trace, it)


def _binary(soft: SoftMask, eta: np.ndarray) -> np.ndarray:
    return np.where(soft.trainable, soft.mask > eta[None, :], True).astype(float)


def binarize_mask(params: ModelParams, x, soft: SoftMask, cfg: LbmConfig = LbmConfig()) -> BinaryMask:
    """Per-timestep threshold search, sweeping from the last hour to the first.

    The incumbent thresholds (all 0.5 initially) are a candidate too, so a
    column only changes when a unique soft-mask value strictly lowers the
    objective; ties keep the smallest candidate.  Stops once every masked
    prediction is below ``s_min`` or after ``max_sweeps`` sweeps.
    """
    x = _check_input(params, x)
    N, T = x.shape
    lam = cfg.lambda1_thresh
    eta = np.full(T, 0.5)
    M = _binary(soft, eta)
    y = forward(params, x * M)
    best = float(y.mean() + lam * (1.0 - M).sum())
    sweeps = 0
    converged = bool(np.all(y < cfg.s_min))
    while not converged and sweeps < cfg.max_sweeps:
        sweeps += 1
        # columns < t stay fixed while column t is searched, so one state pass per sweep
        hs, cs = state_trajectory(params, x * M)
        y_cur = forward(params, x * M)
        for t in range(T - 1, -1, -1):
            cands = np.unique(soft.mask[soft.trainable[:, t], t])
            if cands.size == 0:
                continue
            cols = soft.mask[:, t][:, None] > cands[None, :]  # (N, K)
            cols = np.where(soft.trainable[:, t][:, None], cols, True).astype(float)
            K = cands.size
            tail = np.repeat((x[:, t:] * M[:, t:]).T[:, None, :], K, axis=1)  # (T-t, K, N)
            tail[0] = (x[:, t][:, None] * cols).T
            y_tail = run_from_state(params, states_at(hs, cs, t), tail)  # (T-t, K)
            head = y_cur[:t].sum()
            reg_rest = (1.0 - M).sum() - (1.0 - M[:, t]).sum()
            objs = (head + y_tail.sum(axis=0)) / T + lam * (reg_rest + (1.0 - cols).sum(axis=0))
            k = int(np.argmin(objs))  # first minimum = smallest candidate
            if objs[k] < best:
                best = float(objs[k])
                eta[t] = cands[k]
                M[:, t] = cols[:, k]
                y_cur[t:] = y_tail[:, k]
        y = forward(params, x * M)
        converged = bool(np.all(y < cfg.s_min))
    return BinaryMask(M, eta, y, converged, sweeps)


def explain_lbm(params: ModelParams, x, cfg: LbmConfig = LbmConfig(), encounter_id: str = "",
                feature_order=None) -> Attribution:
    """Binary attribution ``1 - M`` with convergence metadata."""
    t0 = time.perf_counter()
    x = _check_input(params, x)
    y = forward(params, x)
    if np.all(y < cfg.s_min):
        # nothing to explain: the trajectory already satisfies the target
        soft = SoftMask(np.ones_like(x), np.ones_like(x), x != 0, [], 0)
        binm = BinaryMask(np.ones_like(x), np.full(x.shape[1], 0.5), y, True, 0)
    else:
        soft = optimize_soft_mask(params, x, cfg)
        binm = binarize_mask(params, x, soft, cfg)
    seconds = time.perf_counter() - t0
    values = 1.0 - binm.M
    meta = {
        "converged": binm.converged,
        "trajectory": y.tolist(),
        "masked_trajectory": binm.masked_trajectory.tolist(),
        "thresholds": binm.eta.tolist(),
        "soft_iterations": soft.iterations,
        "threshold_sweeps": binm.sweeps,
        "config": asdict(cfg),
    }
    order = feature_order or [f"f{j}" for j in range(x.shape[0])]
    return Attribution(encounter_id, "lbm", values, list(order), meta,
                       {"seconds": seconds, "n_features": x.shape[0], "t_hours": x.shape[1],
                        "converged": binm.converged})
