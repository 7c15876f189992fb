"""Per-timestep KernelSHAP against a zero-change background.

For timestep ``tau`` the players are the N entries of column ``tau``; the
history before ``tau`` stays at its actual values.  A coalition keeps the
entries where ``z'_j = 1`` and zeroes the rest, i.e. "no new measurement".
Each y_tau is then split into ``phi0`` (all entries zeroed) plus one
contribution per entry by Shapley-kernel weighted least squares with the
additivity identity imposed exactly.

Entries that are already zero are dummies: zeroing them changes nothing, so
they get ``phi = 0`` and only the non-zero entries enter the regression.
"""

from __future__ import annotations

import itertools
import time
import zlib
from dataclasses import asdict, dataclass
from math import comb, factorial

import numpy as np
from scipy.special import expit

from .attribution import Attribution
from .errors import ConfigurationError, ShapeError
from .model import ModelParams, _check_input, _forward, forward, state_trajectory, states_at, step_batch

MODES = ("auto", "enumerate", "sample")
MAX_EXACT_PLAYERS = 20


@dataclass(frozen=True)
class KshapConfig:
    budget: int | None = None  # total coalition evaluations; None -> 2*N*T + 2048
    mode: str = "auto"  # auto: enumerate when 2^n fits the per-timestep budget
    ridge: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.budget is not None and self.budget < 1:
            raise ConfigurationError("budget must be positive")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be non-negative")

    def total_budget(self, N: int, T: int) -> int:
        return 2 * N * T + 2048 if self.budget is None else self.budget

    def per_timestep(self, N: int, T: int) -> int:
        return max(N + 2, self.total_budget(N, T) // T)


def shapley_kernel_weight(N: int, s: int) -> float:
    """(N-1) / (C(N,s) s (N-s)); empty and full coalitions are constraints."""
    if not 0 < s < N:
        raise ValueError(f"coalition size {s} of {N} is a constraint row, not a weighted row")
    return (N - 1) / (comb(N, s) * s * (N - s))


def _column_payouts(params: ModelParams, states, col: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """y_tau for each coalition row of Z (B, N) applied to column ``col``."""
    return step_batch(params, states, Z * col[None, :])


def masked_forward(params: ModelParams, x, tau: int, z) -> float:
    """y_tau with history intact and column tau zeroed where ``z`` is 0."""
    x = _check_input(params, x)
    N, T = x.shape
    if not 0 <= tau < T:
        raise ShapeError(f"timestep {tau} outside [0, {T})")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (N,):
        raise ShapeError(f"coalition must have length {N}, got {z.shape}")
    hs, cs = state_trajectory(params, x[:, :tau + 1])
    states = states_at(hs, cs, tau)
    return float(_column_payouts(params, states, x[:, tau], z[None, :])[0])


def _all_coalitions(n: int) -> np.ndarray:
    """Every proper non-empty coalition of n players, as a (2^n - 2, n) array."""
    Z = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    size = Z.sum(axis=1)
    return Z[(size > 0) & (size < n)]


def _enumerated_rows(n: int):
    Z = _all_coalitions(n)
    s = Z.sum(axis=1).astype(int)
    w = np.array([shapley_kernel_weight(n, k) for k in range(n + 1)[1:-1]])[s - 1]
    return Z, w


def _sampled_rows(n: int, n_rows: int, rng: np.random.Generator):
    """Kernel-distributed coalitions drawn in complementary pairs, deduplicated.

    Sizes are drawn with probability proportional to the total kernel mass of
    each size, members uniformly within a size; a duplicate's weight is its
    count, so the weighted rows estimate the full kernel-weighted problem.
    """
    sizes = np.arange(1, n)
    p = (n - 1) / (sizes * (n - sizes))
    p /= p.sum()
    pairs = max(1, n_rows // 2)
    rows = np.zeros((2 * pairs, n))
    drawn = rng.choice(sizes, size=pairs, p=p)
    for k, s in enumerate(drawn):
        rows[2 * k, rng.choice(n, size=s, replace=False)] = 1.0
        rows[2 * k + 1] = 1.0 - rows[2 * k]
    Z, counts = np.unique(rows, axis=0, return_counts=True)
    return Z, counts.astype(float)


def _solve_constrained(Z, w, v, v0, v1, ridge):
    """Weighted least squares for phi with phi0 = v0 and sum(phi) = v1 - v0.

    The last player is eliminated through the constraint.  Returns
    (phi, ridge_used).
    """
    n = Z.shape[1]
    total = v1 - v0
    if n == 1:
        return np.array([total]), False
    X = Z[:, :-1] - Z[:, -1:]
    r = (v - v0) - Z[:, -1] * total
    sw = np.sqrt(w)
    Xw, rw = X * sw[:, None], r * sw
    G = Xw.T @ Xw
    used = bool(np.linalg.matrix_rank(G) < n - 1)
    if used:
        head = np.linalg.solve(G + ridge * np.eye(n - 1), Xw.T @ rw)
    else:
        head = np.linalg.lstsq(Xw, rw, rcond=None)[0]
    return np.append(head, total - head.sum()), used


def encounter_seed(seed: int, encounter_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(encounter_id.encode("utf-8"))])


def explain_kshap(params: ModelParams, x, cfg: KshapConfig = KshapConfig(), encounter_id: str = "",
                  feature_order=None) -> Attribution:
    """Signed N x T attribution; metadata carries phi0, residuals and budgets per timestep."""
    t0 = time.perf_counter()
    x = _check_input(params, x)
    N, T = x.shape
    per_step = cfg.per_timestep(N, T)
    y = forward(params, x)
    hs, cs = state_trajectory(params, x)
    rngs = [np.random.default_rng(s) for s in encounter_seed(cfg.seed, encounter_id).spawn(T)]

    values = np.zeros((N, T))
    phi0 = np.zeros(T)
    residual = np.zeros(T)
    used = np.zeros(T, dtype=int)
    modes, ridged = [], []
    for tau in range(T):
        states = states_at(hs, cs, tau)
        col = x[:, tau]
        active = np.flatnonzero(col != 0)
        n = active.size
        ends = _column_payouts(params, states, col, np.vstack([np.zeros(N), np.ones(N)]))
        v0, v1 = float(ends[0]), float(ends[1])
        phi0[tau] = v0
        if n == 0:
            modes.append("trivial")
            ridged.append(False)
            used[tau] = 2
            residual[tau] = abs(v0 - y[tau])
            continue
        enumerate_all = cfg.mode == "enumerate" or (cfg.mode == "auto" and 2 ** n <= per_step)
        if n == 1:
            Z, w = np.zeros((0, 1)), np.zeros(0)
            mode = "enumerate"
        elif enumerate_all:
            Z, w = _enumerated_rows(n)
            mode = "enumerate"
        else:
            Z, w = _sampled_rows(n, per_step - 2, rngs[tau])
            mode = "sample"
        full = np.zeros((Z.shape[0], N))
        full[:, active] = Z
        v = _column_payouts(params, states, col, full) if len(Z) else np.zeros(0)
        phi, flag = _solve_constrained(Z, w, v, v0, v1, cfg.ridge)
        values[active, tau] = phi
        used[tau] = len(Z) + 2
        modes.append(mode)
        ridged.append(flag)
        residual[tau] = abs(v0 + phi.sum() - y[tau])
    seconds = time.perf_counter() - t0
    meta = {
        "phi0": phi0.tolist(),
        "residuals": residual.tolist(),
        "max_residual": float(residual.max()),
        "budget_per_timestep": per_step,
        "evaluations": used.tolist(),
        "modes": modes,
        "ridge_fallback": ridged,
        "trajectory": y.tolist(),
        "config": asdict(cfg),
    }
    order = feature_order or [f"f{j}" for j in range(N)]
    return Attribution(encounter_id, "kshap", values, list(order), meta,
                       {"seconds": seconds, "n_features": N, "t_hours": T, "converged": True})


def exact_shapley(params: ModelParams, x, tau: int) -> np.ndarray:
    """Permutation-weighted Shapley values of column ``tau`` by brute force.

    Payouts come from complete forward passes over every coalition, independent
    of the prefix-state shortcut used by :func:`explain_kshap`.
    """
    x = _check_input(params, x)
    N, T = x.shape
    if N > MAX_EXACT_PLAYERS:
        raise ConfigurationError(f"exact enumeration limited to {MAX_EXACT_PLAYERS} features, got {N}")
    if not 0 <= tau < T:
        raise ShapeError(f"timestep {tau} outside [0, {T})")
    Z = np.array(list(itertools.product((0.0, 1.0), repeat=N)))  # row index = binary code, MSB first
    X = np.repeat(x[:, :tau + 1].T[:, None, :], len(Z), axis=1)  # (tau+1, B, N)
    X[tau] = Z * x[:, tau][None, :]
    logits, _ = _forward(params, X)
    payout = expit(logits[tau])
    weights = [factorial(s) * factorial(N - s - 1) / factorial(N) for s in range(N)]
    size = Z.sum(axis=1).astype(int)
    phi = np.zeros(N)
    for j in range(N):
        bit = 1 << (N - 1 - j)
        without = np.flatnonzero(Z[:, j] == 0)
        phi[j] = sum(weights[size[k]] * (payout[k | bit] - payout[k]) for k in without)
    return phi


def exact_shapley_game(payout, n: int) -> np.ndarray:
    """Shapley values of an arbitrary n-player game ``payout(frozenset) -> float``."""
    phi = np.zeros(n)
    for j in range(n):
        others = [i for i in range(n) if i != j]
        for s in range(n):
            w = factorial(s) * factorial(n - s - 1) / factorial(n)
            for S in itertools.combinations(others, s):
                phi[j] += w * (payout(frozenset(S) | {j}) - payout(frozenset(S)))
    return phi
