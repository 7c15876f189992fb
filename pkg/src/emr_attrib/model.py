"""Stacked many-to-many LSTM with a logistic head, in plain numpy.

Arrays inside this module are time-major: inputs ``(T, B, N)``, outputs
``(T, B)``.  Public helpers that take a single encounter accept the
feature-major ``N x T`` dt-patient-matrix used everywhere else.

Gate layout in the fused weight matrices is ``[input, forget, output,
candidate]`` so the three sigmoid gates can be activated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import expit

from .archive import F32, dump_json, load_json, with_ext
from .errors import ConfigurationError, DivergenceError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    input_size: int
    hidden_sizes: tuple[int, ...] = (16, 32, 16)
    dropout: float = 0.2
    l2: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_size < 1 or not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigurationError("all layer sizes must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.l2 < 0:
            raise ConfigurationError("l2 must be >= 0")


FULL_HIDDEN_SIZES = (128, 256, 128)


@dataclass
class LSTMLayer:
    W: np.ndarray  # (in, 4H) input weights
    U: np.ndarray  # (H, 4H) recurrent weights
    b: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list[LSTMLayer]
    w_out: np.ndarray  # (H_last,)
    b_out: np.ndarray  # (1,)
    meta: dict = field(default_factory=dict)

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in a fixed order (views, not copies)."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        return out + [self.w_out, self.b_out]

    def regularized(self) -> list[bool]:
        """Which entries of :meth:`arrays` carry the L2 penalty (weights, not biases)."""
        return [True, True, False] * len(self.layers) + [True, False]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            [LSTMLayer(l.W.copy(), l.U.copy(), l.b.copy()) for l in self.layers],
            self.w_out.copy(), self.b_out.copy(), dict(self.meta),
        )

    @property
    def input_size(self) -> int:
        return self.layers[0].W.shape[0]


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_model(cfg: ModelConfig) -> ModelParams:
    """Glorot-uniform weights, zero biases, reproducible from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    n_in = cfg.input_size
    for H in cfg.hidden_sizes:
        W = rng.uniform(-1, 1, (n_in, 4 * H)) * glorot_bound(n_in, 4 * H)
        U = rng.uniform(-1, 1, (H, 4 * H)) * glorot_bound(H, 4 * H)
        layers.append(LSTMLayer(W, U, np.zeros(4 * H)))
        n_in = H
    w_out = rng.uniform(-1, 1, n_in) * glorot_bound(n_in, 1)
    return ModelParams(cfg, layers, w_out, np.zeros(1))


# ---------------------------------------------------------------------------
# core recurrences


def _layer_forward(layer: LSTMLayer, X: np.ndarray, h0=None, c0=None):
    T, B, _ = X.shape
    H = layer.hidden
    pre = X @ layer.W + layer.b
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = np.zeros((B, H)) if h0 is None else h0
    c = np.zeros((B, H)) if c0 is None else c0
    U = layer.U
    H3 = 3 * H
    for t in range(T):
        a = pre[t] + h @ U
        g = gates[t]
        g[:, :H3] = expit(a[:, :H3])
        g[:, H3:] = np.tanh(a[:, H3:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, H3:]
        h = g[:, 2 * H:H3] * np.tanh(c)
        cs[t] = c
        hs[t] = h
    return hs, (X, gates, cs, hs, h0, c0)


def _layer_backward(layer: LSTMLayer, cache, dHs: np.ndarray, want_params: bool):
    X, gates, cs, hs, h0, c0 = cache
    T, B, H = hs.shape
    H3 = 3 * H
    dA = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    UT = layer.U.T
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:H3], g[:, H3:]
        tc = np.tanh(cs[t])
        dh = dHs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = cs[t - 1] if t > 0 else (zeros if c0 is None else c0)
        da = dA[t]
        da[:, :H] = dc * cand * i * (1.0 - i)
        da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H:H3] = dh * tc * o * (1.0 - o)
        da[:, H3:] = dc * i * (1.0 - cand * cand)
        dc_next = dc * f
        dh_next = da @ UT
    dX = dA @ layer.W.T
    if not want_params:
        return dX, None
    flatA = dA.reshape(T * B, 4 * H)
    dW = X.reshape(T * B, -1).T @ flatA
    h_prev = np.empty_like(hs)
    h_prev[0] = 0.0 if h0 is None else h0
    h_prev[1:] = hs[:-1]
    dU = h_prev.reshape(T * B, H).T @ flatA
    db = flatA.sum(axis=0)
    return dX, (dW, dU, db)


def _forward(params: ModelParams, X: np.ndarray, dropout_masks=None):
    """Return logits (T, B) and a cache for :func:`_backward`."""
    caches = []
    h = X
    for k, layer in enumerate(params.layers):
        h, cache = _layer_forward(layer, h)
        if dropout_masks is not None:
            h = h * dropout_masks[k]
        caches.append(cache)
    logits = h @ params.w_out + params.b_out[0]
    return logits, (caches, h)


def _backward(params: ModelParams, cache, dlogits: np.ndarray, dropout_masks=None,
              want_params: bool = True):
    """Backpropagate d(loss)/d(logits) (T, B); return (dX, param grads | None)."""
    caches, h_top = cache
    grads = []
    if want_params:
        d_w_out = h_top.reshape(-1, h_top.shape[-1]).T @ dlogits.reshape(-1)
        d_b_out = np.array([dlogits.sum()])
    dH = dlogits[:, :, None] * params.w_out
    for k in range(len(params.layers) - 1, -1, -1):
        if dropout_masks is not None:
            dH = dH * dropout_masks[k]
        dH, g = _layer_backward(params.layers[k], caches[k], dH, want_params)
        if want_params:
            grads = list(g) + grads
    if want_params:
        grads += [d_w_out, d_b_out]
        return dH, grads
    return dH, None


def dropout_masks(params: ModelParams, T: int, B: int, rng: np.random.Generator):
    """Inverted-dropout masks on each layer's output, resampled per step and sequence."""
    p = params.config.dropout
    if p == 0:
        return None
    keep = 1.0 - p
    return [(rng.random((T, B, l.hidden)) < keep) / keep for l in params.layers]


# ---------------------------------------------------------------------------
# public per-encounter API


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != params.input_size:
        raise ShapeError(f"expected {params.input_size} x T input, got {x.shape}")
    return x


def forward(params: ModelParams, x, mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """ROM trajectory y_1..y_T for one N x T dt-matrix."""
    x = _check_input(params, x)
    masks = None
    if mode == "train":
        masks = dropout_masks(params, x.shape[1], 1, rng or np.random.default_rng())
    elif mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    logits, _ = _forward(params, x.T[:, None, :], masks)
    return expit(logits[:, 0])


def forward_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Eval-mode outputs for a (B, N, T) stack of equal-length encounters -> (B, T)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] != params.input_size:
        raise ShapeError(f"expected (B, {params.input_size}, T) input, got {X.shape}")
    logits, _ = _forward(params, np.transpose(X, (2, 0, 1)))
    return expit(logits).T


def input_gradients(params: ModelParams, x, loss_grad) -> np.ndarray:
    """d(sum_t loss_grad[t] * y_t) / dx as an N x T matrix (eval mode)."""
    x = _check_input(params, x)
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (x.shape[1],):
        raise ShapeError("loss_grad must have length T")
    logits, cache = _forward(params, x.T[:, None, :])
    y = expit(logits[:, 0])
    dlogits = (loss_grad * y * (1.0 - y))[:, None]
    dX, _ = _backward(params, cache, dlogits, want_params=False)
    out = dX[:, 0, :].T
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite input gradient")
    return out


def forward_and_input_gradients(params: ModelParams, x, loss_grad_fn):
    """Single pass helper: returns (y, dL/dx) where dL/dy = loss_grad_fn(y)."""
    logits, cache = _forward(params, x.T[:, None, :])
    y = expit(logits[:, 0])
    gy = loss_grad_fn(y)
    dX, _ = _backward(params, cache, (gy * y * (1.0 - y))[:, None], want_params=False)
    return y, dX[:, 0, :].T


# ---------------------------------------------------------------------------
# stepping from a cached prefix (used by KernelSHAP)


def prefix_states(params: ModelParams, x) -> list[tuple[np.ndarray, np.ndarray]]:
    """Final (h, c) of every layer after consuming all columns of ``x``.

    ``x`` may have zero columns, in which case the zero initial state is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] == 0:
        return [(np.zeros((1, l.hidden)), np.zeros((1, l.hidden))) for l in params.layers]
    hs, cs = state_trajectory(params, x)
    return [(h[-1:], c[-1:]) for h, c in zip(hs, cs)]


def state_trajectory(params: ModelParams, x) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-layer hidden and cell states, each (T, H), for one N x T input."""
    h = np.asarray(x, dtype=np.float64).T[:, None, :]
    hs_all, cs_all = [], []
    for layer in params.layers:
        h, cache = _layer_forward(layer, h)
        hs_all.append(h[:, 0])
        cs_all.append(cache[2][:, 0])
    return hs_all, cs_all


def states_at(hs_all, cs_all, t: int):
    """State after consuming columns ``0..t-1`` (zeros for t == 0)."""
    if t == 0:
        return [(np.zeros((1, h.shape[1])), np.zeros((1, h.shape[1]))) for h in hs_all]
    return [(h[t - 1:t], c[t - 1:t]) for h, c in zip(hs_all, cs_all)]


def run_from_state(params: ModelParams, states, X: np.ndarray) -> np.ndarray:
    """Continue a shared prefix state over a (L, B, N) batch; returns y (L, B)."""
    B = X.shape[1]
    h = X
    for layer, (h0, c0) in zip(params.layers, states):
        h, _ = _layer_forward(layer, h, np.repeat(h0, B, axis=0), np.repeat(c0, B, axis=0))
    return expit(h @ params.w_out + params.b_out[0])


def step_batch(params: ModelParams, states, cols: np.ndarray) -> np.ndarray:
    """Outputs y for a batch of next columns (B, N) sharing one prefix state."""
    return run_from_state(params, states, cols[None, :, :])[0]


# ---------------------------------------------------------------------------
# archive


def save_model(params: ModelParams, stem) -> Path:
    """Write ``<stem>.json`` manifest and ``<stem>.bin`` float32 weights."""
    stem = Path(stem)
    arrays = params.arrays()
    blob = b"".join(np.ascontiguousarray(a, dtype=F32).tobytes() for a in arrays)
    payload = with_ext(stem, ".bin")
    payload.write_bytes(blob)
    cfg = asdict(params.config)
    cfg["hidden_sizes"] = list(cfg["hidden_sizes"])
    manifest = {
        "config": cfg,
        "shapes": [list(a.shape) for a in arrays],
        "seed": params.config.seed,
        "payload": payload.name,
        "dtype": "float32-le",
        "training": params.meta,
    }
    path = with_ext(stem, ".json")
    dump_json(path, manifest)
    return path


def load_model(manifest_path) -> ModelParams:
    manifest_path = Path(manifest_path)
    meta = load_json(manifest_path)
    cfg = ModelConfig(**meta["config"])
    raw = np.frombuffer((manifest_path.parent / meta["payload"]).read_bytes(), dtype=F32)
    arrays, pos = [], 0
    for shape in meta["shapes"]:
        n = int(np.prod(shape))
        arrays.append(raw[pos:pos + n].reshape(shape).astype(np.float64))
        pos += n
    if pos != raw.size:
        raise ShapeError(f"{manifest_path}: weight payload size mismatch")
    layers = [LSTMLayer(*arrays[3 * k:3 * k + 3]) for k in range(len(cfg.hidden_sizes))]
    return ModelParams(cfg, layers, arrays[-2], arrays[-1], meta.get("training", {}))


def roundtrip_float32(params: ModelParams) -> ModelParams:
    """The params exactly as a save/load cycle would return them."""
    out = params.copy()
    for a in out.arrays():
        a[...] = a.astype(F32).astype(np.float64)
    return out
