import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emr_attrib.errors import ConfigurationError, ShapeError
from emr_attrib.model import (ModelConfig, forward, forward_batch, glorot_bound, init_model, input_gradients,
                              load_model, roundtrip_float32, run_from_state, save_model, state_trajectory,
                              states_at, step_batch)
from emr_attrib.pipeline import DtPatientMatrix
from emr_attrib.train import batch_loss

from conftest import scaled_model, sparse_input


def test_init_deterministic_and_zero_biases():
    a = init_model(ModelConfig(6, seed=3))
    b = init_model(ModelConfig(6, seed=3))
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert all(np.all(l.b == 0) for l in a.layers) and np.all(a.b_out == 0)
    c = init_model(ModelConfig(6, seed=4))
    assert not np.array_equal(a.layers[0].W, c.layers[0].W)


def test_glorot_bound_and_ranges():
    assert glorot_bound(1, 1) == pytest.approx(np.sqrt(3))
    p = init_model(ModelConfig(6, (16, 32, 16)))
    for l, n_in in zip(p.layers, (6, 16, 32)):
        assert np.abs(l.W).max() <= glorot_bound(n_in, l.W.shape[1])
        assert np.abs(l.U).max() <= glorot_bound(l.hidden, 4 * l.hidden)
    assert [l.hidden for l in p.layers] == [16, 32, 16]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(0)
    with pytest.raises(ConfigurationError):
        ModelConfig(3, dropout=1.0)
    with pytest.raises(ConfigurationError):
        ModelConfig(3, l2=-1)


def test_zero_weights_give_half():
    p = init_model(ModelConfig(4))
    for a in p.arrays():
        a[...] = 0
    np.testing.assert_array_equal(forward(p, np.ones((4, 5))), 0.5)


def test_eval_deterministic_and_train_mode_stochastic(small_model, rng):
    x = rng.normal(size=(5, 12))
    np.testing.assert_array_equal(forward(small_model, x), forward(small_model, x))
    y1 = forward(small_model, x, "train", np.random.default_rng(0))
    y2 = forward(small_model, x, "train", np.random.default_rng(0))
    np.testing.assert_array_equal(y1, y2)
    assert not np.array_equal(y1, forward(small_model, x))


def test_forward_accepts_dt_matrix(small_model, rng):
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(forward(small_model, DtPatientMatrix("e", x)), forward(small_model, x))


def test_shape_mismatch(small_model):
    with pytest.raises(ShapeError):
        forward(small_model, np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        input_gradients(small_model, np.zeros((5, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        forward(small_model, np.zeros((5, 3)), mode="bogus")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_probabilities_and_causality(T, seed):
    p = scaled_model(5, seed=seed % 7, scale=2.0)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, T))
    y = forward(p, x)
    assert y.shape == (T,) and np.all((y > 0) & (y < 1))
    k = int(rng.integers(1, T + 1))
    np.testing.assert_array_equal(forward(p, x[:, :k]), y[:k])
    x2 = x.copy()
    x2[:, k:] += rng.normal(size=(5, T - k))
    np.testing.assert_array_equal(forward(p, x2)[:k], y[:k])


def test_forward_batch_matches_single(small_model, rng):
    X = rng.normal(size=(3, 5, 9))
    Y = forward_batch(small_model, X)
    for b in range(3):
        np.testing.assert_allclose(Y[b], forward(small_model, X[b]), rtol=0, atol=1e-15)


def test_prefix_state_continuation(small_model, rng):
    x = rng.normal(size=(5, 10))
    y = forward(small_model, x)
    hs, cs = state_trajectory(small_model, x)
    for t in (0, 4, 9):
        np.testing.assert_allclose(run_from_state(small_model, states_at(hs, cs, t), x[:, t:].T[:, None, :])[:, 0],
                                   y[t:], atol=1e-15)
        assert step_batch(small_model, states_at(hs, cs, t), x[:, t][None, :])[0] == pytest.approx(y[t], abs=1e-15)


# --- gradients ----------------------------------------------------------------

def test_zero_loss_grad_gives_zero(small_model, rng):
    g = input_gradients(small_model, rng.normal(size=(5, 6)), np.zeros(6))
    np.testing.assert_array_equal(g, 0)


def test_gradient_causality(small_model, rng):
    x = rng.normal(size=(5, 8))
    lg = np.zeros(8)
    lg[3] = 1.0
    g = input_gradients(small_model, x, lg)
    np.testing.assert_array_equal(g[:, 4:], 0)
    assert np.abs(g[:, :4]).max() > 0


def _fd_input(p, x, lg, h=1e-5):
    fd = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (lg @ forward(p, xp) - lg @ forward(p, xm)) / (2 * h)
    return fd


@pytest.mark.parametrize("seed", range(5))
def test_input_gradients_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = scaled_model(4, (6, 8, 6), seed=seed, scale=1.5)
    x = rng.normal(size=(4, 7))
    lg = rng.normal(size=7)
    g = input_gradients(p, x, lg)
    fd = _fd_input(p, x, lg)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-6


def test_parameter_gradients_finite_differences(rng):
    p = scaled_model(3, (4, 5), seed=2, scale=1.5)
    batch = [DtPatientMatrix("a", rng.normal(size=(3, 6)), True),
             DtPatientMatrix("b", rng.normal(size=(3, 4)), False)]
    loss, grads = batch_loss(p, batch, train=False, with_grads=True)
    h = 1e-6
    for a, g in zip(p.arrays(), grads):
        for _ in range(4):
            idx = tuple(rng.integers(s) for s in a.shape)
            old = a[idx]
            a[idx] = old + h
            lp, _ = batch_loss(p, batch)
            a[idx] = old - h
            lm, _ = batch_loss(p, batch)
            a[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(g[idx] - fd) <= 1e-6 * max(1.0, abs(fd))


# --- archive ------------------------------------------------------------------

def test_save_load_float32(tmp_path, small_model, rng):
    small_model.meta = {"epochs": 3}
    path = save_model(small_model, tmp_path / "model")
    assert path.name == "model.json" and (tmp_path / "model.bin").exists()
    back = load_model(path)
    ref = roundtrip_float32(small_model)
    for a, b in zip(back.arrays(), ref.arrays()):
        np.testing.assert_array_equal(a, b)
    assert back.meta == {"epochs": 3}
    assert back.config == small_model.config
    n_weights = sum(a.size for a in small_model.arrays())
    assert (tmp_path / "model.bin").stat().st_size == 4 * n_weights
    x = rng.normal(size=(5, 6))
    np.testing.assert_allclose(forward(back, x), forward(small_model, x), atol=1e-5)
