import numpy as np
import pytest
from scipy.special import expit

from emr_attrib.errors import ConfigurationError
from emr_attrib.lbm import (STRONG_BINARY_PRESET, LbmConfig, SoftMask, _soft_objective, binarize_mask, explain_lbm,
                            optimize_soft_mask)
from emr_attrib.model import forward

from conftest import scaled_model, sparse_input


def risky_model():
    """Zero input -> low risk; large positive changes in feature 0 -> high risk."""
    p = scaled_model(5, (6,), seed=11, scale=2.0)
    p.layers[0].W[0] = np.abs(p.layers[0].W[0]) * 3
    p.w_out[:] = np.abs(p.w_out) * 3
    p.b_out[0] = -6.0
    return p


@pytest.fixture
def risky():
    return risky_model()


def risky_input(rng, T=12):
    x = sparse_input(rng, 5, T, 0.5) * 0.3
    x[0, T // 2] = 2.5
    return x


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LbmConfig(s_min=1.5)
    with pytest.raises(ConfigurationError):
        LbmConfig(learning_rate=0)
    assert STRONG_BINARY_PRESET.lambda2_soft == 0.5 and LbmConfig().lambda2_soft == 0.0005


def test_all_zero_input(risky):
    x = np.zeros((5, 8))
    soft = optimize_soft_mask(risky, x)
    np.testing.assert_array_equal(soft.mask, 1.0)
    assert soft.iterations == 0
    a = explain_lbm(risky, x)
    assert a.meta["converged"] and not a.values.any()


def test_initial_mask_value(risky, rng):
    x = risky_input(rng)
    cfg = LbmConfig(max_iterations=1)
    soft = optimize_soft_mask(risky, x, cfg)
    assert soft.mask[x != 0] == pytest.approx(expit(5.0))
    assert expit(5.0) == pytest.approx(0.9933, abs=1e-4)


def test_soft_gradient_finite_differences(risky, rng):
    x = risky_input(rng, 6)
    trainable = x != 0
    z = rng.normal(0.3, 0.5, size=x.shape)
    cfg = LbmConfig()
    _, g = _soft_objective(risky, x, z, trainable, cfg)
    h = 1e-6
    for idx in zip(*np.nonzero(trainable)):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        # the BCE target m > 0.5 is piecewise constant; stay away from its switch point
        if abs(z[idx]) < 10 * h:
            continue
        fd = (_soft_objective(risky, x, zp, trainable, cfg)[0] - _soft_objective(risky, x, zm, trainable, cfg)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)
    assert np.all(g[~trainable] == 0)


def test_soft_mask_returns_best_iterate(risky, rng):
    x = risky_input(rng)
    soft = optimize_soft_mask(risky, x)
    assert soft.iterations == len(soft.loss_trace) and soft.iterations > 1
    best = _soft_objective(risky, x, soft.logits, soft.trainable, LbmConfig())[0]
    assert best == pytest.approx(min(soft.loss_trace))
    assert best < soft.loss_trace[0]
    assert np.all(soft.mask[~soft.trainable] == 1)


def test_binarize_indicator_on_bimodal_soft_mask(risky, rng):
    x = risky_input(rng)
    trainable = x != 0
    m = np.where(trainable, np.where(rng.random(x.shape) < 0.5, 0.01, 0.99), 1.0)
    soft = SoftMask(np.zeros_like(x), m, trainable, [], 0)
    b = binarize_mask(risky, x, soft)
    assert set(np.unique(b.M)) <= {0.0, 1.0}
    for t in range(x.shape[1]):
        col = trainable[:, t]
        np.testing.assert_array_equal(b.M[col, t], m[col, t] > b.eta[t])
    np.testing.assert_array_equal(b.M[~trainable], 1.0)


def test_already_low_trajectory(risky, rng):
    x = sparse_input(rng, 5, 10) * 0.01
    assert forward(risky, x).max() < 0.05
    a = explain_lbm(risky, x)
    assert a.meta["converged"] and a.meta["threshold_sweeps"] == 0
    np.testing.assert_array_equal(a.values, 0)


def test_explain_postconditions(risky, rng):
    for _ in range(5):
        x = risky_input(rng)
        assert forward(risky, x).max() >= 0.05
        a = explain_lbm(risky, x, encounter_id="E1")
        assert set(np.unique(a.values)) <= {0.0, 1.0}
        assert np.all(a.values[x == 0] == 0)
        assert a.values.mean() <= (x != 0).mean()
        masked = forward(risky, x * (1 - a.values))
        np.testing.assert_allclose(masked, a.meta["masked_trajectory"], atol=1e-15)
        if a.meta["converged"]:
            assert masked.max() < 0.05
        assert a.timing["seconds"] >= 0 and a.timing["n_features"] == 5
    assert a.meta["converged"]  # the planted spike is easy to explain


def test_masking_everything_reproduces_zero_input(risky, rng):
    x = risky_input(rng)
    M = np.where(x != 0, 0.0, 1.0)
    np.testing.assert_array_equal(forward(risky, x * M), forward(risky, np.zeros_like(x)))


def test_threshold_search_never_worsens_objective(risky, rng):
    x = risky_input(rng)
    cfg = LbmConfig()
    soft = optimize_soft_mask(risky, x, cfg)
    start = (soft.mask > 0.5) | ~soft.trainable
    obj0 = forward(risky, x * start).mean() + cfg.lambda1_thresh * (1 - start).sum()
    b = binarize_mask(risky, x, soft, cfg)
    obj = b.masked_trajectory.mean() + cfg.lambda1_thresh * (1 - b.M).sum()
    assert obj <= obj0 + 1e-15


def test_deterministic(risky, rng):
    x = risky_input(rng)
    a, b = explain_lbm(risky, x), explain_lbm(risky, x)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.meta == b.meta
