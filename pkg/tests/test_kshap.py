import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emr_attrib.errors import ConfigurationError, ShapeError
from emr_attrib.kshap import (KshapConfig, _sampled_rows, _solve_constrained, exact_shapley, exact_shapley_game,
                              explain_kshap, masked_forward, shapley_kernel_weight)
from emr_attrib.model import forward, input_gradients

from conftest import scaled_model, sparse_input


@pytest.fixture
def model6():
    return scaled_model(6, (5, 4), seed=4, scale=2.5)


@pytest.mark.parametrize("N, s, expected", [(4, 1, 0.25), (4, 3, 0.25), (2, 1, 0.5)])
def test_kernel_weight_examples(N, s, expected):
    assert shapley_kernel_weight(N, s) == pytest.approx(expected)


@pytest.mark.parametrize("s", [0, 4])
def test_kernel_weight_constraint_rows(s):
    with pytest.raises(ValueError):
        shapley_kernel_weight(4, s)


def test_two_player_game():
    pay = {frozenset(): 0.0, frozenset({0}): 0.6, frozenset({1}): 0.2, frozenset({0, 1}): 1.0}
    np.testing.assert_allclose(exact_shapley_game(pay.__getitem__, 2), [0.7, 0.3])


def test_game_axioms():
    # players 0 and 1 symmetric, player 2 a dummy
    def v(S):
        return float(len(S & {0, 1}) ** 2)
    phi = exact_shapley_game(v, 3)
    assert phi[0] == pytest.approx(phi[1]) and phi[2] == 0


def test_masked_forward_examples(model6, rng):
    x = sparse_input(rng, 6, 9)
    y = forward(model6, x)
    assert masked_forward(model6, x, 4, np.ones(6)) == y[4]
    x0 = x.copy()
    x0[:, 4] = 0
    assert masked_forward(model6, x, 4, np.zeros(6)) == pytest.approx(forward(model6, x0)[4], abs=1e-15)
    for z in rng.integers(0, 2, size=(5, 6)):
        assert masked_forward(model6, x0, 4, z) == pytest.approx(forward(model6, x0)[4], abs=1e-15)
    with pytest.raises(ShapeError):
        masked_forward(model6, x, 9, np.ones(6))
    with pytest.raises(ShapeError):
        masked_forward(model6, x, 0, np.ones(5))


def test_enumeration_matches_oracle(model6, rng):
    x = sparse_input(rng, 6, 10, 0.8)
    a = explain_kshap(model6, x, KshapConfig(mode="enumerate"), "E1")
    for t in range(10):
        np.testing.assert_allclose(a.values[:, t], exact_shapley(model6, x, t), atol=1e-10)
    assert set(a.meta["modes"]) <= {"enumerate", "trivial"}


def test_additivity_and_phi0(model6, rng):
    x = sparse_input(rng, 6, 12)
    x[:, 3] = 0
    for mode in ("auto", "sample"):
        a = explain_kshap(model6, x, KshapConfig(mode=mode, budget=6 * 12))
        y = forward(model6, x)
        total = np.array(a.meta["phi0"]) + a.values.sum(axis=0)
        assert np.abs(total - y).max() < 1e-6
        assert a.meta["max_residual"] < 1e-6
        for t in (0, 5):
            assert a.meta["phi0"][t] == pytest.approx(masked_forward(model6, x, t, np.zeros(6)), abs=1e-15)
    assert a.meta["modes"][3] == "trivial"
    np.testing.assert_array_equal(a.values[:, 3], 0)


def test_zero_entries_are_dummies(model6, rng):
    x = sparse_input(rng, 6, 8, 0.5)
    a = explain_kshap(model6, x, KshapConfig(mode="enumerate"))
    np.testing.assert_array_equal(a.values[x == 0], 0)
    t = int(np.argmax((x == 0).sum(axis=0) * ((x != 0).sum(axis=0) > 0)))
    oracle = exact_shapley(model6, x, t)
    assert np.abs(oracle[x[:, t] == 0]).max() < 1e-12


def test_linear_regime_matches_gradient(model6, rng):
    x = sparse_input(rng, 6, 6, 1.0)
    eps = 1e-5
    small = x.copy()
    small[:, -1] *= eps
    a = explain_kshap(model6, small, KshapConfig(mode="enumerate"))
    lg = np.zeros(6)
    lg[-1] = 1
    g = input_gradients(model6, small, lg)[:, -1]
    np.testing.assert_allclose(a.values[:, -1], small[:, -1] * g, rtol=1e-3, atol=1e-12)


def test_sampling_close_to_exact_and_deterministic(rng):
    p = scaled_model(10, (6, 5), seed=2, scale=2.5)
    x = sparse_input(rng, 10, 6, 1.0)
    cfg = KshapConfig(mode="sample", budget=6 * 300, seed=7)
    a = explain_kshap(p, x, cfg, "E9")
    b = explain_kshap(p, x, cfg, "E9")
    np.testing.assert_array_equal(a.values, b.values)
    assert set(a.meta["modes"]) == {"sample"}
    exact = np.array([exact_shapley(p, x, t) for t in range(6)]).T
    assert np.abs(a.values - exact).max() < 0.05
    c = explain_kshap(p, x, cfg, "E10")
    assert not np.array_equal(a.values, c.values)  # encounter id enters the sampling seed


def test_sampled_rows_are_paired():
    Z, w = _sampled_rows(7, 40, np.random.default_rng(0))
    keys = {tuple(r) for r in Z}
    assert all(tuple(1 - r) in keys for r in Z)
    sizes = Z.sum(axis=1)
    assert sizes.min() >= 1 and sizes.max() <= 6
    assert w.sum() == 40


def test_rank_deficient_falls_back_to_ridge():
    Z = np.array([[1.0, 0, 0, 0], [0, 1.0, 1.0, 1.0]])
    phi, ridged = _solve_constrained(Z, np.ones(2), np.array([0.3, 0.7]), 0.0, 1.0, 1e-8)
    assert ridged and phi.sum() == pytest.approx(1.0) and np.all(np.isfinite(phi))


def test_budget_split_and_floor():
    cfg = KshapConfig()
    assert cfg.total_budget(24, 50) == 2 * 24 * 50 + 2048
    assert cfg.per_timestep(24, 50) == (2 * 24 * 50 + 2048) // 50
    assert KshapConfig(budget=10).per_timestep(24, 50) == 26


def test_config_and_oracle_guards(rng):
    with pytest.raises(ConfigurationError):
        KshapConfig(mode="fast")
    with pytest.raises(ConfigurationError):
        KshapConfig(budget=0)
    p = scaled_model(21, (2,))
    with pytest.raises(ConfigurationError):
        exact_shapley(p, np.zeros((21, 2)), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_additivity_property(seed, n):
    rng = np.random.default_rng(seed)
    p = scaled_model(n, (3,), seed=seed % 5, scale=3.0)
    x = sparse_input(rng, n, 5)
    a = explain_kshap(p, x, KshapConfig(budget=5 * (n + 2)))
    y = forward(p, x)
    assert np.abs(np.array(a.meta["phi0"]) + a.values.sum(axis=0) - y).max() < 1e-6
