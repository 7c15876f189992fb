import numpy as np
import pytest

from emr_attrib.errors import ConfigurationError, DivergenceError
from emr_attrib.model import ModelConfig, forward, init_model
from emr_attrib.pipeline import DtPatientMatrix
from emr_attrib.train import TrainConfig, _batches, _pad_batch, batch_loss, train, validation_metrics


def toy_set(n, rng, T=(6, 12)):
    out = []
    for i in range(n):
        t = int(rng.integers(*T))
        lab = i % 2 == 0
        x = rng.normal(0, 0.3, size=(3, t))
        x[0, -2:] += 2.0 if lab else -2.0
        out.append(DtPatientMatrix(f"e{i}", x, lab))
    return out


def test_pad_batch_weights(rng):
    data = [DtPatientMatrix("a", np.ones((2, 3)), True), DtPatientMatrix("b", np.ones((2, 5)), False)]
    X, W, labels = _pad_batch(data)
    assert X.shape == (5, 2, 2)
    np.testing.assert_array_equal(X[3:, 0], 0)
    np.testing.assert_allclose(W.sum(axis=0), [0.5, 0.5])
    assert W[3, 0] == 0 and W[4, 1] == pytest.approx(0.1)
    np.testing.assert_array_equal(labels, [1, 0])


def test_padding_does_not_change_loss(rng):
    p = init_model(ModelConfig(3, (4,), seed=1))
    a = DtPatientMatrix("a", rng.normal(size=(3, 4)), True)
    b = DtPatientMatrix("b", rng.normal(size=(3, 9)), False)
    both, _ = batch_loss(p, [a, b])
    la, _ = batch_loss(p, [a])
    lb, _ = batch_loss(p, [b])
    assert both == pytest.approx((la + lb) / 2, abs=1e-14)


def test_batches_cover_dataset_once(rng):
    data = toy_set(37, rng)
    seen = [d.encounter_id for b in _batches(data, 8, np.random.default_rng(0)) for d in b]
    assert sorted(seen) == sorted(d.encounter_id for d in data)


def test_l2_in_training_objective(rng):
    p = init_model(ModelConfig(3, (4,), dropout=0.0, l2=0.1, seed=1))
    batch = toy_set(2, rng)
    loss_eval, _ = batch_loss(p, batch)
    loss_train, grads = batch_loss(p, batch, rng=np.random.default_rng(0), train=True, with_grads=True)
    penalty = 0.1 * sum((a * a).sum() for a, r in zip(p.arrays(), p.regularized()) if r)
    assert loss_train == pytest.approx(loss_eval + penalty)
    # gradient of the biased head parameter carries no penalty
    _, g_eval = batch_loss(p, batch, with_grads=True)
    np.testing.assert_allclose(grads[-1], g_eval[-1])
    assert not np.allclose(grads[0], g_eval[0])


def test_training_learns_and_is_deterministic(rng):
    data = toy_set(60, rng)
    p = init_model(ModelConfig(3, (6, 6), seed=0))
    cfg = TrainConfig(learning_rate=1e-2, batch_size=16, patience=3, max_epochs=15, seed=5)
    best, log = train(p, data[:40], data[40:], cfg)
    assert best.meta["best_val_auc"] >= 0.9
    assert best.meta["best_val_loss"] == min(r["val_loss"] for r in log)
    assert validation_metrics(best, data[40:])[0] == pytest.approx(best.meta["best_val_loss"])
    best2, log2 = train(p, data[:40], data[40:], cfg)
    for a, b in zip(best.arrays(), best2.arrays()):
        np.testing.assert_array_equal(a, b)
    # the input model is not mutated
    np.testing.assert_array_equal(p.layers[0].W, init_model(ModelConfig(3, (6, 6), seed=0)).layers[0].W)


def test_stops_after_second_plateau(rng, monkeypatch):
    import emr_attrib.train as tr
    monkeypatch.setattr(tr, "validation_metrics", lambda params, data: (0.5, 0.5))  # flat validation loss
    data = toy_set(10, rng)
    p = init_model(ModelConfig(3, (2,), seed=0))
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, patience=2, max_lr_reductions=2, max_epochs=50)
    best, log = train(p, data[:6], data[6:], cfg)
    assert best.meta["stop_reason"] == "lr_reductions"
    assert len(log) == 5  # epoch 1 sets the best, two stalls of 2 epochs each
    assert log[-1]["lr"] == pytest.approx(1e-3 / 5)


def test_single_encounter_overfit():
    rng = np.random.default_rng(0)
    d = DtPatientMatrix("solo", rng.normal(size=(3, 8)), True)
    p = init_model(ModelConfig(3, (8,), dropout=0.0, l2=0.0, seed=0))
    cfg = TrainConfig(learning_rate=1e-2, batch_size=1, patience=500, max_epochs=500, prior_bias=False)
    best, _ = train(p, [d], [d], cfg)
    assert batch_loss(best, [d])[0] < 0.01


def test_prior_bias_initialization(rng):
    data = toy_set(8, rng)
    data = [DtPatientMatrix(d.encounter_id, d.values, i == 0) for i, d in enumerate(data)]
    p = init_model(ModelConfig(3, (2,), seed=0))
    best, _ = train(p, data, data, TrainConfig(learning_rate=1e-12, max_epochs=1))
    assert best.b_out[0] == pytest.approx(np.log(1 / 7))


def test_divergence_raises(rng):
    data = toy_set(4, rng)
    data[0].values[0, 0] = np.nan
    p = init_model(ModelConfig(3, (2,), seed=0))
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore"):
        train(p, data, data, TrainConfig(max_epochs=1))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)
    p = init_model(ModelConfig(3, (2,)))
    with pytest.raises(ConfigurationError):
        train(p, [], [DtPatientMatrix("a", np.zeros((3, 2)), True)])
