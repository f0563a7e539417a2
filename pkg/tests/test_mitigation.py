import logging

import numpy as np
import pytest

from cimlab import crossbar as cb
from cimlab import data, experiments, mitigation, models
from cimlab.config import from_dict
from cimlab.nn import Dense, Model, ReLU, Sign, TrainConfig, train
from cimlab.nn.train import VariationSpec
from cimlab.selftest import RankedTestSet, scenario_seed


@pytest.fixture(scope="module")
def fp_setup():
    X, y = data.blobs(5000, 4, 1.0, seed=2, dim=8)
    X = data.minmax_apply(X, *data.minmax_fit(X))
    model = models.mlp_s(8, 4, hidden=(32, 16), seed=2)
    train(model, (X, y), TrainConfig(epochs=3, batch_size=64))
    prog = cb.map_weights(model, cb.CrossbarConfig(read_noise_sigma=0.02), calib_inputs=X[:256])
    return model, prog, X, y


def test_fault_free_recalibration_is_harmless(fp_setup):
    model, prog, X, y = fp_setup
    calib = mitigation.make_calibration_set(X, 0.01, seed=0)
    recal = mitigation.approx_bn_recalibrate(model, prog, calib, noise_seed=0)
    before = cb.crossbar_accuracy(model, prog, X, y, noise_seed=1)
    after = cb.crossbar_accuracy(recal, prog, X, y, noise_seed=1)
    assert abs(after - before) <= 0.005


def test_recalibration_keeps_weights(fp_setup):
    model, prog, X, _ = fp_setup
    recal = mitigation.approx_bn_recalibrate(model, prog, mitigation.make_calibration_set(X, 0.002))
    a, b = model.state(), recal.state()
    assert all(np.array_equal(a[k], b[k]) for k in a if "running" not in k)
    assert any(not np.array_equal(a[k], b[k]) for k in a if "running" in k)


def test_calibration_set_size(fp_setup):
    *_, X, _ = fp_setup
    calib = mitigation.make_calibration_set(X, 0.002, seed=4)
    assert len(calib.inputs) == 10
    assert calib.fraction == pytest.approx(0.002)
    with pytest.raises(ValueError):
        mitigation.make_calibration_set(X, 0.02)


def test_calibration_set_from_ranking(fp_setup):
    *_, X, _ = fp_setup
    ranking = RankedTestSet(np.arange(20)[::-1], np.linspace(1, 0, 20))
    calib = mitigation.make_calibration_set(X, 0.002, ranking=ranking)
    assert np.array_equal(calib.inputs, X[np.arange(19, 9, -1)])


def test_variance_floor_warning(fp_setup, caplog):
    model, prog, X, _ = fp_setup
    same = mitigation.CalibrationSet(np.repeat(X[:1], 4, axis=0), 0.001)
    with caplog.at_level(logging.WARNING, logger="cimlab.mitigation"):
        recal = mitigation.approx_bn_recalibrate(model, prog, same, noise_seed=None)
    assert "near-zero variance" in caplog.text
    assert all(np.all(layer.stats["running_var"] >= mitigation.VAR_FLOOR * 0.999)
               for layer in recal.layers if "running_var" in layer.stats)


def test_recalibration_needs_batchnorm():
    model = Model([Dense(4, 8), ReLU(), Dense(8, 2)], (4,)).eval()
    prog = cb.map_weights(model, cb.CrossbarConfig())
    with pytest.raises(ValueError):
        mitigation.approx_bn_recalibrate(model, prog, mitigation.CalibrationSet(np.ones((3, 4)), 0.001))


def test_zero_sigma_training_is_bitwise_baseline():
    X, y = data.blobs(600, 3, 1.0, seed=0, dim=4)
    states = []
    for spec in (None, VariationSpec(0.0)):
        model = models.mlp_s(4, 3, hidden=(16,), seed=0)
        train(model, (X, y), TrainConfig(epochs=2, batch_size=50, noise_spec=spec))
        states.append(model.state())
    assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_noise_hook_draws_fresh_each_batch():
    hook = mitigation.variation_aware_loss_hook(TrainConfig(noise_spec=VariationSpec(0.1)), seed=0)
    w = np.ones((5, 5))
    a, b = hook.perturb(w), hook.perturb(w)
    assert not np.array_equal(a, b)
    assert hook.calls == 2 and hook.draws == 50
    with pytest.raises(ValueError):
        mitigation.variation_aware_loss_hook(TrainConfig())


def test_variation_aware_training_helps():
    base = from_dict({"task": "train"})
    gains = []
    for seed in range(10):
        task = experiments.load_task(base, seed)
        acc = {}
        for sigma in (0.0, 0.1):
            cfg = base.with_value("model.noise_sigma", sigma)
            model, _ = experiments.fit(cfg, task, seed)
            prog = experiments.program_for(cfg, model, task)
            varied = cb.apply_variation(prog, 0.1, scenario_seed(seed, 0))
            acc[sigma] = cb.crossbar_accuracy(model, varied, task.Xt, task.yt, noise_seed=seed)
        gains.append(acc[0.1] - acc[0.0])
    assert np.mean(gains) >= 0.02, f"mean gain {np.mean(gains) * 100:.2f} pts over 10 seeds"


def test_best_split_cases():
    assert mitigation.best_split(np.array([3.0, 3.0, 3.0]), np.array([1, 0, 1])) == 3.0
    assert mitigation.best_split(np.array([-2.0, -1.0, 1.0, 2.0]), np.array([0, 0, 1, 1])) == 0.0
    # fully positive column: threshold at the lowest value keeps everything on
    assert mitigation.best_split(np.array([1.0, 2.0]), np.array([1, 1])) == 1.0


@pytest.fixture(scope="module")
def binary_setup():
    X, y = data.blobs(3000, 4, 0.8, seed=5, dim=8)
    X = data.minmax_apply(X, *data.minmax_fit(X))
    model = models.mlp_s(8, 4, hidden=(32, 16), binary=True, seed=5)
    train(model, (X, y), TrainConfig(epochs=5, batch_size=64, learning_rate=1e-2))
    prog = cb.map_weights(model, cb.CrossbarConfig(mode="binarized", tile_rows=16, read_noise_sigma=0.0),
                          calib_inputs=X[:256])
    return model, prog, X, y


def test_single_clean_scenario_is_midpoint(binary_setup):
    model, prog, X, y = binary_setup
    ref = mitigation.generate_reference(prog, model, 1, seed=0, inputs=X[:256], sigma=0.0)
    # first tile of the first layer: currents of the 256 inputs on its 16 rows
    t = prog.tiles[0]
    current = X[:256, t.row0:t.row0 + t.shape[0]].astype(np.float64) @ (t.g_plus - t.g_minus)
    T, pol = mitigation.fold_threshold(model, 0, prog)
    k_tiles = -(-8 // prog.config.tile_rows)
    for j in range(t.shape[1]):
        c, p = current[:, j], pol[j]
        on = p * (c - T[j] / k_tiles) >= 0
        if on.all() or not on.any():
            continue
        lo, hi = (c[~on].max(), c[on].min()) if p > 0 else (c[on].max(), c[~on].min())
        assert ref.theta[0][j] == pytest.approx(0.5 * (lo + hi), rel=1e-9, abs=1e-12)
    acc = cb.crossbar_accuracy(model, ref.attach(prog), X[:1000], y[:1000])
    assert acc >= model.accuracy(X[:1000], y[:1000]) - 0.05


def test_reference_deterministic(binary_setup):
    model, prog, X, _ = binary_setup
    a = mitigation.generate_reference(prog, model, 3, seed=4, inputs=X[:64], sigma=0.1)
    b = mitigation.generate_reference(prog, model, 3, seed=4, inputs=X[:64], sigma=0.1)
    assert a.to_text() == b.to_text()


def test_mirrored_column_threshold_near_zero():
    W = np.array([[1.0, -1.0, 0.5, -0.5]])
    layer = Dense(4, 1)
    layer.params["W"], layer.params["b"] = W, np.zeros(1)
    model = Model([layer, Sign(), Dense(1, 1)], (4,), dtype=np.float64).eval()
    prog = cb.map_weights(model, cb.CrossbarConfig(mode="binarized", levels=256, adc_bits=None))
    x = np.random.default_rng(0).standard_normal((400, 4))
    ref = mitigation.generate_reference(prog, model, 1, seed=0, inputs=x, sigma=0.0)
    scale = np.abs(x @ (prog.tiles[0].g_plus - prog.tiles[0].g_minus)).mean()
    assert abs(ref.theta[0][0]) <= 0.05 * scale


def test_reference_text_round_trip(binary_setup):
    model, prog, X, _ = binary_setup
    ref = mitigation.generate_reference(prog, model, 2, seed=1, inputs=X[:64], sigma=0.1)
    back = mitigation.ReferenceVector.from_text(ref.to_text())
    assert back.scenario_count == 2
    assert sorted(back.theta) == sorted(ref.theta)
    assert all(np.array_equal(back.theta[k], ref.theta[k]) for k in ref.theta)
    assert all(np.array_equal(back.polarity[k], ref.polarity[k]) for k in ref.polarity)


def test_reference_zero_scenarios_rejected(binary_setup):
    model, prog, *_ = binary_setup
    with pytest.raises(ValueError):
        mitigation.generate_reference(prog, model, 0, seed=0)
