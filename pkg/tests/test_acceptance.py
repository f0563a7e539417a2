"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines appear in the
"acceptance criteria" section at the end of the run. Seeds and sizes are
fixed so every number here is reproducible.
"""

import json
import time

import numpy as np
import pytest
from scipy.stats import binomtest

from cimlab import bayesian, crossbar, experiments, models
from cimlab.cli import execute
from cimlab.config import from_dict
from cimlab.nn import TrainConfig, train
from cimlab.nn.train import CrossEntropyObjective, variational_layers
from helpers import gradcheck, random_net

pytestmark = pytest.mark.acceptance


def _runs(cfg, seeds):
    return [experiments.run(cfg, s).metrics for s in seeds]


def test_gradient_oracle(acceptance_line):
    start = time.perf_counter()
    errors = []
    for i in range(20):
        model, x, target, loss = random_net(np.random.default_rng(1000 + i), conv=i % 4 == 3)
        errors.append(gradcheck(model, x, target, loss))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 30
    acceptance_line(1, "gradient oracle", ok, f"max rel err {max(errors):.2e} over 20 nets (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert ok


def test_crossbar_fidelity(acceptance_line):
    cfg = from_dict({"task": "train", "dataset": {"n_test": 1000}})
    task = experiments.load_task(cfg, 0)
    model, _ = experiments.fit(cfg, task, 0)
    prog = experiments.program_for(cfg, model, task, levels=256, adc_bits=12, read_noise_sigma=0.0)
    digital = model.predict(task.Xt)
    analog = crossbar.crossbar_predict(model, prog, task.Xt)
    agreement = float((digital == analog).mean())
    acceptance_line(2, "crossbar fidelity", agreement >= 0.99,
                    f"top-1 agreement {agreement:.4f} on {len(task.Xt)} inputs (>= 0.99)")
    assert agreement >= 0.99


def test_ood_detection(acceptance_line):
    start = time.perf_counter()
    cfg = from_dict({"task": "ood-eval", "model": {"variant": "scale"}})
    res = _runs(cfg, range(10))
    elapsed = time.perf_counter() - start
    det = float(np.mean([r["detection_rate_at_5pct_fpr"] for r in res]))
    auc = float(np.mean([r["auroc"] for r in res]))
    ok = det >= 0.90 and auc >= 0.95 and elapsed < 300
    acceptance_line(3, "OOD detection", ok,
                    f"10-seed mean detection@5%FPR {det:.4f} (>= 0.90), AUROC {auc:.4f} (>= 0.95), {elapsed:.1f}s")
    assert ok


@pytest.mark.parametrize("depth", [2, 8, 20])
def test_single_source(acceptance_line, depth):
    model = models.mlp_s(8, 3, hidden=(12,) * depth, variant="scale", seed=depth)
    x = np.random.default_rng(depth).standard_normal((5, 8))
    trace = []
    bayesian.mc_forward(model, x, 4, seed=0, trace=trace)
    sources = {len(ctx.sources) for ctx in trace}
    draws = {ctx.total_draws for ctx in trace}
    ok = sources == {1} and draws == {depth}
    acceptance_line(4, f"single RNG source (depth {depth})", ok,
                    f"sources per pass {sorted(sources)} (== 1), draws per pass {sorted(draws)} (== {depth})")
    assert ok


def test_vi_sanity(acceptance_line):
    cfg = from_dict({"task": "mc-eval", "model": {"variant": "vi"}})
    task = experiments.load_task(cfg, 0)

    model = experiments.build_model(cfg, task, 0)
    kls = []
    base = CrossEntropyObjective(task.n_classes)

    def recording(out, y):
        kls.append(sum(layer.kl() for layer in variational_layers(model)))
        return base(out, y)

    train(model, (task.X, task.y), experiments.train_config(cfg), objective=recording)
    kl_ok = min(kls) >= 0

    layer = bayesian.ScaleVI(16, prior_sigma=0.25)
    layer.params["mu"][:] = 1.0
    layer.params["rho"][:] = bayesian.softplus_inv(0.25)
    kl_prior = abs(layer.kl())

    res = _runs(cfg, range(5))
    gap = float(np.mean([r["baseline_accuracy"] - r["accuracy"] for r in res]))
    ok = kl_ok and kl_prior <= 1e-9 and abs(gap) <= 0.01
    acceptance_line(5, "VI sanity", ok,
                    f"min KL over {len(kls)} batches {min(kls):.3g} (>= 0), KL(q=prior) {kl_prior:.1e} (<= 1e-9), "
                    f"5-seed accuracy gap {gap * 100:+.2f} pts (within 1)")
    assert ok


def test_oneshot(acceptance_line):
    start = time.perf_counter()
    cfg = from_dict({"task": "oneshot", "faults": {"rates": [0.01, 0.02, 0.05, 0.1], "scenarios": 100}})
    m = experiments.run(cfg, 0).metrics
    elapsed = time.perf_counter() - start
    rates = [m[f"detection_rate@{r:g}"] for r in (0.01, 0.02, 0.05, 0.1)]
    passes = 200 - int(m["fault_free_failures"])
    monotone = all(a <= b for a, b in zip(rates, rates[1:]))
    ok = passes >= 198 and rates[2] >= 0.95 and monotone and elapsed < 600
    acceptance_line(6, "one-shot test", ok,
                    f"{passes}/200 fault-free passes (>= 198), detection at 1/2/5/10% "
                    f"{'/'.join(f'{r:.2f}' for r in rates)} (5% >= 0.95, monotone), {elapsed:.1f}s")
    assert ok


def test_ranking_beats_random(acceptance_line):
    cfg = from_dict({"task": "rank", "faults": {"stuck_on_rate": 0.002, "scenarios": 50}})
    res = _runs(cfg, range(20))
    diffs = np.array([r["coverage_ranked"] - r["coverage_random"] for r in res])
    wins, losses = int((diffs > 0).sum()), int((diffs < 0).sum())
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    ok = diffs.mean() > 0 and p < 0.05
    acceptance_line(7, "ranking beats random", ok,
                    f"k={int(res[0]['k'])}, mean gain {diffs.mean():+.3f}, {wins} wins / {losses} losses, sign test p={p:.2e} (< 0.05)")
    assert ok


def test_fingerprint(acceptance_line):
    cfg = from_dict({"task": "fingerprint", "faults": {"stuck_on_rate": 0.05, "scenarios": 20}})
    res = _runs(cfg, range(3))
    fp = sum(r["false_positives"] for r in res)
    det = min(r["per_input_detection"] for r in res)
    gap = max(abs(r["accuracy_gap"]) for r in res)
    ok = fp == 0 and det >= 0.90 and gap <= 0.01
    acceptance_line(8, "fingerprint self-test", ok,
                    f"false positives {int(fp)} (== 0), worst per-input detection {det:.3f} (>= 0.90), "
                    f"worst accuracy gap {gap * 100:.2f} pts (<= 1), 3 seeds")
    assert ok


def test_approx_bn_recovery(acceptance_line):
    cfg = from_dict({"task": "recalibrate", "mitigation": {"method": "approx_bn", "sigma": 0.6}})
    res = _runs(cfg, range(10))
    lost = float(np.mean([r["fault_free_accuracy"] - r["varied_accuracy"] for r in res]))
    recovered = float(np.mean([r["recovered_fraction"] for r in res]))
    ok = lost >= 0.20 and recovered >= 0.5
    acceptance_line(9, "ApproxBN recovery", ok,
                    f"variation costs {lost * 100:.1f} pts (>= 20), recovered {recovered * 100:.1f}% (>= 50%), "
                    f"{int(res[0]['calibration_inputs'])} calibration inputs, 10 seeds")
    assert ok


def test_reference_generation(acceptance_line):
    cfg = from_dict({"task": "recalibrate", "mitigation": {"method": "reference", "sigma": 0.1},
                     "crossbar": {"tile_rows": 32}})
    res = _runs(cfg, range(10))
    gen = float(np.mean([r["generated_reference_accuracy"] for r in res]))
    zero = float(np.mean([r["zero_reference_accuracy"] for r in res]))
    acceptance_line(10, "reference generation", gen > zero,
                    f"10-seed accuracy with generated references {gen:.4f} vs zero references {zero:.4f}")
    assert gen > zero


@pytest.mark.parametrize("task", ["inject", "oneshot", "rank"])
def test_determinism(acceptance_line, tmp_path, task):
    cfg = from_dict({"task": task, "seeds": [0, 1, 2], "faults": {"scenarios": 10}})
    outputs = []
    for run_id, threads in enumerate((1, 3, 2)):
        out = tmp_path / f"run{run_id}"
        execute(cfg, out, threads)
        summary = json.loads((out / "summary.json").read_text())
        summary.pop("wall_time")
        files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
                 if p.is_file() and p.name != "summary.json"}
        outputs.append((json.dumps(summary, sort_keys=True), files))
    ok = all(o == outputs[0] for o in outputs[1:])
    acceptance_line(11, f"determinism ({task})", ok,
                    f"3 runs at LAB_THREADS 1/3/2 give identical summaries and {len(outputs[0][1])} identical files")
    assert ok
