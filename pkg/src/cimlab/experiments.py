"""End-to-end pipelines behind the CLI verbs.

Every pipeline is self-contained: it builds the dataset, trains the model,
maps it to a crossbar and runs its task, all from ``(config, seed)``. The
result is a flat dict of float metrics plus named text artifacts, so equal
inputs always give equal outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import bayesian, crossbar, data, mitigation, models, selftest, uncertainty
from .config import ConfigError, ExperimentConfig
from .nn import Model, TrainConfig, TrainLog, VariationSpec, train
from .nn.train import variational_layers


@dataclass
class Task:
    """Train/test split plus an out-of-distribution set (None when undefined)."""

    X: np.ndarray
    y: np.ndarray
    Xt: np.ndarray
    yt: np.ndarray
    Xood: Optional[np.ndarray]
    n_classes: int

    @property
    def input_shape(self):
        return self.X.shape[1:]


@dataclass
class RunResult:
    metrics: Dict[str, float]
    artifacts: Dict[str, str] = field(default_factory=dict)


def blob_hash(payload: bytes) -> str:
    """git-style content hash (sha1 over ``blob <len>\\0`` + payload)."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def input_hash(cfg: ExperimentConfig) -> str:
    """Hash of the run's inputs: the IDX files if any, else the dataset recipe.

    A missing file hashes as its path, so a failed run still gets a summary.
    """
    ds = cfg.dataset
    if ds.kind == "idx":
        h = hashlib.sha1()
        for p in (ds.train_images, ds.train_labels, ds.test_images, ds.test_labels):
            if p:
                path = Path(p)
                h.update(blob_hash(path.read_bytes()).encode() if path.is_file() else f"missing:{p}".encode())
        return h.hexdigest()
    recipe = repr(sorted((k, v) for k, v in vars(ds).items() if not k.endswith(("_images", "_labels"))))
    return blob_hash(recipe.encode())


def load_task(cfg: ExperimentConfig, seed: int) -> Task:
    ds = cfg.dataset
    s = seed if ds.seed is None else ds.seed
    if ds.kind == "blobs":
        X, y = data.blobs(ds.n, ds.classes, ds.spread, seed=s, dim=ds.dim)
        Xt, yt = data.blobs(ds.n_test, ds.classes, ds.spread, seed=s, dim=ds.dim, sample_seed=s + 1000)
        Xood, _ = data.shifted_blobs(ds.n_test, ds.classes, ds.spread, seed=s, dim=ds.dim, sample_seed=s + 2000)
        n_classes = ds.classes
    elif ds.kind == "moons":
        X, y = data.moons(ds.n, ds.noise, s)
        Xt, yt = data.moons(ds.n_test, ds.noise, s + 1000)
        Xood, n_classes = None, 2
    else:
        X, y = data.load_idx(ds.train_images, ds.train_labels)
        if ds.test_images:
            Xt, yt = data.load_idx(ds.test_images, ds.test_labels)
        else:
            X, Xt, y, yt = X[ds.n_test:], X[:ds.n_test], y[ds.n_test:], y[:ds.n_test]
        Xood = data.rotate90(Xt)
        n_classes = int(max(y.max(), yt.max())) + 1
        return Task(X, y, Xt, yt, Xood, n_classes)
    if ds.normalize:
        lo, span = data.minmax_fit(X)
        X, Xt = data.minmax_apply(X, lo, span), data.minmax_apply(Xt, lo, span)
        Xood = None if Xood is None else data.minmax_apply(Xood, lo, span)
    return Task(X, y, Xt, yt, Xood, n_classes)


def build_model(cfg: ExperimentConfig, task: Task, seed: int, variant: Optional[str] = None,
                binary: Optional[bool] = None) -> Model:
    mc = cfg.model
    variant = mc.variant if variant is None else variant
    binary = mc.binary if binary is None else binary
    shape = task.input_shape
    if mc.name.upper().replace("_", "-") == "MLP-S":
        shape = (int(np.prod(shape)),)
    return models.build(mc.name, shape, task.n_classes, seed=seed, binary=binary, variant=variant, p=mc.p)


def _inputs_for(model: Model, x: np.ndarray) -> np.ndarray:
    return x.reshape((len(x),) + tuple(model.input_shape))


def train_config(cfg: ExperimentConfig, epochs: Optional[int] = None) -> TrainConfig:
    mc = cfg.model
    return TrainConfig(epochs=mc.epochs if epochs is None else epochs, batch_size=mc.batch_size,
                       learning_rate=mc.learning_rate, binary_weights=mc.binary,
                       noise_spec=VariationSpec(mc.noise_sigma) if mc.noise_sigma > 0 else None)


def fit(cfg: ExperimentConfig, task: Task, seed: int, **kw) -> Tuple[Model, TrainLog]:
    model = build_model(cfg, task, seed, **kw)
    log = train(model, (_inputs_for(model, task.X), task.y), train_config(cfg))
    return model, log


def program_for(cfg: ExperimentConfig, model: Model, task: Task, **changes) -> crossbar.CrossbarProgram:
    xcfg = replace(cfg.crossbar, **changes)
    return crossbar.map_weights(model, xcfg, calib_inputs=_inputs_for(model, task.X[:256]))


# --------------------------------------------------------------------------- pipelines


def run_train(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    model, log = fit(cfg, task, seed)
    xt = _inputs_for(model, task.Xt)
    prog = program_for(cfg, model, task)
    metrics = {
        "final_loss": log.loss[-1] if log.loss else float("nan"),
        "test_accuracy": model.accuracy(xt, task.yt),
        "crossbar_accuracy": crossbar.crossbar_accuracy(model, prog, xt, task.yt, noise_seed=seed),
    }
    curve = "epoch,loss,accuracy\n" + "".join(f"{i},{l!r},{a!r}\n" for i, (l, a) in enumerate(zip(log.loss, log.accuracy)))
    return RunResult(metrics, {"train_log.csv": curve})


def run_inject(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    model, _ = fit(cfg, task, seed)
    xt = _inputs_for(model, task.Xt)
    prog = program_for(cfg, model, task)
    faulty, fmap = crossbar.inject_faults(prog, cfg.faults.stuck_on_rate, cfg.faults.stuck_off_rate,
                                          selftest.scenario_seed(seed, 0))
    if cfg.crossbar.variation_sigma > 0:
        faulty = crossbar.apply_variation(faulty, cfg.crossbar.variation_sigma, selftest.scenario_seed(seed, 1))
    metrics = {
        "fault_free_accuracy": crossbar.crossbar_accuracy(model, prog, xt, task.yt, noise_seed=seed),
        "faulty_accuracy": crossbar.crossbar_accuracy(model, faulty, xt, task.yt, noise_seed=seed),
        "faults": float(len(fmap)),
    }
    return RunResult(metrics, {"faultmap.txt": fmap.to_text()})


def run_mc_eval(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    variant = cfg.model.variant if cfg.model.variant not in (None, "none") else "scale"
    model, _ = fit(cfg, task, seed, variant=variant)
    baseline, _ = fit(cfg, task, seed, variant="none")
    xt = _inputs_for(model, task.Xt)
    trace: list = []
    r = bayesian.mc_forward(model, xt, cfg.bayes.samples, seed, trace=trace)
    pred = r.mean_probs.argmax(axis=1)
    metrics = {
        "accuracy": float((pred == task.yt).mean()),
        "baseline_accuracy": baseline.accuracy(_inputs_for(baseline, task.Xt), task.yt),
        "ece": uncertainty.ece(r.mean_probs, task.yt),
        "mean_entropy": float(uncertainty.predictive_entropy(r).mean()),
        "rng_sources": float(len(trace[0].sources)),
        "rng_draws_per_pass": float(trace[0].total_draws),
    }
    if r.T >= 2:
        metrics["mean_mutual_information"] = float(uncertainty.mutual_information(r).mean())
    layers = list(variational_layers(model))
    if layers:
        metrics["kl"] = float(sum(layer.kl() for layer in layers))
    return RunResult(metrics)


def run_ood_eval(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    if task.Xood is None:
        raise ConfigError(f"no out-of-distribution set is defined for dataset kind {cfg.dataset.kind!r}")
    variant = cfg.model.variant if cfg.model.variant not in (None, "none") else "scale"
    model, _ = fit(cfg, task, seed, variant=variant)
    T = cfg.bayes.samples
    r_in = bayesian.mc_forward(model, _inputs_for(model, task.Xt), T, seed)
    r_out = bayesian.mc_forward(model, _inputs_for(model, task.Xood), T, seed + 1)
    score = uncertainty.predictive_entropy if cfg.bayes.score == "entropy" else uncertainty.mutual_information
    res = uncertainty.ood_eval(uncertainty.ScoredSet(score(r_in), uncertainty.IN_DISTRIBUTION, task.yt),
                               uncertainty.ScoredSet(score(r_out), uncertainty.OOD))
    res["accuracy"] = float((r_in.mean_probs.argmax(axis=1) == task.yt).mean())
    return RunResult(res)


def run_oneshot(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    model, _ = fit(cfg, task, seed, variant="none")
    prog = program_for(cfg, model, task)
    st = cfg.selftest
    vec = selftest.generate_oneshot(model, steps=st.steps, lr=st.lr, seed=seed, program=prog, replays=st.replays)
    false_fail = sum(not selftest.oneshot_test(model, prog, vec, noise_seed=selftest.scenario_seed(seed, 20_000 + i))["passed"]
                     for i in range(st.false_positive_replays))
    metrics = {
        "stat_fault_free": vec.stat_fault_free,
        "threshold": vec.threshold,
        "fault_free_failures": float(false_fail),
    }
    for rate in cfg.faults.rates:
        gen = selftest.FaultScenarios(prog, stuck_on_rate=rate)
        rep = selftest.fault_coverage(model, gen, vec, cfg.faults.scenarios, seed)
        metrics[f"detection_rate@{rate:g}"] = rep.coverage
    return RunResult(metrics, {"oneshot.txt": vec.to_text()})


def run_rank(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    model, log = fit(cfg, task, seed, variant="none")
    prog = program_for(cfg, model, task)
    k = max(1, int(round(cfg.selftest.k_fraction * len(task.X))))
    ranked = selftest.rank_tests(log, k)
    rand = selftest.random_tests(len(task.X), k, seed)
    gen = selftest.FaultScenarios(prog, cfg.faults.stuck_on_rate, cfg.faults.stuck_off_rate)
    x = _inputs_for(model, task.X)
    cov_ranked = selftest.fault_coverage(model, gen, x[ranked.indices], cfg.faults.scenarios, seed).coverage
    cov_random = selftest.fault_coverage(model, gen, x[rand], cfg.faults.scenarios, seed).coverage
    ranked_txt = "index,score\n" + "".join(f"{i},{s!r}\n" for i, s in zip(ranked.indices, ranked.scores))
    return RunResult({"k": float(k), "coverage_ranked": cov_ranked, "coverage_random": cov_random,
                      "coverage_gain": cov_ranked - cov_random}, {"ranked_tests.csv": ranked_txt})


def run_fingerprint(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    st = cfg.selftest
    tcfg = train_config(cfg, epochs=st.fingerprint_epochs)
    base = build_model(cfg, task, seed, variant="none")
    baseline = base.copy()
    train(baseline, (_inputs_for(base, task.X), task.y), tcfg)
    xt = _inputs_for(base, task.Xt)
    fp_model, fp = selftest.train_with_fingerprint(
        base, selftest.FingerprintSpec(seed=seed), (_inputs_for(base, task.X), task.y), tcfg,
        val=(xt, task.yt), baseline_accuracy=baseline.accuracy(xt, task.yt))
    prog = program_for(cfg, fp_model, task)
    clean = crossbar.faulty_forward(fp_model, prog, xt, noise_seed=seed)
    false_pos = int((~selftest.check_fingerprint(fp.aux(clean), fp)).sum())
    probe = xt[:st.fingerprint_inputs]
    detected = []
    for i in range(cfg.faults.scenarios):
        s = selftest.scenario_seed(seed, i)
        faulty, _ = crossbar.inject_faults(prog, cfg.faults.stuck_on_rate, cfg.faults.stuck_off_rate, s)
        out = crossbar.faulty_forward(fp_model, faulty, probe, noise_seed=s)
        detected.append(~selftest.check_fingerprint(fp.aux(out), fp))
    metrics = {
        "task_accuracy": fp.task_accuracy,
        "baseline_accuracy": fp.baseline_accuracy,
        "accuracy_gap": fp.baseline_accuracy - fp.task_accuracy,
        "tol": fp.tol,
        "false_positives": float(false_pos),
        "per_input_detection": float(np.mean(detected)),
    }
    return RunResult(metrics, {"fingerprint.txt": fp.to_text()})


def run_recalibrate(cfg: ExperimentConfig, seed: int) -> RunResult:
    task = load_task(cfg, seed)
    mt = cfg.mitigation
    if mt.method == "reference":
        return _run_reference(cfg, task, seed)
    model, _ = fit(cfg, task, seed)
    xt = _inputs_for(model, task.Xt)
    prog = program_for(cfg, model, task)
    varied = crossbar.apply_variation(prog, mt.sigma, selftest.scenario_seed(seed, 0))
    calib = mitigation.make_calibration_set(_inputs_for(model, task.X), mt.calibration_fraction, seed)
    recal = mitigation.approx_bn_recalibrate(model, varied, calib, noise_seed=seed)
    a0 = crossbar.crossbar_accuracy(model, prog, xt, task.yt, noise_seed=seed)
    a1 = crossbar.crossbar_accuracy(model, varied, xt, task.yt, noise_seed=seed)
    a2 = crossbar.crossbar_accuracy(recal, varied, xt, task.yt, noise_seed=seed)
    lost = a0 - a1
    return RunResult({
        "fault_free_accuracy": a0,
        "varied_accuracy": a1,
        "recalibrated_accuracy": a2,
        "calibration_inputs": float(len(calib.inputs)),
        "recovered_fraction": (a2 - a1) / lost if lost > 0 else float("nan"),
    })


def _run_reference(cfg: ExperimentConfig, task: Task, seed: int) -> RunResult:
    mt = cfg.mitigation
    model, _ = fit(cfg, task, seed, binary=True)
    xt = _inputs_for(model, task.Xt)
    prog = program_for(cfg, model, task, mode="binarized")
    ref = mitigation.generate_reference(prog, model, mt.reference_scenarios, seed,
                                        inputs=_inputs_for(model, task.X[:256]), sigma=mt.sigma)
    varied = crossbar.apply_variation(prog, mt.sigma, selftest.scenario_seed(seed, 1))
    a_ref = crossbar.crossbar_accuracy(model, ref.attach(varied), xt, task.yt, noise_seed=seed)
    a_zero = crossbar.crossbar_accuracy(model, ref.zeros().attach(varied), xt, task.yt, noise_seed=seed)
    return RunResult({
        "digital_accuracy": model.accuracy(xt, task.yt),
        "generated_reference_accuracy": a_ref,
        "zero_reference_accuracy": a_zero,
        "improvement": a_ref - a_zero,
    }, {"reference.txt": ref.to_text()})


PIPELINES: Dict[str, Callable[[ExperimentConfig, int], RunResult]] = {
    "train": run_train,
    "inject": run_inject,
    "mc-eval": run_mc_eval,
    "ood-eval": run_ood_eval,
    "oneshot": run_oneshot,
    "rank": run_rank,
    "fingerprint": run_fingerprint,
    "recalibrate": run_recalibrate,
}


def run(cfg: ExperimentConfig, seed: int) -> RunResult:
    return PIPELINES[cfg.task](cfg, seed)
