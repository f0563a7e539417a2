"""Functional self-test of crossbar-mapped networks.

Three test styles share one coverage harness:

* one-shot: a single optimized input whose hidden pre-activations look like
  a unit Gaussian on healthy hardware; a fault shows up as a moment shift;
* ranked test sets: the training inputs with the largest accumulated
  logit-gradient scores, compared top-1 against the fault-free response;
* fingerprints: extra output units trained to emit a fixed +/-1 code, checked
  on every ordinary inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .crossbar import (CrossbarProgram, FaultMap, apply_variation, crossbar_predict, faulty_forward,
                       inject_faults)
from .nn import WEIGHT_LAYERS, BatchNorm, Dense, Model, TrainConfig, TrainLog, train
from .nn.model import cross_entropy

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class OneShotConvergenceError(RuntimeError):
    pass


class FingerprintCapacityError(RuntimeError):
    pass


def scenario_seed(seed: int, index: int) -> int:
    """Independent 32-bit seed for scenario ``index`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


# --------------------------------------------------------------------------- one-shot


def default_monitored(model: Model) -> List[int]:
    """Hidden pre-activations: batch-norm outputs, or hidden weight-layer outputs without BN."""
    bns = [i for i, layer in enumerate(model.layers) if isinstance(layer, BatchNorm)]
    weight_idx = [i for i, layer in enumerate(model.layers) if isinstance(layer, WEIGHT_LAYERS)]
    last = weight_idx[-1] if weight_idx else len(model.layers)
    hidden_bns = [i for i in bns if i < last]
    return hidden_bns or weight_idx[:-1]


def moment_statistic(acts: np.ndarray) -> Tuple[float, float, float]:
    """(d, mean, variance) of a population; d = sqrt(mean^2 + (var - 1)^2)."""
    a = np.asarray(acts, dtype=np.float64).ravel()
    m1 = a.mean()
    m2 = a.var()
    return float(np.sqrt(m1 ** 2 + (m2 - 1.0) ** 2)), float(m1), float(m2)


def oneshot_loss_and_grad(model: Model, x: np.ndarray, monitored: Sequence[int],
                          program: Optional[CrossbarProgram] = None) -> Tuple[float, np.ndarray]:
    """L(x) = mean^2 + (var - 1)^2 over all monitored activations, and dL/dx.

    With ``program`` the activations come from the noise-free crossbar pass
    while the gradient flows back through the digital model
    (hardware-in-the-loop, straight-through on the analog error).
    """
    model.eval()
    out = model.forward(x, taps=monitored)
    if program is None:
        acts = [model.tapped[i].astype(np.float64) for i in monitored]
    else:
        tapped = {}
        faulty_forward(model, program, x, taps=monitored, tapped=tapped)
        acts = [tapped[i].astype(np.float64) for i in monitored]
    flat = np.concatenate([a.ravel() for a in acts])
    n = flat.size
    m1 = flat.mean()
    m2 = ((flat - m1) ** 2).mean()
    loss = m1 ** 2 + (m2 - 1.0) ** 2
    extra = {}
    for i, a in zip(monitored, acts):
        g = 2.0 * m1 / n + 4.0 * (m2 - 1.0) * (a - m1) / n
        extra[i] = g.astype(model.dtype)
    dx = model.backward(np.zeros_like(out), extra)
    return float(loss), dx


@dataclass
class OneShotVector:
    x_star: np.ndarray
    monitored_layers: List[int]
    stat_fault_free: float
    threshold: float

    def __post_init__(self):
        if not self.threshold > self.stat_fault_free >= 0:
            raise ValueError("need threshold > stat_fault_free >= 0")

    def to_text(self) -> str:
        x = np.asarray(self.x_star)
        lines = [f"# oneshot v{FORMAT_VERSION}",
                 "monitored " + " ".join(str(i) for i in self.monitored_layers),
                 f"stat_fault_free {float(self.stat_fault_free)!r}",
                 f"threshold {float(self.threshold)!r}",
                 "shape " + " ".join(str(s) for s in x.shape)]
        lines += [repr(float(v)) for v in x.ravel()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OneShotVector":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# oneshot v"):
            raise ValueError("not a one-shot vector file")
        version = int(lines[0].rsplit("v", 1)[1])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported one-shot format version {version}")
        head = dict(ln.split(" ", 1) if " " in ln else (ln, "") for ln in lines[1:5])
        shape = tuple(int(s) for s in head["shape"].split())
        values = np.array([float(v) for v in lines[5:]])
        if values.size != int(np.prod(shape)):
            raise ValueError(f"expected {int(np.prod(shape))} values, found {values.size}")
        return cls(values.reshape(shape), [int(i) for i in head["monitored"].split()],
                   float(head["stat_fault_free"]), float(head["threshold"]))


def oneshot_statistic(model: Model, prog: Optional[CrossbarProgram], x: np.ndarray,
                      monitored: Sequence[int], noise_seed: Optional[int] = None) -> float:
    if prog is None:
        model.eval()
        model.forward(x, taps=monitored)
        acts = [model.tapped[i] for i in monitored]
    else:
        tapped = {}
        faulty_forward(model, prog, x, noise_seed=noise_seed, taps=monitored, tapped=tapped)
        acts = [tapped[i] for i in monitored]
    return moment_statistic(np.concatenate([np.ravel(a) for a in acts]))[0]


def generate_oneshot(model: Model, steps: int = 1000, lr: float = 0.2, seed: int = 0,
                     program: Optional[CrossbarProgram] = None,
                     monitored: Optional[Sequence[int]] = None,
                     replays: int = 32, margin: float = 1.5, patience: int = 50) -> OneShotVector:
    """Optimize a single input so the monitored population is ~N(0, 1).

    Adam descends L(x) from x ~ N(0, 1). Given the fault-free ``program``,
    the descent and the fault-free statistic use the crossbar pass, and the
    threshold is ``margin`` times the largest statistic over ``replays``
    runs with independent read noise. Without a program everything is
    digital.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    monitored = list(default_monitored(model) if monitored is None else monitored)
    if not monitored:
        raise ValueError("model has no hidden layers to monitor")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4F4E45]))
    x = rng.standard_normal((1,) + model.input_shape).astype(model.dtype)
    m = np.zeros_like(x, dtype=np.float64)
    v = np.zeros_like(x, dtype=np.float64)
    prev, best, best_x = np.inf, np.inf, x
    stall = 0
    for t in range(1, steps + 1):
        loss, g = oneshot_loss_and_grad(model, x, monitored, program)
        stall = stall + 1 if loss >= prev else 0
        if stall >= patience:
            raise OneShotConvergenceError(f"did not converge: loss non-decreasing for {patience} steps "
                                          f"(L={loss:.3g})")
        prev = loss
        if loss < best:
            best, best_x = loss, x
        if loss < 1e-12:
            break
        g = g.astype(np.float64)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        x = (x - step).astype(model.dtype)
    x = best_x
    d_ff = oneshot_statistic(model, program, x, monitored)
    replay_stats = [d_ff]
    if program is not None:
        replay_stats += [oneshot_statistic(model, program, x, monitored, noise_seed=scenario_seed(seed, 10_000 + r))
                         for r in range(replays)]
    tau = margin * max(replay_stats)
    if tau <= d_ff:
        tau = float(np.nextafter(d_ff, np.inf))
    return OneShotVector(x, monitored, d_ff, float(tau))


def oneshot_test(model: Model, prog: CrossbarProgram, v: OneShotVector,
                 noise_seed: Optional[int] = None) -> dict:
    """One forward pass of the stored vector; fails when the statistic exceeds the threshold."""
    d = oneshot_statistic(model, prog, np.asarray(v.x_star), v.monitored_layers, noise_seed=noise_seed)
    return {"passed": bool(d <= v.threshold), "statistic": d}


# --------------------------------------------------------------------------- ranking


@dataclass
class RankedTestSet:
    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("indices must be unique")
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("scores must be non-increasing")

    def __len__(self):
        return len(self.indices)


def rank_tests(log_: TrainLog, k: int) -> RankedTestSet:
    """Top-``k`` training samples by accumulated gradient score, ties to the lower index."""
    scores = np.asarray(log_.sample_scores, dtype=np.float64)
    if k > len(scores):
        raise ValueError(f"k={k} exceeds dataset size {len(scores)}")
    if k < 0:
        raise ValueError("k must be >= 0")
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return RankedTestSet(order, scores[order])


def random_tests(n: int, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x524E44]))
    return rng.choice(n, size=k, replace=False)


# --------------------------------------------------------------------------- coverage


@dataclass
class FaultScenarios:
    """Generator of random faulty programs derived from a fault-free ``base``."""

    base: CrossbarProgram
    stuck_on_rate: float = 0.0
    stuck_off_rate: float = 0.0
    variation_sigma: float = 0.0

    def __call__(self, seed: int) -> Tuple[CrossbarProgram, FaultMap]:
        prog, fmap = inject_faults(self.base, self.stuck_on_rate, self.stuck_off_rate, seed)
        if self.variation_sigma > 0:
            prog = apply_variation(prog, self.variation_sigma, seed)
        return prog, fmap


@dataclass
class CoverageReport:
    scenarios: int
    detected: int
    per_scenario: List[Tuple[int, bool, float]] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.detected / self.scenarios if self.scenarios else 0.0


def fault_coverage(model: Model, prog_generator: FaultScenarios,
                   tests: Union[np.ndarray, OneShotVector], n_scenarios: int, seed: int,
                   fault_maps: Optional[list] = None) -> CoverageReport:
    """Fraction of random fault scenarios detected by ``tests``.

    Input tests detect a scenario when any top-1 prediction differs from the
    fault-free program's; a one-shot vector detects it when its statistic
    exceeds the threshold. Scenario ``i`` uses ``scenario_seed(seed, i)``.
    """
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    oneshot = isinstance(tests, OneShotVector)
    if not oneshot:
        tests = np.asarray(tests)
        golden = crossbar_predict(model, prog_generator.base, tests) if len(tests) else None
    per = []
    for i in range(n_scenarios):
        s = scenario_seed(seed, i)
        prog, fmap = prog_generator(s)
        if fault_maps is not None:
            fault_maps.append(fmap)
        if oneshot:
            res = oneshot_test(model, prog, tests, noise_seed=s)
            per.append((s, not res["passed"], res["statistic"]))
        elif len(tests) == 0:
            per.append((s, False, 0.0))
        else:
            mismatches = int((crossbar_predict(model, prog, tests) != golden).sum())
            per.append((s, mismatches > 0, float(mismatches)))
    return CoverageReport(n_scenarios, sum(1 for _, d, _ in per if d), per)


# --------------------------------------------------------------------------- fingerprint


@dataclass(frozen=True)
class FingerprintSpec:
    n_aux: int = 8
    lam: float = 0.1
    seed: int = 0
    margin: float = 1.5


@dataclass
class Fingerprint:
    f_target: np.ndarray
    lam: float
    tol: float
    n_classes: int
    task_accuracy: Optional[float] = None
    baseline_accuracy: Optional[float] = None

    def __post_init__(self):
        self.f_target = np.asarray(self.f_target, dtype=np.float64)
        if len(self.f_target) < 4:
            raise ValueError("a fingerprint needs at least 4 units")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")

    def aux(self, outputs: np.ndarray) -> np.ndarray:
        return np.asarray(outputs)[..., self.n_classes:self.n_classes + len(self.f_target)]

    def to_text(self) -> str:
        lines = [f"# fingerprint v{FORMAT_VERSION}", f"n_classes {self.n_classes}",
                 f"lambda {float(self.lam)!r}", f"tol {float(self.tol)!r}",
                 f"shape {len(self.f_target)}"]
        lines += [repr(float(v)) for v in self.f_target]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Fingerprint":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# fingerprint v"):
            raise ValueError("not a fingerprint file")
        if int(lines[0].rsplit("v", 1)[1]) != FORMAT_VERSION:
            raise ValueError("unsupported fingerprint format version")
        head = dict(ln.split(" ", 1) for ln in lines[1:5])
        n = int(head["shape"])
        values = np.array([float(v) for v in lines[5:5 + n]])
        return cls(values, float(head["lambda"]), float(head["tol"]), int(head["n_classes"]))


def rademacher(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x46505254]))
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def extend_with_aux(model: Model, n_aux: int, seed: int = 0) -> Model:
    """Copy of ``model`` whose final dense layer has ``n_aux`` extra output units."""
    new = model.copy()
    n_classes = model.n_classes or model.output_shape[0]
    idx = max(i for i, layer in enumerate(new.layers) if isinstance(layer, WEIGHT_LAYERS))
    dense = new.layers[idx]
    if not isinstance(dense, Dense):
        raise ValueError("the final weight layer must be dense")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x415558]))
    bound = 1.0 / np.sqrt(dense.in_features)
    extra_w = rng.uniform(-bound, bound, (n_aux, dense.in_features)).astype(new.dtype)
    dense.params["W"] = np.concatenate([dense.params["W"], extra_w])
    dense.params["b"] = np.concatenate([dense.params["b"], np.zeros(n_aux, new.dtype)])
    dense.out_features += n_aux
    for layer in new.layers[idx + 1:]:
        if isinstance(layer, BatchNorm):
            layer.num_features += n_aux
            for d, fill in ((layer.params, {"gamma": 1.0, "beta": 0.0}),
                            (layer.stats, {"running_mean": 0.0, "running_var": 1.0})):
                for k, val in fill.items():
                    d[k] = np.concatenate([d[k], np.full(n_aux, val, new.dtype)])
    new.n_classes = n_classes
    new.shapes = new._infer_shapes()
    return new


class FingerprintObjective:
    """Task cross-entropy plus ``lam`` times the mean squared fingerprint error."""

    def __init__(self, n_classes: int, f_target: np.ndarray, lam: float):
        self.n_classes = n_classes
        self.f_target = np.asarray(f_target)
        self.lam = lam

    def __call__(self, out, y):
        c = self.n_classes
        task = out[:, :c]
        loss, dtask = cross_entropy(task, y)
        diff = out[:, c:] - self.f_target.astype(out.dtype)
        loss += self.lam * float((diff ** 2).mean())
        dout = np.empty_like(out)
        dout[:, :c] = dtask
        dout[:, c:] = self.lam * 2.0 * diff / diff.size
        return loss, dout, task


def fingerprint_outputs(model: Model, fp: Fingerprint, x: np.ndarray) -> np.ndarray:
    model.eval()
    return fp.aux(model.forward(x))


def check_fingerprint(output_aux: np.ndarray, fp: Fingerprint):
    """Pass iff ||aux - f_target||_inf <= tol; vectorized over leading axes."""
    output_aux = np.asarray(output_aux, dtype=np.float64)
    if output_aux.shape[-1] != len(fp.f_target):
        raise ValueError(f"expected {len(fp.f_target)} auxiliary outputs, got {output_aux.shape[-1]}")
    dist = np.abs(output_aux - fp.f_target).max(axis=-1)
    ok = dist <= fp.tol
    return bool(ok) if np.ndim(ok) == 0 else ok


def train_with_fingerprint(model: Model, fp_spec: FingerprintSpec, dataset: Tuple[np.ndarray, np.ndarray],
                           cfg: TrainConfig, val: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                           baseline_accuracy: Optional[float] = None) -> Tuple[Model, Fingerprint]:
    """Jointly train the task and a constant +/-1 code on ``n_aux`` extra outputs.

    ``tol`` is ``margin`` times the worst fingerprint error on the validation
    inputs. The untouched ``model`` is trained separately as the accuracy
    baseline unless ``baseline_accuracy`` is supplied.
    """
    if fp_spec.lam <= 0:
        raise ValueError("fingerprint weight lam must be > 0")
    if fp_spec.n_aux < 4:
        raise ValueError("a fingerprint needs at least 4 units")
    val = val if val is not None else dataset
    n_classes = model.n_classes or model.output_shape[0]
    if baseline_accuracy is None:
        base = model.copy()
        train(base, dataset, cfg)
        baseline_accuracy = base.accuracy(*val)
    f_target = rademacher(fp_spec.n_aux, fp_spec.seed)
    fp_model = extend_with_aux(model, fp_spec.n_aux, fp_spec.seed)
    train(fp_model, dataset, cfg, objective=FingerprintObjective(n_classes, f_target, fp_spec.lam))
    acc = fp_model.accuracy(*val)
    aux = np.concatenate([fp_model.forward(val[0][s:s + 4096])[:, n_classes:]
                          for s in range(0, len(val[0]), 4096)])
    worst = float(np.abs(aux - f_target).max())
    tol = fp_spec.margin * worst
    if baseline_accuracy - acc > 0.03:
        raise FingerprintCapacityError(
            f"fingerprint capacity exceeded: accuracy {acc:.4f} vs baseline {baseline_accuracy:.4f}")
    if not 0 < tol < 2:
        raise FingerprintCapacityError(f"calibrated tolerance {tol:.3g} must lie in (0, 2)")
    return fp_model, Fingerprint(f_target, fp_spec.lam, tol, n_classes, acc, baseline_accuracy)
