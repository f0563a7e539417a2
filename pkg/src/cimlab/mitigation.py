"""Accuracy recovery on faulty or varied crossbars.

``approx_bn_recalibrate`` re-estimates batch-norm statistics from a tiny
unlabeled calibration set pushed through the faulty hardware path.
``generate_reference`` picks the per-column sensing thresholds used when
partial sums are binarized instead of digitized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .crossbar import CrossbarProgram, apply_variation, faulty_forward, with_reference
from .nn import BatchNorm, Conv2d, Model, TrainConfig, WeightNoise
from .selftest import RankedTestSet, scenario_seed

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-5


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    fraction: float

    def __post_init__(self):
        if self.fraction > 0.01:
            raise ValueError(f"calibration fraction {self.fraction} exceeds 1% of the training set")
        if len(self.inputs) < 2:
            raise ValueError("need at least two calibration inputs")


def make_calibration_set(train_inputs: np.ndarray, fraction: float = 0.002, seed: int = 0,
                         ranking: Optional[RankedTestSet] = None) -> CalibrationSet:
    """Pick ``fraction`` of the training inputs: top of ``ranking`` if given, else uniformly."""
    n = max(2, int(round(fraction * len(train_inputs))))
    if ranking is not None and len(ranking) >= n:
        idx = np.asarray(ranking.indices[:n])
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x43414C]))
        idx = np.sort(rng.choice(len(train_inputs), size=n, replace=False))
    return CalibrationSet(np.asarray(train_inputs)[idx], n / len(train_inputs))


def approx_bn_recalibrate(model: Model, prog_faulty: CrossbarProgram, calib: CalibrationSet,
                          noise_seed: Optional[int] = None) -> Model:
    """Copy of ``model`` with batch-norm statistics measured on the faulty program.

    One pass, layer by layer: each batch-norm layer receives the plain batch
    mean/variance of its inputs before it runs, so later layers see
    already-recalibrated activations. Weights are untouched and no labels
    are used.
    """
    if not any(isinstance(layer, BatchNorm) for layer in model.layers):
        raise ValueError("model has no batch-norm layer to recalibrate")
    new = model.copy().eval()

    def hook(i, layer, x):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        xd = x.astype(np.float64)
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        dead = var < VAR_FLOOR
        if dead.any():
            log.warning("layer %d: %d channel(s) with near-zero variance floored at %g", i, int(dead.sum()), VAR_FLOOR)
            var = np.maximum(var, VAR_FLOOR)
        layer.stats["running_mean"] = mean.astype(new.dtype)
        layer.stats["running_var"] = var.astype(new.dtype)

    faulty_forward(new, prog_faulty, calib.inputs, noise_seed=noise_seed, bn_hook=hook)
    return new


def variation_aware_loss_hook(cfg: TrainConfig, seed: int = 0) -> WeightNoise:
    """The weight-perturbation policy ``train`` applies for ``cfg.noise_spec``.

    Every training forward pass multiplies weights by exp(N(0, sigma^2)) drawn
    fresh; gradients pass straight through the noise.
    """
    if cfg.noise_spec is None:
        raise ValueError("TrainConfig.noise_spec is not set")
    return WeightNoise(cfg.noise_spec.sigma, seed)


@dataclass
class ReferenceVector:
    """Per-tile sensing thresholds (current units) and output polarity."""

    theta: Dict[int, np.ndarray]
    polarity: Dict[int, np.ndarray]
    scenario_count: int

    def __post_init__(self):
        for th in self.theta.values():
            if not np.all(np.isfinite(th)):
                raise ValueError("reference thresholds must be finite")

    def attach(self, prog: CrossbarProgram) -> CrossbarProgram:
        return with_reference(prog, self.theta, self.polarity)

    def zeros(self) -> "ReferenceVector":
        """Same polarity, every threshold at 0."""
        return ReferenceVector({k: np.zeros_like(v) for k, v in self.theta.items()},
                               dict(self.polarity), self.scenario_count)

    def to_text(self) -> str:
        lines = [f"# reference v1 scenarios={self.scenario_count}", "tile,col,theta,polarity"]
        for tid in sorted(self.theta):
            for j, (th, pol) in enumerate(zip(self.theta[tid], self.polarity[tid])):
                lines.append(f"{tid},{j},{float(th)!r},{int(pol)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ReferenceVector":
        scenarios = 0
        rows: Dict[int, list] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("tile,"):
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("scenarios="):
                        scenarios = int(tok.split("=", 1)[1])
                continue
            tid, j, th, pol = line.split(",")
            rows.setdefault(int(tid), []).append((int(j), float(th), float(pol)))
        theta, polarity = {}, {}
        for tid, vals in rows.items():
            vals.sort()
            theta[tid] = np.array([v[1] for v in vals])
            polarity[tid] = np.array([v[2] for v in vals])
        return cls(theta, polarity, scenarios)


def best_split(values: np.ndarray, positive: np.ndarray) -> float:
    """Threshold t so that ``values >= t`` predicts ``positive`` with fewest errors.

    Among equally good splits the widest gap wins and t sits at its
    midpoint. A constant column returns that constant.
    """
    v = np.asarray(values, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    order = np.argsort(v, kind="stable")
    vs, ps = v[order], pos[order]
    if vs[0] == vs[-1]:
        return float(vs[0])
    n = len(vs)
    pos_below = np.concatenate([[0], np.cumsum(ps)])
    neg_below = np.arange(n + 1) - pos_below
    errors = pos_below + (neg_below[-1] - neg_below)
    gaps = np.zeros(n + 1)
    gaps[1:n] = vs[1:] - vs[:-1]
    best = np.flatnonzero(errors == errors.min())
    k = int(best[np.argmax(gaps[best])])
    if k == 0:
        return float(vs[0])
    if k == n:
        return float(vs[-1] + max(abs(vs[-1]) * 1e-6, 1e-9))
    return float(0.5 * (vs[k - 1] + vs[k]))


def fold_threshold(model: Model, layer_index: int, prog: CrossbarProgram):
    """Total-current threshold T and polarity reproducing bias -> BN -> sign on a column.

    The column's binary output is +1 iff ``polarity * (I - T) >= 0``.
    """
    lm = prog.layers[layer_index]
    layer = model.layers[layer_index]
    a = lm.scale / prog.config.g_range
    b = np.asarray(layer.params["b"], dtype=np.float64)
    nxt = model.layers[layer_index + 1]
    if isinstance(nxt, BatchNorm) and layer_index + 1 < lm.absorb_until:
        gamma = np.asarray(nxt.params["gamma"], dtype=np.float64)
        beta = np.asarray(nxt.params["beta"], dtype=np.float64)
        mu = np.asarray(nxt.stats["running_mean"], dtype=np.float64)
        sd = np.sqrt(np.asarray(nxt.stats["running_var"], dtype=np.float64) + nxt.eps)
        safe = np.where(gamma == 0, 1.0, gamma)
        z_thr = mu - beta * sd / safe
        polarity = np.where(gamma < 0, -1.0, 1.0)
        # gamma == 0: the output is the constant sign(beta)
        big = 1e12
        z_thr = np.where(gamma == 0, np.where(beta >= 0, -big, big), z_thr)
    else:
        z_thr = np.zeros_like(b)
        polarity = np.ones_like(b)
    return (z_thr - b) / a, polarity


def _layer_inputs(model: Model, inputs: np.ndarray) -> Dict[int, np.ndarray]:
    model.eval()
    model.forward(inputs, taps=range(len(model.layers)))
    out = {0: model.check_input(inputs)}
    for i in range(1, len(model.layers)):
        out[i] = model.tapped[i - 1]
    return out


def generate_reference(prog: CrossbarProgram, model: Model, scenarios: int, seed: int,
                       inputs: Optional[np.ndarray] = None,
                       sigma: Optional[float] = None) -> ReferenceVector:
    """Design-time sensing references for binarized partial sums.

    For every binarized column, ``scenarios`` variation-perturbed copies of
    the program are driven by calibration inputs (256 standard-normal inputs
    unless given). Each scenario's threshold is the best split between
    currents whose fault-free digital activation is +1 and those whose
    activation is -1; the reference is the median across scenarios.
    """
    if scenarios < 1:
        raise ValueError("scenarios must be >= 1")
    sigma = prog.config.variation_sigma if sigma is None else sigma
    if inputs is None:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x524546]))
        inputs = rng.standard_normal((256,) + model.input_shape)
    layer_in = _layer_inputs(model, inputs)
    varied = [apply_variation(prog, sigma, scenario_seed(seed, s)) for s in range(scenarios)]
    theta, polarity = {}, {}
    for li, lm in prog.layers.items():
        if lm.absorb_until is None:
            continue
        x = layer_in[li].astype(np.float64)
        rows = model.layers[li].im2col(x) if isinstance(model.layers[li], Conv2d) else x
        T, pol = fold_threshold(model, li, prog)
        k_tiles = -(-lm.in_dim // prog.config.tile_rows)
        for tid in lm.tile_ids:
            t = prog.tiles[tid]
            r, c = t.shape
            xs = rows[:, t.row0:t.row0 + r]
            cols = slice(t.col0, t.col0 + c)
            p = pol[cols]
            ideal = xs @ (t.g_plus - t.g_minus)
            labels = p * (ideal - T[cols] / k_tiles) >= 0
            per_scenario = np.empty((scenarios, c))
            for s, vp in enumerate(varied):
                vt = vp.tiles[tid]
                current = xs @ (vt.g_plus - vt.g_minus)
                for j in range(c):
                    per_scenario[s, j] = p[j] * best_split(p[j] * current[:, j], labels[:, j])
            theta[tid] = np.median(per_scenario, axis=0)
            polarity[tid] = p.copy()
    return ReferenceVector(theta, polarity, scenarios)
