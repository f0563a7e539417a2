"""Optimizers and the mini-batch training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .layers import WEIGHT_LAYERS, WeightNoise, softmax
from .model import Model, NonFiniteLossError, cross_entropy, one_hot


class TrainingDivergedError(FloatingPointError):
    def __init__(self, last_finite_epoch: int, batch_index: int):
        super().__init__(f"loss became non-finite at batch {batch_index}; "
                         f"last finite epoch: {last_finite_epoch}")
        self.last_finite_epoch = last_finite_epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class VariationSpec:
    """Relative (log-normal) weight variation applied during training."""

    sigma: float


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    binary_weights: bool = False
    noise_spec: Optional[VariationSpec] = None
    # weight on the KL term of scale-VI layers; None means 1 / batches-per-epoch
    kl_weight: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer.lower() not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainLog:
    loss: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)
    # sum over epochs of ||softmax(z_i) - onehot(y_i)||_2, indexed by sample
    sample_scores: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.loss)


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, model: Model) -> None:
        for key, layer, name in model.parameters():
            g = layer.grads.get(name)
            if g is None:
                continue
            if self.momentum:
                v = self.velocity.get(key)
                v = g if v is None else self.momentum * v + g
                self.velocity[key] = v
                g = v
            layer.params[name] = (layer.params[name] - self.lr * g).astype(model.dtype)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, model: Model) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for key, layer, name in model.parameters():
            g = layer.grads.get(name)
            if g is None:
                continue
            m = self.m.get(key, 0.0)
            v = self.v.get(key, 0.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[key], self.v[key] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            layer.params[name] = (layer.params[name] - update).astype(model.dtype)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer.lower() == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate)


class CrossEntropyObjective:
    """Softmax cross-entropy over the first ``n_classes`` outputs."""

    def __init__(self, n_classes: Optional[int] = None):
        self.n_classes = n_classes

    def __call__(self, out: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        if self.n_classes is None or self.n_classes == out.shape[1]:
            loss, dout = cross_entropy(out, y)
            return loss, dout, out
        task = out[:, :self.n_classes]
        loss, dtask = cross_entropy(task, y)
        dout = np.zeros_like(out)
        dout[:, :self.n_classes] = dtask
        return loss, dout, task


def variational_layers(model: Model):
    return [layer for layer in model.layers if hasattr(layer, "kl")]


def train(model: Model, dataset: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
          objective: Optional[Callable] = None) -> TrainLog:
    """Train ``model`` in place on ``(inputs, labels)`` and return the log.

    Shuffling, dropout masks and weight noise all derive from ``model.seed``,
    so two runs with the same seed produce bitwise-identical logs and weights.
    """
    X, y = dataset
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y).astype(int)
    n = len(X)
    if n == 0:
        raise ValueError("dataset is empty")
    if len(y) != n:
        raise ValueError(f"{n} inputs but {len(y)} labels")
    n_classes = model.n_classes or model.output_shape[0]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")

    log = TrainLog(sample_scores=np.zeros(n))
    if cfg.epochs == 0:
        return log
    if cfg.binary_weights:
        for layer in model.layers:
            if isinstance(layer, WEIGHT_LAYERS):
                layer.binary = True

    objective = objective or CrossEntropyObjective(model.n_classes)
    opt = make_optimizer(cfg)
    noise = WeightNoise(cfg.noise_spec.sigma, model.seed) if cfg.noise_spec is not None else None
    n_batches = -(-n // cfg.batch_size)
    beta = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / n_batches
    vi_layers = variational_layers(model)

    model.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(np.random.SeedSequence([model.seed, 1, epoch])).permutation(n)
            total, correct = 0.0, 0
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                ctx = model.context(sample=step, weight_noise=noise)
                out = model.forward(X[idx], ctx=ctx)
                loss, dout, task = objective(out, y[idx])
                loss += beta * sum(layer.kl() for layer in vi_layers)
                if not np.isfinite(loss):
                    raise NonFiniteLossError(step, loss)
                model.backward(dout)
                for layer in vi_layers:
                    layer.add_kl_grad(beta)
                opt.step(model)
                p = softmax(task.astype(np.float64))
                log.sample_scores[idx] += np.linalg.norm(p - one_hot(y[idx], p.shape[1]), axis=1)
                total += loss * len(idx)
                correct += int((task.argmax(axis=1) == y[idx]).sum())
                step += 1
            log.loss.append(total / n)
            log.accuracy.append(correct / n)
    except NonFiniteLossError as exc:
        model.eval()
        raise TrainingDivergedError(len(log.loss) - 1, exc.batch_index) from exc
    model.eval()
    return log
