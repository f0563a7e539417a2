"""Bayesian layers and Monte-Carlo predictive inference.

Four stochastic mechanisms are provided as layers:

* ``NeuronDropout``: one Bernoulli mask element per activation.
* ``SpatialDropout``: one Bernoulli draw per feature map (per feature for
  dense activations), so whole channels are zeroed together.
* ``ScaleDropout``: a learnable per-channel scale vector that, with
  probability ``p``, is swapped for the all-ones vector. Every scale-dropout
  layer in a model draws from the same source, one draw per layer per pass.
* ``ScaleVI``: a Gaussian posterior over the per-channel scale vector,
  sampled with the reparameterization trick; weights stay deterministic.

``InvertedNormAffine`` normalizes and then perturbs its affine parameters
multiplicatively by ``1 + s * delta`` with ``s`` in ``{-1, 0, +1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nn.layers import (
    WEIGHT_LAYERS,
    BatchNorm,
    ConfigurationError,
    ForwardContext,
    Layer,
    RngSource,
    ShapeError,
    softmax,
)
from .nn.model import Model, cross_entropy

SCALE_SOURCE_ID = 0


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _channel_view(x: np.ndarray):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"expected a 2-D or 4-D batch, got {x.ndim}-D")


def _check_p(p: float) -> float:
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p}")
    return float(p)


class NeuronDropout(Layer):
    kind = "NeuronDropout"
    stochastic = True

    def __init__(self, p: float, source_id: int = 1):
        super().__init__()
        self.p = _check_p(p)
        self.source_id = source_id

    def forward(self, x, ctx):
        if not ctx.stochastic:
            self._mask = None
            return x
        keep = ~ctx.source(self.source_id, "neuron").bernoulli(self.p, x.shape)
        self._mask = (keep / (1.0 - self.p)).astype(x.dtype)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask

    def __repr__(self):
        return f"NeuronDropout(p={self.p})"


class SpatialDropout(Layer):
    """Drops whole feature maps; kept maps are scaled by 1/(1-p)."""

    kind = "SpatialDropout"
    stochastic = True

    def __init__(self, p: float, source_id: int = 2):
        super().__init__()
        self.p = _check_p(p)
        self.source_id = source_id

    def forward(self, x, ctx):
        if not ctx.stochastic:
            self._mask = None
            return x
        _, bshape = _channel_view(x)
        keep = ~ctx.source(self.source_id, "spatial").bernoulli(self.p, x.shape[:2])
        mask = (keep / (1.0 - self.p)).astype(x.dtype)
        self._mask = mask.reshape(x.shape[:2] + (1,) * (x.ndim - 2))
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask

    def __repr__(self):
        return f"SpatialDropout(p={self.p})"


def scale_dropout_draw(p: float, rng_source: RngSource) -> bool:
    """One Bernoulli draw from the shared source: True means 'drop the scale'."""
    return bool(rng_source.random() < p)


def scale_dropout_step(layer_scales: np.ndarray, p: float, rng_source: RngSource) -> np.ndarray:
    """Return the all-ones vector with probability ``p``, else ``layer_scales``.

    Consumes exactly one variate from ``rng_source``; successive layers call
    this with the same source, time-multiplexing a single dropout module.
    """
    if rng_source.kind != "scale":
        raise ConfigurationError("scale dropout must draw from the model's scale source")
    if scale_dropout_draw(p, rng_source):
        return np.ones_like(layer_scales)
    return layer_scales


class ScaleDropout(Layer):
    """Per-channel learnable scale with whole-vector dropout to 1."""

    kind = "ScaleDropout"
    stochastic = True

    def __init__(self, channels: int, p: float = 0.1, adaptive: bool = False,
                 source_id: int = SCALE_SOURCE_ID):
        super().__init__()
        self.channels = channels
        self.p = _check_p(p)
        self.adaptive = adaptive
        self.source_id = source_id
        self.params["scale"] = np.ones(channels)

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ShapeError(f"ScaleDropout expects {self.channels} channels, got {tuple(input_shape)}")
        return tuple(input_shape)

    def forward(self, x, ctx):
        axes, bshape = _channel_view(x)
        scale = self.params["scale"]
        self._dropped = False
        if ctx.stochastic:
            src = ctx.source(self.source_id, "scale")
            used = scale_dropout_step(scale, self.p, src)
            self._dropped = used is not scale
            scale = used
        self._x, self._scale, self._axes, self._bshape = x, scale, axes, bshape
        return x * scale.reshape(bshape)

    def backward(self, dy):
        if self._dropped:
            self.grads["scale"] = np.zeros_like(self.params["scale"])
        else:
            self.grads["scale"] = (dy * self._x).sum(axis=self._axes)
        return dy * self._scale.reshape(self._bshape)

    def __repr__(self):
        return f"ScaleDropout({self.channels}, p={self.p:.3f})"


def gaussian_kl(mu, sigma, prior_mean: float = 1.0, prior_sigma: float = 1.0) -> np.ndarray:
    """Elementwise KL( N(mu, sigma^2) || N(prior_mean, prior_sigma^2) )."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return (np.log(prior_sigma / sigma)
            + (sigma ** 2 + (mu - prior_mean) ** 2) / (2.0 * prior_sigma ** 2) - 0.5)


class ScaleVI(Layer):
    """Variational per-channel scale: alpha = mu + softplus(rho) * eps."""

    kind = "ScaleVI"
    stochastic = True

    def __init__(self, channels: int, prior_sigma: float = 0.25, init_sigma: float = 0.05,
                 source_id: int = 3):
        super().__init__()
        if prior_sigma <= 0:
            raise ConfigurationError("prior_sigma must be > 0")
        self.channels = channels
        self.prior_mean = 1.0
        self.prior_sigma = float(prior_sigma)
        self.source_id = source_id
        self.params["mu"] = np.ones(channels)
        self.params["rho"] = np.full(channels, softplus_inv(init_sigma))

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ShapeError(f"ScaleVI expects {self.channels} channels, got {tuple(input_shape)}")
        return tuple(input_shape)

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.params["rho"])

    def forward(self, x, ctx):
        axes, bshape = _channel_view(x)
        mu = self.params["mu"]
        if ctx.stochastic:
            eps = ctx.source(self.source_id, "vi").normal(self.channels).astype(x.dtype)
        else:
            eps = np.zeros(self.channels, dtype=x.dtype)
        alpha = mu + self.sigma * eps
        self._x, self._eps, self._alpha, self._axes, self._bshape = x, eps, alpha, axes, bshape
        return x * alpha.reshape(bshape)

    def backward(self, dy):
        dalpha = (dy * self._x).sum(axis=self._axes)
        self.grads["mu"] = dalpha
        self.grads["rho"] = dalpha * self._eps * sigmoid(self.params["rho"])
        return dy * self._alpha.reshape(self._bshape)

    def kl(self) -> float:
        return float(gaussian_kl(self.params["mu"], self.sigma, self.prior_mean, self.prior_sigma).sum())

    def add_kl_grad(self, beta: float) -> None:
        mu, rho = self.params["mu"], self.params["rho"]
        sig = self.sigma
        s2 = self.prior_sigma ** 2
        gmu = beta * (mu - self.prior_mean) / s2
        grho = beta * (-1.0 / sig + sig / s2) * sigmoid(rho)
        self.grads["mu"] = self.grads.get("mu", 0) + gmu.astype(mu.dtype)
        self.grads["rho"] = self.grads.get("rho", 0) + grho.astype(rho.dtype)

    def __repr__(self):
        return f"ScaleVI({self.channels}, prior_sigma={self.prior_sigma})"


def affine_dropout_signs(rng, channels: int, p: float) -> np.ndarray:
    """Per-channel s in {-1, 0, +1} with P(s = -1) = P(s = +1) = p / 2."""
    u = rng.random(channels)
    return np.where(u < p / 2, -1.0, np.where(u < p, 1.0, 0.0))


def inverted_norm_affine(x: np.ndarray, stats: Tuple[np.ndarray, np.ndarray], gamma: np.ndarray,
                         beta: np.ndarray, delta: float, p: float, rng=None,
                         eps: float = 1e-5) -> np.ndarray:
    """Normalize with fixed ``stats = (mean, var)`` then apply a dropped-out affine map.

    ``rng`` of None means eval mode (s = 0 everywhere).
    """
    mean, var = (np.asarray(s) for s in stats)
    if np.any(var <= 0):
        raise ValueError("normalization variance must be > 0")
    _, bshape = _channel_view(x)
    xhat = (x - mean.reshape(bshape)) / np.sqrt(var.reshape(bshape) + eps)
    s = np.zeros(len(gamma)) if rng is None else affine_dropout_signs(rng, len(gamma), p)
    factor = 1.0 + s * delta
    return (gamma * factor).reshape(bshape) * xhat + (beta * factor).reshape(bshape)


class InvertedNormAffine(BatchNorm):
    """Batch normalization whose affine parameters undergo affine dropout."""

    kind = "InvertedNormAffine"
    stochastic = True

    def __init__(self, num_features: int, delta: float = 0.1, p: float = 0.5, source_id: int = 4,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(num_features, momentum=momentum, eps=eps)
        self.delta = float(delta)
        self.p = _check_p(p)
        self.source_id = source_id

    def forward(self, x, ctx):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if ctx.stochastic:
            s = affine_dropout_signs(ctx.source(self.source_id, "affine"), self.num_features, self.p)
        else:
            s = np.zeros(self.num_features)
        self._factor = (1.0 + s * self.delta).astype(x.dtype)
        self.params["gamma"], self.params["beta"] = gamma * self._factor, beta * self._factor
        try:
            return super().forward(x, ctx)
        finally:
            self.params["gamma"], self.params["beta"] = gamma, beta

    def backward(self, dy):
        gamma = self.params["gamma"]
        self.params["gamma"] = gamma * self._factor
        try:
            dx = super().backward(dy)
        finally:
            self.params["gamma"] = gamma
        self.grads["gamma"] = self.grads["gamma"] * self._factor
        self.grads["beta"] = self.grads["beta"] * self._factor
        return dx

    def __repr__(self):
        return f"InvertedNormAffine({self.num_features}, delta={self.delta}, p={self.p})"


def scale_layers(model: Model) -> List[ScaleDropout]:
    return [layer for layer in model.layers if isinstance(layer, ScaleDropout)]


def validate_sources(model: Model) -> None:
    """Fail unless every scale-dropout layer shares one RNG source."""
    ids = {layer.source_id for layer in scale_layers(model)}
    if len(ids) > 1:
        raise ConfigurationError(f"scale dropout layers use {len(ids)} sources {sorted(ids)}; exactly one allowed")
    others = [layer.source_id for layer in model.layers
              if layer.stochastic and not isinstance(layer, ScaleDropout)]
    if ids & set(others):
        raise ConfigurationError("the scale dropout source id is shared with another stochastic layer")


@dataclass
class PredictiveResult:
    """Monte-Carlo predictive distribution for a batch of inputs.

    ``samples`` has shape (T, N, C) and ``mean_probs`` (N, C).
    """

    mean_probs: np.ndarray
    samples: np.ndarray

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    def __getitem__(self, idx) -> "PredictiveResult":
        idx = np.atleast_1d(np.arange(self.mean_probs.shape[0])[idx])
        return PredictiveResult(self.mean_probs[idx], self.samples[:, idx])


def mc_forward(model: Model, x: np.ndarray, T: int, seed: int,
               trace: Optional[list] = None, batch_size: int = 8192) -> PredictiveResult:
    """T stochastic forward passes with batch-norm frozen; sample t uses stream (seed, t).

    If ``trace`` is a list, the ForwardContext of every pass is appended to it
    so callers can inspect RNG sources and draw counters.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    validate_sources(model)
    x = model.check_input(x)
    samples = []
    for t in range(T):
        chunks = []
        for start in range(0, len(x), batch_size):
            ctx = ForwardContext(training=False, stochastic=True, seed=seed, sample=t)
            if start:
                # distinct stream per chunk keeps chunks independent
                ctx.sample = t * 1_000_003 + start
            logits = model.forward(x[start:start + batch_size], ctx=ctx)
            chunks.append(softmax(model.task_logits(logits).astype(np.float64)))
            if trace is not None:
                trace.append(ctx)
        samples.append(np.concatenate(chunks))
    samples = np.stack(samples)
    return PredictiveResult(samples.mean(axis=0), samples)


def rates_from_sizes(sizes: Sequence[int], p_min: float, p_max: float) -> List[float]:
    """Linear map from relative layer size to dropout rate."""
    if not 0.0 <= p_min <= p_max < 1.0:
        raise ValueError("need 0 <= p_min <= p_max < 1")
    sizes = np.asarray(sizes, dtype=np.float64)
    rel = sizes / sizes.max()
    return [float(p_min + (p_max - p_min) * r) for r in rel]


def adaptive_rates(model: Model, p_min: float, p_max: float, apply: bool = True) -> List[float]:
    """Layer-dependent scale-dropout rates, larger for larger layers.

    A scale-dropout layer is sized by the parameter count of the nearest
    weight layer before it.
    """
    sizes, targets = [], []
    last = 0
    for layer in model.layers:
        if isinstance(layer, WEIGHT_LAYERS):
            last = layer.n_params()
        elif isinstance(layer, ScaleDropout):
            sizes.append(last or layer.n_params())
            targets.append(layer)
    if not targets:
        return []
    rates = rates_from_sizes(sizes, p_min, p_max)
    if apply:
        for layer, p in zip(targets, rates):
            layer.p = p
    return rates


def vi_elbo(model: Model, batch: Tuple[np.ndarray, np.ndarray], beta: float,
            seed: int) -> Tuple[float, Dict[str, float]]:
    """Negative ELBO of one batch; leaves gradients in each layer's ``grads``."""
    vi = [layer for layer in model.layers if isinstance(layer, ScaleVI)]
    if not vi:
        raise ConfigurationError("vi_elbo needs at least one ScaleVI layer")
    x, y = batch
    prev = model.mode
    model.train()
    try:
        ctx = model.context(seed=seed)
        out = model.forward(x, ctx=ctx)
        nll, dout = cross_entropy(model.task_logits(out), y)
        if out.shape[1] != dout.shape[1]:
            full = np.zeros_like(out)
            full[:, :dout.shape[1]] = dout
            dout = full
        kl = sum(layer.kl() for layer in vi)
        if not np.isfinite(kl):
            raise FloatingPointError(f"non-finite KL term {kl}")
        model.backward(dout)
        for layer in vi:
            layer.add_kl_grad(beta)
    finally:
        model.mode = prev
    return nll + beta * kl, {"nll": nll, "kl": kl}
