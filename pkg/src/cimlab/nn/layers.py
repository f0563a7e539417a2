"""Layer implementations with hand-written reverse passes.

Every layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into ``self.grads``. Arrays are plain numpy
arrays; batches always lead (``(N, F)`` for dense data, ``(N, C, H, W)``
for feature maps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not match the shape a layer expects."""


class ConfigurationError(ValueError):
    """Raised for inconsistent model or RNG configuration."""


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(x >= 0, 1, -1).astype(x.dtype, copy=False)


def binarize_ste(w: np.ndarray) -> np.ndarray:
    """Forward value of the straight-through binarizer: sign(w) in {-1, +1}."""
    w = np.asarray(w)
    if not np.issubdtype(w.dtype, np.floating):
        w = w.astype(np.float64)
    return sign(w)


def ste_mask(w: np.ndarray) -> np.ndarray:
    """Gradient mask of the straight-through estimator (1 where |w| <= 1)."""
    w = np.asarray(w)
    return (np.abs(w) <= 1).astype(w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64)


def binarize_ste_grad(w: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward pass of :func:`binarize_ste`."""
    return dy * ste_mask(w)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class RngSource:
    """A seeded random stream that counts how many variates it has produced."""

    def __init__(self, seed_seq: np.random.SeedSequence, source_id: int, kind: str):
        self.gen = np.random.default_rng(seed_seq)
        self.source_id = source_id
        self.kind = kind
        self.draws = 0

    def random(self, size=None) -> np.ndarray:
        out = self.gen.random(size)
        self.draws += int(np.size(out))
        return out

    def bernoulli(self, p: float, size=None):
        u = self.random(size)
        return u < p

    def normal(self, size=None) -> np.ndarray:
        out = self.gen.standard_normal(size)
        self.draws += int(np.size(out))
        return out


@dataclass
class ForwardContext:
    """Per-pass state: mode flags, RNG sources and optional weight noise.

    Sources are derived from ``(seed, sample, source_id)`` so that a pass is
    reproducible on its own and independent of the order passes run in.
    """

    training: bool = False
    stochastic: bool = False
    seed: int = 0
    sample: int = 0
    weight_noise: Optional["WeightNoise"] = None
    sources: Dict[int, RngSource] = field(default_factory=dict)

    def source(self, source_id: int, kind: str = "generic") -> RngSource:
        src = self.sources.get(source_id)
        if src is None:
            if kind == "scale":
                for other in self.sources.values():
                    if other.kind == "scale":
                        raise ConfigurationError(
                            f"scale dropout source {source_id} registered while "
                            f"source {other.source_id} already drives scale dropout; "
                            "a model may own only one scale dropout source")
            ss = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(self.sample), int(source_id)])
            src = RngSource(ss, source_id, kind)
            self.sources[source_id] = src
        elif src.kind != kind:
            raise ConfigurationError(f"source {source_id} used as both {src.kind!r} and {kind!r}")
        return src

    @property
    def total_draws(self) -> int:
        return sum(s.draws for s in self.sources.values())


class WeightNoise:
    """Multiplicative log-normal weight perturbation, fresh on every call.

    Used for variation-aware training: ``w * exp(eps)``, ``eps ~ N(0, sigma^2)``.
    With ``sigma == 0`` weights pass through untouched and no variates are drawn.
    """

    def __init__(self, sigma: float, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = float(sigma)
        self.gen = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5641]))
        self.calls = 0
        self.draws = 0

    def perturb(self, w: np.ndarray) -> np.ndarray:
        self.calls += 1
        if self.sigma == 0.0:
            return w
        eps = self.gen.standard_normal(w.shape)
        self.draws += eps.size
        return (w * np.exp(self.sigma * eps)).astype(w.dtype, copy=False)


class Layer:
    kind = "Layer"
    stochastic = False

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.stats: Dict[str, np.ndarray] = {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for d in (self.params, self.stats):
            for k, v in d.items():
                d[k] = v.astype(dtype)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def __repr__(self) -> str:
        return f"{self.kind}()"


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, binary: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.binary = binary
        self.params["W"] = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.params["b"] = np.zeros(out_features)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"Dense expects input shape ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def effective_weight(self) -> np.ndarray:
        W = self.params["W"]
        return binarize_ste(W) if self.binary else W

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense expects (N, {self.in_features}), got {x.shape}")
        W = self.effective_weight()
        if ctx.weight_noise is not None:
            W = ctx.weight_noise.perturb(W)
        self._x, self._W = x, W
        return x @ W.T + self.params["b"]

    def backward(self, dy):
        dW = dy.T @ self._x
        if self.binary:
            dW = binarize_ste_grad(self.params["W"], dW)
        self.grads["W"] = dW
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self._W

    def __repr__(self):
        return f"Dense({self.in_features}, {self.out_features}{', binary' if self.binary else ''})"


class Conv2d(Layer):
    """Stride-1 convolution with 'same' zero padding (odd kernel sizes)."""

    kind = "Conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 binary: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigurationError("'same' padding needs an odd kernel size")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        bound = 1.0 / np.sqrt(fan_in)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.binary = binary
        self.params["W"] = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
        self.params["b"] = np.zeros(out_channels)

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"Conv2d expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
        return (self.out_channels, input_shape[1], input_shape[2])

    def effective_weight(self) -> np.ndarray:
        W = self.params["W"]
        return binarize_ste(W) if self.binary else W

    def im2col(self, x: np.ndarray) -> np.ndarray:
        """(N, C, H, W) -> (N*H*W, C*k*k) patch matrix."""
        p = self.k // 2
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.k * self.k)

    def col2im(self, cols: np.ndarray, shape: tuple) -> np.ndarray:
        n, c, h, w = shape
        p, k = self.k // 2, self.k
        cols = cols.reshape(n, h, w, c, k, k)
        out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return out[:, :, p:p + h, p:p + w]

    @staticmethod
    def rows_to_maps(y: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
        return y.reshape(n, h, w, -1).transpose(0, 3, 1, 2)

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2d expects (N, {self.in_channels}, H, W), got {x.shape}")
        W = self.effective_weight()
        if ctx.weight_noise is not None:
            W = ctx.weight_noise.perturb(W)
        cols = self.im2col(x)
        Wm = W.reshape(self.out_channels, -1)
        self._cols, self._Wm, self._shape = cols, Wm, x.shape
        y = cols @ Wm.T + self.params["b"]
        n, _, h, w = x.shape
        return self.rows_to_maps(y, n, h, w)

    def backward(self, dy):
        dyf = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dW = (dyf.T @ self._cols).reshape(self.params["W"].shape)
        if self.binary:
            dW = binarize_ste_grad(self.params["W"], dW)
        self.grads["W"] = dW
        self.grads["b"] = dyf.sum(axis=0)
        return self.col2im(dyf @ self._Wm, self._shape)

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, k={self.k}{', binary' if self.binary else ''})"


def _channel_axes(x: np.ndarray):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"expected a 2-D or 4-D batch, got {x.ndim}-D")


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(num_features)
        self.params["beta"] = np.zeros(num_features)
        self.stats["running_mean"] = np.zeros(num_features)
        self.stats["running_var"] = np.ones(num_features)

    def output_shape(self, input_shape):
        if input_shape[0] != self.num_features:
            raise ShapeError(f"BatchNorm expects {self.num_features} channels, got {tuple(input_shape)}")
        return tuple(input_shape)

    def forward(self, x, ctx):
        axes, bshape = _channel_axes(x)
        if x.shape[1] != self.num_features:
            raise ShapeError(f"BatchNorm expects {self.num_features} channels, got {x.shape}")
        if ctx.training:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // self.num_features
            m = self.momentum
            unbiased = var * n / max(n - 1, 1)
            self.stats["running_mean"] = ((1 - m) * self.stats["running_mean"] + m * mu).astype(x.dtype)
            self.stats["running_var"] = ((1 - m) * self.stats["running_var"] + m * unbiased).astype(x.dtype)
        else:
            mu = self.stats["running_mean"]
            var = self.stats["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
        self._xhat, self._inv_std, self._train, self._axes, self._bshape = xhat, inv_std, ctx.training, axes, bshape
        return self.params["gamma"].reshape(bshape) * xhat + self.params["beta"].reshape(bshape)

    def backward(self, dy):
        axes, bshape, xhat = self._axes, self._bshape, self._xhat
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * self.params["gamma"].reshape(bshape)
        inv_std = self._inv_std.reshape(bshape)
        if not self._train:
            return dxhat * inv_std
        n = dy.size // self.num_features
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return inv_std * (n * dxhat - s1 - xhat * s2) / n

    def __repr__(self):
        return f"BatchNorm({self.num_features})"


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, ctx):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Sign(Layer):
    """Binary activation; straight-through gradient inside [-1, 1]."""

    kind = "Sign"

    def forward(self, x, ctx):
        self._x = x
        return sign(x)

    def backward(self, dy):
        return binarize_ste_grad(self._x, dy)


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, ctx):
        self._y = softmax(x, axis=1)
        return self._y

    def backward(self, dy):
        y = self._y
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, ctx):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


WEIGHT_LAYERS = (Dense, Conv2d)
