"""Sequential model container, losses and the functional forward/backward API."""

from __future__ import annotations

import copy
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .layers import ForwardContext, Layer, ShapeError, WeightNoise, softmax

TRAIN = "train"
EVAL = "eval"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value!r} at batch {batch_index}")
        self.batch_index = batch_index
        self.value = value


class Model:
    """An ordered stack of layers with a fixed input shape.

    ``mode`` is ``"train"`` or ``"eval"``. In eval mode every stochastic
    layer is deterministic and batch-norm uses running statistics; the
    stochastic-but-frozen regime used by Monte-Carlo inference is requested
    per call through ``stochastic=True``.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], seed: int = 0,
                 dtype=np.float32, n_classes: Optional[int] = None):
        self.layers: List[Layer] = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.mode = EVAL
        self.dtype = np.dtype(dtype)
        self.n_classes = n_classes
        self.shapes = self._infer_shapes()
        for layer in self.layers:
            layer.astype(self.dtype)

    def _infer_shapes(self) -> List[tuple]:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return shapes

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    def train(self) -> "Model":
        self.mode = TRAIN
        return self

    def eval(self) -> "Model":
        self.mode = EVAL
        return self

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(self.dtype)
        return self

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def parameters(self) -> Iterator[Tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                yield f"{i}.{name}", layer, name

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, v in layer.params.items():
                out[f"{i}.{name}"] = v.copy()
            for name, v in layer.stats.items():
                out[f"{i}.stats.{name}"] = v.copy()
        return out

    def context(self, stochastic: Optional[bool] = None, sample: int = 0,
                weight_noise: Optional[WeightNoise] = None, seed: Optional[int] = None) -> ForwardContext:
        training = self.mode == TRAIN
        return ForwardContext(
            training=training,
            stochastic=training if stochastic is None else bool(stochastic),
            seed=self.seed if seed is None else int(seed),
            sample=sample,
            weight_noise=weight_noise,
        )

    def check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                             f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        return x

    def forward(self, x: np.ndarray, *, stochastic: Optional[bool] = None, sample: int = 0,
                ctx: Optional[ForwardContext] = None, taps: Iterable[int] = ()) -> np.ndarray:
        """Run the stack. ``taps`` lists layer indices whose outputs are kept in ``self.tapped``."""
        x = self.check_input(x)
        if ctx is None:
            ctx = self.context(stochastic=stochastic, sample=sample)
        taps = set(taps)
        self.tapped: Dict[int, np.ndarray] = {}
        self.last_context = ctx
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, ctx)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            if i in taps:
                self.tapped[i] = x
        return x

    def backward(self, dout: np.ndarray, extra: Optional[Dict[int, np.ndarray]] = None) -> np.ndarray:
        """Backpropagate ``dout`` through the cached pass; ``extra`` injects gradients at layer outputs."""
        g = dout
        extra = extra or {}
        for i in range(len(self.layers) - 1, -1, -1):
            if i in extra:
                g = g + extra[i]
            g = self.layers[i].backward(g)
        return g

    def gradients(self) -> Dict[str, np.ndarray]:
        return {key: layer.grads[name] for key, layer, name in self.parameters()}

    def task_logits(self, out: np.ndarray) -> np.ndarray:
        return out[:, :self.n_classes] if self.n_classes else out

    def predict_proba(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        return np.concatenate([softmax(self.task_logits(self.forward(x[i:i + batch_size])))
                               for i in range(0, len(x), batch_size)])

    def predict(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        return np.concatenate([self.task_logits(self.forward(x[i:i + batch_size])).argmax(axis=1)
                               for i in range(0, len(x), batch_size)])

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        mode = self.mode
        self.eval()
        try:
            return float((self.predict(x) == np.asarray(y)).mean())
        finally:
            self.mode = mode

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Model(input={self.input_shape}, [{body}])"


def one_hot(y: np.ndarray, n: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(y), n), dtype=dtype)
    out[np.arange(len(y)), y] = 1
    return out


def cross_entropy(logits: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy. ``target`` holds integer labels or one-hot rows."""
    n, c = logits.shape
    t = np.asarray(target)
    if t.ndim == 1:
        t = one_hot(t.astype(int), c, logits.dtype)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-(t * logp).sum() / n)
    return loss, ((np.exp(logp) - t) / n).astype(logits.dtype)


def mse(out: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Squared L2 error per sample, averaged over the batch."""
    diff = out - np.asarray(target, dtype=out.dtype).reshape(out.shape)
    n = out.shape[0]
    return float((diff ** 2).sum() / n), (2.0 * diff / n).astype(out.dtype)


LOSSES = {"cross_entropy": cross_entropy, "CrossEntropy": cross_entropy, "mse": mse, "MSE": mse}


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Forward pass in the model's current mode."""
    if not model.layers:
        return np.asarray(x, dtype=model.dtype)
    return model.forward(x)


def backward(model: Model, x: np.ndarray, target: np.ndarray, loss: str = "cross_entropy",
             batch_index: int = 0) -> Dict[str, np.ndarray]:
    """Gradients of ``loss`` for every trainable parameter plus ``"input"``.

    The model must be in train mode. Keys are ``"<layer>.<param>"``.
    """
    if model.mode != TRAIN:
        raise RuntimeError("backward requires the model to be in train mode")
    out = model.forward(x)
    value, dout = LOSSES[loss](out, target)
    if not np.isfinite(value):
        raise NonFiniteLossError(batch_index, value)
    dx = model.backward(dout)
    grads = model.gradients()
    grads["input"] = dx
    return grads
