"""Reference architectures: MLP-S and CONV-S, with optional binary and Bayesian variants."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import bayesian as bn
from .nn import BatchNorm, Conv2d, Dense, Flatten, Model, ReLU, Sign

VARIANTS = (None, "none", "neuron", "spatial", "scale", "vi", "affine")


def _hidden_block(layers, width, *, binary, variant, p, delta, prior_sigma, conv=False):
    if variant == "affine":
        layers.append(bn.InvertedNormAffine(width, delta=delta, p=p))
    else:
        layers.append(BatchNorm(width))
    if variant == "scale":
        layers.append(bn.ScaleDropout(width, p=p))
    elif variant == "vi":
        layers.append(bn.ScaleVI(width, prior_sigma=prior_sigma))
    layers.append(Sign() if binary else ReLU())
    if variant == "neuron":
        layers.append(bn.NeuronDropout(p))
    elif variant == "spatial":
        layers.append(bn.SpatialDropout(p))


def mlp_s(in_dim: int, n_classes: int, *, hidden: Sequence[int] = (128, 64), seed: int = 0,
          binary: bool = False, variant: Optional[str] = None, p: float = 0.1,
          delta: float = 0.1, prior_sigma: float = 0.25, dtype=np.float32) -> Model:
    """``in_dim``-128-64-``n_classes`` perceptron with batch-norm after every hidden layer."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D4C50]))
    layers = []
    width = in_dim
    for h in hidden:
        layers.append(Dense(width, h, binary=binary, rng=rng))
        _hidden_block(layers, h, binary=binary, variant=variant, p=p, delta=delta, prior_sigma=prior_sigma)
        width = h
    layers.append(Dense(width, n_classes, binary=binary, rng=rng))
    if binary:
        layers.append(BatchNorm(n_classes))
    model = Model(layers, (in_dim,), seed=seed, dtype=dtype, n_classes=n_classes)
    bn.validate_sources(model)
    return model


def conv_s(input_shape: Sequence[int], n_classes: int, *, channels: Sequence[int] = (8, 16),
           dense: int = 64, seed: int = 0, binary: bool = False, variant: Optional[str] = None,
           p: float = 0.1, delta: float = 0.1, prior_sigma: float = 0.25, dtype=np.float32) -> Model:
    """Two 3x3 conv blocks and two dense layers, batch-norm throughout."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    c, h, w = input_shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x434E4E]))
    layers = []
    width = c
    for ch in channels:
        layers.append(Conv2d(width, ch, 3, binary=binary, rng=rng))
        _hidden_block(layers, ch, binary=binary, variant=variant, p=p, delta=delta,
                      prior_sigma=prior_sigma, conv=True)
        width = ch
    layers.append(Flatten())
    layers.append(Dense(width * h * w, dense, binary=binary, rng=rng))
    dense_variant = "neuron" if variant == "spatial" else variant
    _hidden_block(layers, dense, binary=binary, variant=dense_variant, p=p, delta=delta, prior_sigma=prior_sigma)
    layers.append(Dense(dense, n_classes, binary=binary, rng=rng))
    if binary:
        layers.append(BatchNorm(n_classes))
    model = Model(layers, tuple(input_shape), seed=seed, dtype=dtype, n_classes=n_classes)
    bn.validate_sources(model)
    return model


def build(name: str, input_shape: Sequence[int], n_classes: int, **kw) -> Model:
    name = name.upper().replace("_", "-")
    if name == "MLP-S":
        return mlp_s(int(np.prod(input_shape)), n_classes, **kw)
    if name == "CONV-S":
        if len(input_shape) != 3:
            raise ValueError("CONV-S needs (C, H, W) inputs")
        return conv_s(input_shape, n_classes, **kw)
    raise ValueError(f"unknown architecture {name!r}")
