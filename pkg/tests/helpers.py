"""Shared test utilities: random small networks and a finite-difference checker."""

import numpy as np

from cimlab import bayesian
from cimlab.nn import BatchNorm, Conv2d, Dense, Flatten, Model, ReLU, Softmax, backward
from cimlab.nn.model import LOSSES


def random_net(rng: np.random.Generator, conv: bool = False):
    """A small float64 network with random widths and layer mix, plus an input batch and target."""
    layers = []
    if conv:
        c_in, hw = int(rng.integers(1, 3)), int(rng.integers(3, 5))
        shape = (c_in, hw, hw)
        c_out = int(rng.integers(2, 4))
        layers += [Conv2d(c_in, c_out, 3, rng=rng), BatchNorm(c_out), ReLU()]
        if rng.random() < 0.5:
            layers.append(bayesian.SpatialDropout(0.3))
        layers.append(Flatten())
        width = c_out * hw * hw
    else:
        width = int(rng.integers(2, 6))
        shape = (width,)
    for _ in range(int(rng.integers(1, 3))):
        h = int(rng.integers(3, 7))
        layers.append(Dense(width, h, rng=rng))
        choice = rng.integers(0, 4)
        if choice == 1:
            layers.append(bayesian.InvertedNormAffine(h, delta=0.2, p=0.5))
        else:
            layers.append(BatchNorm(h))
        if choice == 2:
            layers.append(bayesian.ScaleDropout(h, p=0.3))
        elif choice == 3:
            layers.append(bayesian.ScaleVI(h))
        layers.append(ReLU())
        if rng.random() < 0.3:
            layers.append(bayesian.NeuronDropout(0.2))
        width = h
    n_out = int(rng.integers(2, 5))
    layers.append(Dense(width, n_out, rng=rng))
    loss = "cross_entropy"
    if rng.random() < 0.3:
        layers.append(Softmax())
        loss = "mse"
    model = Model(layers, shape, seed=int(rng.integers(1 << 16)), dtype=np.float64, n_classes=n_out)
    model.train()
    n = int(rng.integers(4, 9))
    x = rng.standard_normal((n,) + shape)
    if loss == "mse":
        target = rng.random((n, n_out))
    else:
        target = rng.integers(0, n_out, n)
    return model, x, target, loss


def loss_value(model, x, target, loss):
    return LOSSES[loss](model.forward(x), target)[0]


def gradcheck(model, x, target, loss, eps=1e-6):
    """Relative error between analytic and central-difference gradients.

    All parameter and input gradients are concatenated into one vector and
    compared with ||a - n|| / (||a|| + ||n||), which stays meaningful when
    some entries are analytically zero.
    """
    analytic = backward(model, x, target, loss)
    a_parts, n_parts = [], []
    for key, layer, name in model.parameters():
        p = layer.params[name]
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            up = loss_value(model, x, target, loss)
            p[idx] = old - eps
            down = loss_value(model, x, target, loss)
            p[idx] = old
            num[idx] = (up - down) / (2 * eps)
        a_parts.append(np.ravel(analytic[key]))
        n_parts.append(num.ravel())
    xs = x.copy()
    num = np.zeros_like(xs)
    for idx in np.ndindex(xs.shape):
        old = xs[idx]
        xs[idx] = old + eps
        up = loss_value(model, xs, target, loss)
        xs[idx] = old - eps
        down = loss_value(model, xs, target, loss)
        xs[idx] = old
        num[idx] = (up - down) / (2 * eps)
    a_parts.append(np.ravel(analytic["input"]))
    n_parts.append(num.ravel())
    a = np.concatenate(a_parts)
    n = np.concatenate(n_parts)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return float(np.linalg.norm(a - n) / denom) if denom > 0 else 0.0
