"""Minimal numpy layers with explicit backward passes, plus Adam.

Each layer caches what its backward pass needs during ``forward``. Parameters
live in ``layer.params`` and gradients (accumulated by ``backward``) in
``layer.grads`` under the same keys.
"""
from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        super().__init__()
        if zero or rng is None:
            W = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / math.sqrt(n_in)
            W = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.params = {"W": W, "b": np.zeros(n_out)}
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        self.x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, d):
        self.grads["W"] += self.x.T @ d
        self.grads["b"] += d.sum(axis=0)
        return d @ self.params["W"].T


class LayerNorm(Layer):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.params = {"gain": np.ones(dim), "bias": np.zeros(dim)}
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - mu) * self.inv
        return self.xhat * self.params["gain"] + self.params["bias"]

    def backward(self, d):
        self.grads["gain"] += (d * self.xhat).sum(axis=0)
        self.grads["bias"] += d.sum(axis=0)
        dx = d * self.params["gain"]
        return self.inv * (dx - dx.mean(axis=1, keepdims=True)
                           - self.xhat * (dx * self.xhat).mean(axis=1, keepdims=True))


class GELU(Layer):
    """tanh approximation."""

    def forward(self, x, train=False, rng=None):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, d):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return d * (0.5 * (1.0 + t) + 0.5 * x * dt)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        self.mask = x > 0
        return x * self.mask

    def backward(self, d):
        return d * self.mask


class Dropout(Layer):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p <= 0:
            self.mask = None
            return x
        self.mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self.mask

    def backward(self, d):
        return d if self.mask is None else d * self.mask


class GaussianNoise(Layer):
    def __init__(self, std: float):
        super().__init__()
        self.std = std

    def forward(self, x, train=False, rng=None):
        if not train or self.std <= 0:
            return x
        return x + rng.normal(0.0, self.std, size=x.shape)

    def backward(self, d):
        return d


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Adam:
    def __init__(self, layers, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.slots = [(layer, k) for layer in layers for k in layer.params]
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(layer.params[k]) for layer, k in self.slots]
        self.v = [np.zeros_like(layer.params[k]) for layer, k in self.slots]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (layer, k) in enumerate(self.slots):
            g = layer.grads[k]
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            layer.params[k] -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def layers_to_list(layers) -> list:
    return [{k: v.tolist() for k, v in layer.params.items()} for layer in layers]


def load_layer_params(layers, data) -> None:
    for layer, d in zip(layers, data):
        for k in layer.params:
            layer.params[k] = np.array(d[k], dtype=np.float64)
        layer.zero_grad()


def snapshot(layers) -> list:
    return [{k: v.copy() for k, v in layer.params.items()} for layer in layers]


def restore(layers, snap) -> None:
    for layer, d in zip(layers, snap):
        for k, v in d.items():
            layer.params[k] = v.copy()
