"""Soft-gating mixture over the Late Fusion and Early Fusion experts.

The gate sees only the four expert probabilities
``[p_LF_flood, p_LF_landslide, p_EF_flood, p_EF_landslide]`` and returns one
weight pair ``(w_LF, w_EF)`` that is applied to both hazards.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .config import GateConfig
from .errors import DimensionError, ValidationError
from .layers import (Adam, Dense, Dropout, ReLU, layers_to_list, load_layer_params,
                     restore, snapshot, softmax)
from .mvgnet import TrainLog

logger = logging.getLogger(__name__)

P_EPS = 1e-7


class GateNetwork:
    def __init__(self, hidden=(32, 16), dropout=(0.20, 0.10), rng: np.random.Generator | None = None,
                 zero: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = list(hidden)
        self.dropout = list(dropout)
        self.stack = []
        width = 4
        for h, p in zip(self.hidden, self.dropout):
            self.stack += [Dense(width, h, rng, zero), ReLU(), Dropout(p)]
            width = h
        self.stack.append(Dense(width, 2, rng, zero))

    @property
    def layers(self):
        return [layer for layer in self.stack if layer.params]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def logits(self, z, train=False, rng=None):
        h = z
        for layer in self.stack:
            h = layer.forward(h, train, rng)
        return h

    def backward(self, d_logits):
        d = d_logits
        for layer in reversed(self.stack):
            d = layer.backward(d)
        return d

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "dropout": self.dropout, "layers": layers_to_list(self.layers)}

    @classmethod
    def from_dict(cls, d: dict) -> "GateNetwork":
        g = cls(d["hidden"], d["dropout"])
        load_layer_params(g.layers, d["layers"])
        return g


def _check_z(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != 4:
        raise DimensionError(f"gate input must have 4 columns, got {z.shape[1]}")
    if np.any(~np.isfinite(z)) or np.any((z < 0) | (z > 1)):
        raise ValidationError("gate inputs must be probabilities in [0, 1]")
    return z


def gate_forward(g: GateNetwork, z, train=False, rng=None) -> np.ndarray:
    """(n, 2) weights: column 0 = w_LF, column 1 = w_EF."""
    return softmax(g.logits(_check_z(z), train, rng))


def moe_combine(w, p_lf, p_ef) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1, 2)
    p_lf = np.asarray(p_lf, dtype=np.float64).reshape(-1, 2)
    p_ef = np.asarray(p_ef, dtype=np.float64).reshape(-1, 2)
    p = w[:, :1] * p_lf + w[:, 1:] * p_ef
    # weights sum to 1 only up to rounding
    return np.clip(p, np.minimum(p_lf, p_ef), np.maximum(p_lf, p_ef))


def smooth_labels(y, eps: float = 0.05):
    return np.asarray(y, dtype=np.float64) * (1.0 - eps) + 0.5 * eps


def gate_loss_and_grad(g: GateNetwork, z, y_smooth, train=False, rng=None):
    """Mean BCE over samples and both hazards; backpropagates into the gate."""
    z = _check_z(z)
    w = softmax(g.logits(z, train, rng))
    p_lf, p_ef = z[:, :2], z[:, 2:]
    p = moe_combine(w, p_lf, p_ef)
    pc = np.clip(p, P_EPS, 1.0 - P_EPS)
    loss = -(y_smooth * np.log(pc) + (1 - y_smooth) * np.log(1 - pc))
    n = len(z)
    dp = np.where((p > P_EPS) & (p < 1 - P_EPS), (pc - y_smooth) / (pc * (1 - pc)), 0.0) / (2 * n)
    dw = np.column_stack([(dp * p_lf).sum(1), (dp * p_ef).sum(1)])
    d_logits = w * (dw - (dw * w).sum(1, keepdims=True))
    g.backward(d_logits)
    return float(loss.mean())


def moe_train(g: GateNetwork, z_train, y_train, z_val, y_val, cfg: GateConfig, seed=0) -> TrainLog:
    """Fit the gate with Adam; expert outputs in ``z`` are frozen inputs."""
    z_train, z_val = _check_z(z_train), _check_z(z_val)
    y_train = np.asarray(y_train, dtype=np.float64).reshape(-1, 2)
    y_val = np.asarray(y_val, dtype=np.float64).reshape(-1, 2)
    if len(z_train) == 0 or len(z_val) == 0:
        raise DimensionError("gate training and validation sets must be non-empty")
    if np.all(y_train == y_train[0]):
        raise ValidationError("gate labels are degenerate (every sample identical)")
    ys_train = smooth_labels(y_train, cfg.label_smoothing)
    ys_val = smooth_labels(y_val, cfg.label_smoothing)
    rng = np.random.default_rng(seed)
    opt = Adam(g.layers, cfg.lr)
    log = TrainLog()
    best = math.inf
    best_params = snapshot(g.layers)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(z_train))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            g.zero_grad()
            total += gate_loss_and_grad(g, z_train[idx], ys_train[idx], True, rng) * len(idx)
            opt.step()
        log.train_loss.append(total / len(z_train))
        v = _bce(moe_predict(g, z_val), ys_val)
        log.val_loss.append(v)
        log.epochs_run = epoch + 1
        if v < best:
            best, log.best_epoch = v, epoch
            best_params = snapshot(g.layers)
        elif epoch - log.best_epoch > cfg.patience:
            break
    restore(g.layers, best_params)
    logger.debug("gate: %d epochs, best val BCE %.4f", log.epochs_run, best)
    return log


def _bce(p, y):
    p = np.clip(p, P_EPS, 1 - P_EPS)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def moe_predict(g: GateNetwork, z) -> np.ndarray:
    z = _check_z(z)
    return moe_combine(gate_forward(g, z), z[:, :2], z[:, 2:])
