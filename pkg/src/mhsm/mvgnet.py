"""Early Fusion expert: an MLP emitting a bivariate Gaussian over the two hazard labels.

The network's five raw outputs are ``[mu_flood, mu_landslide, a, l21, b]``
where ``exp(a)`` and ``exp(b)`` are the diagonal of the lower-triangular
Cholesky factor L and ``l21`` its off-diagonal entry. The loss is the
Gaussian negative log-likelihood written through L.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .config import MvgConfig
from .errors import DimensionError, NumericError
from .layers import (GELU, Adam, Dense, Dropout, GaussianNoise, LayerNorm,
                     layers_to_list, load_layer_params, restore, snapshot)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
N_OUT = 5


class MvgNet:
    """Dense blocks (Dense -> LayerNorm -> GELU -> Dropout); the first block adds a
    linear projection of its input (residual); a linear head produces 5 values."""

    def __init__(self, n_in: int, hidden=(256, 128, 64), dropout: float = 0.10,
                 noise_std: float = 0.01, clamp: float = 8.0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.hidden = list(hidden)
        self.dropout = dropout
        self.noise_std = noise_std
        self.clamp = clamp
        self.noise = GaussianNoise(noise_std)
        self.blocks = []
        width = n_in
        for h in self.hidden:
            self.blocks.append([Dense(width, h, rng), LayerNorm(h), GELU(), Dropout(dropout)])
            width = h
        self.proj = Dense(n_in, self.hidden[0], rng)
        self.head = Dense(width, N_OUT, rng)
        self.head.params["b"][:] = 0.0

    @property
    def layers(self):
        out = [layer for block in self.blocks for layer in block if layer.params]
        return out + [self.proj, self.head]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise DimensionError(f"network expects {self.n_in} features, got {x.shape[1]}")
        h0 = self.noise.forward(x, train, rng)
        h = h0
        for i, block in enumerate(self.blocks):
            for layer in block:
                h = layer.forward(h, train, rng)
            if i == 0:
                h = h + self.proj.forward(h0)
        return self.head.forward(h)

    def backward(self, d_raw):
        d = self.head.backward(d_raw)
        d_in = None
        for i in range(len(self.blocks) - 1, -1, -1):
            if i == 0:
                d_in = self.proj.backward(d)
            for layer in reversed(self.blocks[i]):
                d = layer.backward(d)
        return d + d_in

    def to_dict(self) -> dict:
        return {"n_in": self.n_in, "hidden": self.hidden, "dropout": self.dropout,
                "noise_std": self.noise_std, "clamp": self.clamp, "layers": layers_to_list(self.layers)}

    @classmethod
    def from_dict(cls, d: dict) -> "MvgNet":
        net = cls(d["n_in"], d["hidden"], d["dropout"], d["noise_std"], d["clamp"])
        load_layer_params(net.layers, d["layers"])
        return net


def mvg_forward(net: MvgNet, x, train_mode: bool = False, rng=None) -> np.ndarray:
    return net.forward(x, train_mode, rng)


def assemble_cholesky(tail, clamp: float = 8.0):
    """(a, l21, b) -> (L, Sigma) with l11 = exp(clamp(a)), l22 = exp(clamp(b))."""
    t = np.asarray(tail, dtype=np.float64)
    single = t.ndim == 1
    t = t.reshape(-1, 3)
    l11 = np.exp(np.clip(t[:, 0], -clamp, clamp))
    l21 = t[:, 1]
    l22 = np.exp(np.clip(t[:, 2], -clamp, clamp))
    L = np.zeros((len(t), 2, 2))
    L[:, 0, 0], L[:, 1, 0], L[:, 1, 1] = l11, l21, l22
    S = np.empty((len(t), 2, 2))
    S[:, 0, 0] = l11 * l11
    S[:, 0, 1] = S[:, 1, 0] = l11 * l21
    S[:, 1, 1] = l21 * l21 + l22 * l22
    return (L[0], S[0]) if single else (L, S)


def mvg_nll(mu, L, y):
    """Per-sample NLL: log(2 pi) + log l11 + log l22 + 1/2 |L^-1 (y - mu)|^2 (D = 2)."""
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = mu.ndim == 1
    mu, y, L = mu.reshape(-1, 2), y.reshape(-1, 2), L.reshape(-1, 2, 2)
    r = y - mu
    z1 = r[:, 0] / L[:, 0, 0]
    z2 = (r[:, 1] - L[:, 1, 0] * z1) / L[:, 1, 1]
    out = LOG_2PI + np.log(L[:, 0, 0]) + np.log(L[:, 1, 1]) + 0.5 * (z1 * z1 + z2 * z2)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite MVG negative log-likelihood")
    return float(out[0]) if single else out


def mvg_loss_and_grad(raw, y, clamp: float = 8.0):
    """Mean NLL over the batch and its gradient with respect to the raw outputs."""
    raw = np.asarray(raw, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(raw)
    a_c = np.clip(raw[:, 2], -clamp, clamp)
    b_c = np.clip(raw[:, 4], -clamp, clamp)
    l11, l21, l22 = np.exp(a_c), raw[:, 3], np.exp(b_c)
    r1 = y[:, 0] - raw[:, 0]
    r2 = y[:, 1] - raw[:, 1]
    z1 = r1 / l11
    z2 = (r2 - l21 * z1) / l22
    loss = LOG_2PI + a_c + b_c + 0.5 * (z1 * z1 + z2 * z2)
    mean = float(loss.mean())
    if not math.isfinite(mean):
        raise NumericError("non-finite MVG negative log-likelihood")
    dz1 = z1 - z2 * l21 / l22
    g = np.empty_like(raw)
    g[:, 0] = -dz1 / l11
    g[:, 1] = -z2 / l22
    g[:, 2] = np.where(np.abs(raw[:, 2]) < clamp, 1.0 - dz1 * z1, 0.0)
    g[:, 3] = -z2 * z1 / l22
    g[:, 4] = np.where(np.abs(raw[:, 4]) < clamp, 1.0 - z2 * z2, 0.0)
    return mean, g / n


@dataclass
class MvgOutput:
    mu: np.ndarray
    L: np.ndarray
    Sigma: np.ndarray
    rho: np.ndarray
    logdet: np.ndarray


def mvg_outputs(raw, clamp: float = 8.0) -> MvgOutput:
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, N_OUT)
    L, S = assemble_cholesky(raw[:, 2:], clamp)
    l21, l22 = L[:, 1, 0], L[:, 1, 1]
    rho = l21 / np.sqrt(l21 * l21 + l22 * l22)
    logdet = 2.0 * (np.log(L[:, 0, 0]) + np.log(l22))
    return MvgOutput(raw[:, :2].copy(), L, S, rho, logdet)


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "best_epoch": self.best_epoch, "epochs_run": self.epochs_run}


def _val_nll(net, X, Y):
    return float(np.mean(mvg_nll(*_mu_L(net.forward(X), net.clamp), Y)))


def _mu_L(raw, clamp):
    L, _ = assemble_cholesky(raw[:, 2:], clamp)
    return raw[:, :2], L


def mvg_train(net: MvgNet, X_train, Y_train, X_val, Y_val, cfg: MvgConfig, seed=0) -> TrainLog:
    """Adam on mean NLL with early stopping on validation NLL; best weights restored."""
    X_train = np.asarray(X_train, dtype=np.float64)
    Y_train = np.asarray(Y_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    Y_val = np.asarray(Y_val, dtype=np.float64)
    if len(X_train) == 0 or len(X_val) == 0:
        raise DimensionError("training and validation splits must be non-empty")
    rng = np.random.default_rng(seed)
    opt = Adam(net.layers, cfg.lr)
    log = TrainLog()
    best = math.inf
    best_params = snapshot(net.layers)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(X_train))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            net.zero_grad()
            raw = net.forward(X_train[idx], True, rng)
            loss, g = mvg_loss_and_grad(raw, Y_train[idx], net.clamp)
            net.backward(g)
            opt.step()
            total += loss * len(idx)
        log.train_loss.append(total / len(X_train))
        try:
            v = _val_nll(net, X_val, Y_val)
        except NumericError:
            raise NumericError(f"validation NLL diverged at epoch {epoch}") from None
        log.val_loss.append(v)
        log.epochs_run = epoch + 1
        if v < best:
            best, log.best_epoch = v, epoch
            best_params = snapshot(net.layers)
        elif epoch - log.best_epoch > cfg.patience:
            break
    restore(net.layers, best_params)
    logger.debug("mvg: %d epochs, best val NLL %.4f at epoch %d", log.epochs_run, best, log.best_epoch)
    return log


P_CLIP = 1e-6


@dataclass
class BetaCalibrator:
    """p' = sigmoid(a ln p - b ln(1 - p) + c), with a, b >= 0."""

    a: float = 1.0
    b: float = 1.0
    c: float = 0.0
    degenerate: bool = False

    def apply(self, p) -> np.ndarray:
        p = np.clip(np.asarray(p, dtype=np.float64), P_CLIP, 1.0 - P_CLIP)
        z = self.a * np.log(p) - self.b * np.log1p(-p) + self.c
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def to_dict(self):
        return {"a": self.a, "b": self.b, "c": self.c, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d):
        return cls(d["a"], d["b"], d["c"], d.get("degenerate", False))


def beta_calibrate_fit(p_val, y_val) -> BetaCalibrator:
    p = np.clip(np.asarray(p_val, dtype=np.float64).ravel(), P_CLIP, 1.0 - P_CLIP)
    y = np.asarray(y_val, dtype=np.float64).ravel()
    if y.min() == y.max():
        return BetaCalibrator(degenerate=True)
    F = np.column_stack([np.log(p), -np.log1p(-p), np.ones_like(p)])

    def objective(theta):
        z = F @ theta
        nll = np.mean(np.logaddexp(0.0, z) - y * z)
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return nll, F.T @ (s - y) / len(y)

    res = minimize(objective, np.array([1.0, 1.0, 0.0]), jac=True, method="L-BFGS-B",
                   bounds=[(0.0, None), (0.0, None), (None, None)])
    a, b, c = res.x
    return BetaCalibrator(float(a), float(b), float(c))


def beta_apply(cal: BetaCalibrator, p) -> np.ndarray:
    return cal.apply(p)


@dataclass
class EfPrediction:
    s: np.ndarray       # (n, 2) calibrated probabilities
    logdet: np.ndarray
    rho: np.ndarray


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def ef_predict(net: MvgNet, cal_f: BetaCalibrator, cal_l: BetaCalibrator, x,
               batch: int = 65536) -> EfPrediction:
    x = np.asarray(x, dtype=np.float64).reshape(-1, net.n_in)
    raw = np.concatenate([net.forward(x[s:s + batch]) for s in range(0, len(x), batch)]) \
        if len(x) else np.empty((0, N_OUT))
    out = mvg_outputs(raw, net.clamp)
    p = sigmoid(out.mu)
    s = np.column_stack([cal_f.apply(p[:, 0]), cal_l.apply(p[:, 1])])
    return EfPrediction(s, out.logdet, out.rho)
