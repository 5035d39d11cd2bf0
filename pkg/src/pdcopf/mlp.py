"""Feedforward predictor of the scaling vector from nodal demand.

``beta_hat = W3 relu(W2 relu(W1 x + b1) + b2) + b3`` with ``x = [pd, qd]``,
trained on the demand-weighted loss::

    (1/B) sum_n |(beta_hat_n - beta*_n) * pd_n|^2
      + (rho/B) sum_n ((beta_hat_n - beta*_n) . pd_n)^2

Weights are stored as ``(fan_in, fan_out)`` arrays so a batch is ``X @ W + b``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dcopf import ScalingVector

log = logging.getLogger(__name__)

MODEL_SCHEMA = "pdcopf.mlp"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    network_hash: str = ""

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weights {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def initialize(cls, dims, seed: int = 0, network_hash: str = "") -> "MlpModel":
        """Uniform fan-in initialization ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(ws, bs, network_hash=network_hash)

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        None if self.input_mean is None else self.input_mean.copy(),
                        None if self.input_scale is None else self.input_scale.copy(),
                        self.network_hash)

    # serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "version": 1,
            "dims": self.dims,
            "activation": "relu",
            "network_hash": self.network_hash,
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_mean": None if self.input_mean is None else self.input_mean.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise ValueError("not a model document")
        dims = d["dims"]
        ws = [np.asarray(w, dtype=float).reshape(a, b) for w, a, b in zip(d["weights"], dims[:-1], dims[1:])]
        bs = [np.asarray(b, dtype=float) for b in d["biases"]]
        opt = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(ws, bs, opt("input_mean"), opt("input_scale"), d.get("network_hash", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 500
    batch_size: int = 64
    rho: float = 1.0
    seed: int = 0
    hidden: tuple = (512, 256)
    standardize: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.epochs, self.batch_size) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def default_hidden(n_bus: int) -> tuple:
    return (512, 256) if n_bus <= 57 else (1024, 512)


# ---------------------------------------------------------------------------------
# forward / loss / backward


def _prepare(model: MlpModel, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dims[0]:
        raise ValueError(f"input has width {x.shape[-1]}, model expects {model.dims[0]}")
    if model.input_mean is not None:
        x = (x - model.input_mean) / model.input_scale
    return x


def _forward_cache(model: MlpModel, x):
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Raw prediction (no clamping); ``x`` is one input vector or a batch."""
    xp = _prepare(model, x)
    single = xp.ndim == 1
    _, acts = _forward_cache(model, np.atleast_2d(xp))
    out = acts[-1]
    return out[0] if single else out


def predict_beta(model: MlpModel, pd, qd) -> ScalingVector:
    """Prediction clamped at zero for use in the scaled DC-OPF."""
    return ScalingVector.clamped(forward(model, np.concatenate([pd, qd])))


def loss_value(beta_hat, beta_star, pd, rho: float) -> float:
    e = (np.atleast_2d(beta_hat) - np.atleast_2d(beta_star)) * np.atleast_2d(pd)
    n = e.shape[0]
    return float(np.sum(e * e) / n + rho * np.sum(np.sum(e, axis=1) ** 2) / n)


def loss(model: MlpModel, x, pd, beta_star, rho: float) -> float:
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    return loss_value(forward(model, x), beta_star, pd, rho)


def loss_and_grad(model: MlpModel, x, pd, beta_star, rho: float):
    x = np.atleast_2d(_prepare(model, x))
    pd = np.atleast_2d(pd)
    beta_star = np.atleast_2d(beta_star)
    n = x.shape[0]
    pre, acts = _forward_cache(model, x)
    e = (acts[-1] - beta_star) * pd
    tot = np.sum(e, axis=1)
    val = float(np.sum(e * e) / n + rho * np.sum(tot * tot) / n)
    # d loss / d beta_hat
    delta = (2.0 / n) * (e * pd)
    if rho:
        delta = delta + (2.0 * rho / n) * tot[:, None] * pd
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0.0)
    return val, gw, gb


def gradient_check(model: MlpModel, x, pd, beta_star, rho: float, step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients."""
    if model.n_params > 200:
        raise ValueError("gradient check is meant for models with at most 200 parameters")
    _, gw, gb = loss_and_grad(model, x, pd, beta_star, rho)
    analytic = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair])
    params = [p for pair in zip(model.weights, model.biases) for p in pair]
    numeric = []
    for p in params:
        flat = p.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = loss(model, x, pd, beta_star, rho)
            flat[j] = keep - step
            down = loss(model, x, pd, beta_star, rho)
            flat[j] = keep
            numeric.append((up - down) / (2.0 * step))
    numeric = np.array(numeric)
    floor = 1e-8 * max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(rel, initial=0.0))


# ---------------------------------------------------------------------------------
# training


class _AdamW:
    """Adam with decoupled weight decay applied to weight matrices only."""

    def __init__(self, model: MlpModel, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in self._params(model)]
        self.v = [np.zeros_like(p) for p in self._params(model)]

    @staticmethod
    def _params(model):
        return [p for pair in zip(model.weights, model.biases) for p in pair]

    def step(self, model: MlpModel, gw, gb):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        grads = [g for pair in zip(gw, gb) for g in pair]
        for k, (p, g) in enumerate(zip(self._params(model), grads)):
            if k % 2 == 0 and cfg.weight_decay:
                p *= 1.0 - cfg.learning_rate * cfg.weight_decay
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.eps)


def train(x, pd, beta_star, config: TrainConfig | None = None, test=None, network_hash: str = "",
          model: MlpModel | None = None):
    """Mini-batch training; ``test`` is an optional ``(x, pd, beta_star)`` triple.

    Returns the final model and the per-epoch train/test loss history.
    """
    cfg = config or TrainConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pd = np.atleast_2d(np.asarray(pd, dtype=float))
    beta_star = np.atleast_2d(np.asarray(beta_star, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ValueError("training set must be nonempty")
    if model is None:
        dims = [x.shape[1], *cfg.hidden, beta_star.shape[1]]
        model = MlpModel.initialize(dims, cfg.seed, network_hash)
        if cfg.standardize:
            model.input_mean = x.mean(axis=0)
            model.input_scale = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = _AdamW(model, cfg)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            val, gw, gb = loss_and_grad(model, x[idx], pd[idx], beta_star[idx], cfg.rho)
            if not np.isfinite(val):
                raise TrainingDiverged(f"loss became {val} in epoch {epoch}")
            opt.step(model, gw, gb)
        tr = loss(model, x, pd, beta_star, cfg.rho)
        if not np.isfinite(tr):
            raise TrainingDiverged(f"train loss became {tr} after epoch {epoch}")
        hist.train_loss.append(tr)
        if test is not None and len(test[0]):
            hist.test_loss.append(loss(model, *test, cfg.rho))
    return model, hist


def train_on_dataset(train_set, config: TrainConfig | None = None, test_set=None):
    """Convenience wrapper over :class:`pdcopf.pipeline.Dataset` objects."""
    test = None
    if test_set is not None and len(test_set):
        test = (test_set.features(), test_set.demands(), test_set.betas())
    return train(train_set.features(), train_set.demands(), train_set.betas(), config, test,
                 network_hash=train_set.network_hash)
