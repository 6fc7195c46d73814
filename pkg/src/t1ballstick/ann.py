"""Self-supervised MLP fitting.

The network maps a voxel's normalized signal to the 7 model parameters; the
clamped parameters go back through the forward model and the loss is the
mean squared reconstruction error. Everything (ELU layers, dropout, clamp,
physics Jacobian, Adam) is plain numpy so gradients are inspectable.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionProtocol, SignalMatrix
from .model import DEFAULT_BOUNDS, DEFAULT_OPTIONS, N_PARAMS, ModelOptions, ParamBounds, jacobian_batch, predict_batch

log = logging.getLogger(__name__)

N_HIDDEN = 3


@dataclass
class MlpWeights:
    """Dense layers as (W, b) pairs; ``W`` is (fan_in, fan_out)."""

    layers: list

    @property
    def shapes(self) -> list:
        return [(W.shape, b.shape) for W, b in self.layers]

    def copy(self) -> "MlpWeights":
        return MlpWeights([(W.copy(), b.copy()) for W, b in self.layers])

    def flat(self) -> list:
        return [a for pair in self.layers for a in pair]

    def save(self, path) -> Path:
        """Little-endian float64 tensors back to back, shapes in a JSON manifest beside them."""
        path = Path(path)
        with path.open("wb") as fh:
            for a in self.flat():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        manifest = {
            "dtype": "<f8",
            "order": "C",
            "tensors": [
                {"name": f"{kind}{i}", "shape": list(a.shape)}
                for i, (W, b) in enumerate(self.layers)
                for kind, a in (("W", W), ("b", b))
            ],
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "MlpWeights":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        raw = np.fromfile(path, dtype="<f8")
        tensors, pos = [], 0
        for t in manifest["tensors"]:
            size = int(np.prod(t["shape"]))
            tensors.append(raw[pos : pos + size].reshape(t["shape"]).astype(float))
            pos += size
        if pos != raw.size:
            raise ValueError(f"{path}: {raw.size} values but manifest describes {pos}")
        return cls([(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    dropout_rate: float = 0.5
    patience: int = 10
    max_epochs: int = 1000
    seed: int = 0
    bounds: ParamBounds = field(default=DEFAULT_BOUNDS)
    opts: ModelOptions = field(default=DEFAULT_OPTIONS)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    hidden_width: int | None = None  # None -> number of measurements

    def __post_init__(self):
        if not (self.learning_rate >= 0 and self.batch_size > 0 and self.patience > 0 and self.max_epochs > 0):
            raise ValueError("learning_rate must be >= 0; batch_size, patience and max_epochs positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("bounds", "opts")}
        d["bounds"] = self.bounds.as_dict()
        d["model_options"] = self.opts.as_dict()
        return d


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based, 0 before any epoch
    stopped_epoch: int = 0
    aborted: str | None = None
    wall_time: float = 0.0

    @property
    def best_loss(self) -> float:
        return self.losses[self.best_epoch - 1] if self.best_epoch else float("inf")


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def init_weights(n_meas: int, seed: int, width: int | None = None, n_out: int = N_PARAMS) -> MlpWeights:
    """Glorot-uniform weights and zero biases for ``n_meas -> width x3 -> n_out``."""
    if n_meas <= 0:
        raise ValueError("n_meas must be positive")
    width = n_meas if width is None else width
    rng = np.random.default_rng(seed)
    sizes = [n_meas] + [width] * N_HIDDEN + [n_out]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpWeights(layers)


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def make_dropout_masks(rng: np.random.Generator, n_rows: int, weights: MlpWeights, rate: float) -> list | None:
    """Inverted-dropout masks for the hidden layers: 0 or 1/(1-rate)."""
    if rate == 0:
        return None
    keep = 1.0 - rate
    return [(rng.random((n_rows, W.shape[1])) < keep) / keep for W, _ in weights.layers[:-1]]


def _forward(weights, batch, masks):
    h = np.asarray(batch, dtype=float)
    cache = []
    for li, (W, b) in enumerate(weights.layers[:-1]):
        z = h @ W + b
        a = _elu(z)
        if masks is not None:
            a = a * masks[li]
        cache.append((h, z))
        h = a
    W, b = weights.layers[-1]
    raw = h @ W + b
    cache.append((h, None))
    return raw, cache


def mlp_forward(weights: MlpWeights, batch, dropout_masks=None, bounds: ParamBounds = DEFAULT_BOUNDS):
    """Raw network outputs (k, 7) and the same outputs clamped to ``bounds``."""
    raw, _ = _forward(weights, batch, dropout_masks)
    return raw, np.clip(raw, bounds.lo, bounds.hi)


def reconstruction_loss(weights, batch, protocol, opts=DEFAULT_OPTIONS, dropout_masks=None, bounds=DEFAULT_BOUNDS) -> float:
    _, params = mlp_forward(weights, batch, dropout_masks, bounds)
    return float(np.mean((np.asarray(batch) - predict_batch(params, protocol, opts)) ** 2))


def backward(weights, batch, protocol, opts=DEFAULT_OPTIONS, dropout_masks=None, bounds=DEFAULT_BOUNDS):
    """Loss, per-voxel losses and gradients ``[(dW, db), ...]`` matching ``weights.layers``.

    The clamp passes gradient where ``lo <= raw <= hi`` and blocks it outside.
    """
    S = np.asarray(batch, dtype=float)
    raw, cache = _forward(weights, S, dropout_masks)
    lo, hi = bounds.lo, bounds.hi
    params = np.clip(raw, lo, hi)
    S_hat, J = jacobian_batch(params, protocol, opts)
    resid = S_hat - S
    per_voxel = np.mean(resid**2, axis=1)
    loss = float(np.mean(per_voxel))

    d_shat = 2.0 * resid / resid.size
    d_params = np.einsum("km,kmp->kp", d_shat, J)
    delta = d_params * ((raw >= lo) & (raw <= hi))

    grads = [None] * len(weights.layers)
    h, _ = cache[-1]
    W, _ = weights.layers[-1]
    grads[-1] = (h.T @ delta, delta.sum(axis=0))
    d_h = delta @ W.T
    for li in range(len(weights.layers) - 2, -1, -1):
        h_in, z = cache[li]
        if dropout_masks is not None:
            d_h = d_h * dropout_masks[li]
        d_z = d_h * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
        W, _ = weights.layers[li]
        grads[li] = (h_in.T @ d_z, d_z.sum(axis=0))
        if li:
            d_h = d_z @ W.T
    return loss, per_voxel, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: MlpWeights) -> "AdamState":
        return cls([np.zeros_like(a) for a in weights.flat()], [np.zeros_like(a) for a in weights.flat()])


def adam_step(weights: MlpWeights, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, in place; returns ``(weights, state)``."""
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    params = weights.flat()
    flat_grads = [g for pair in grads for g in pair]
    for p, g, m, v in zip(params, flat_grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return weights, state


def train(signals: SignalMatrix, protocol: AcquisitionProtocol, config: TrainConfig = TrainConfig(), weights=None):
    """Train to patience on one dataset, returning the best-epoch weights and the history.

    The epoch loss is the mean of per-voxel training losses (dropout active),
    reduced in voxel order so it does not depend on the shuffle. The final
    partial batch is kept.
    """
    if not signals.normalized:
        raise ValueError("train expects normalized signals")
    signals.check_paired(protocol)
    X = signals.values
    n = X.shape[0]
    rng = np.random.default_rng(config.seed)
    if weights is None:
        weights = init_weights(X.shape[1], int(rng.integers(2**63)), config.hidden_width)
    else:
        rng.integers(2**63)
    state = AdamState.zeros_like(weights)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = weights.copy()
    per_voxel = np.empty(n)
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            masks = make_dropout_masks(rng, idx.size, weights, config.dropout_rate)
            _, batch_losses, grads = backward(weights, X[idx], protocol, config.opts, masks, config.bounds)
            per_voxel[idx] = batch_losses
            adam_step(weights, grads, state, config)
        epoch_loss = float(np.mean(per_voxel))
        history.losses.append(epoch_loss)
        history.stopped_epoch = epoch
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(a)) for a in weights.flat()):
            history.aborted = f"non-finite loss or weights at epoch {epoch}"
            log.error(history.aborted)
            break
        stop = stopper.update(epoch, epoch_loss)
        if stopper.best_epoch == epoch:
            best = weights.copy()
        log.debug("epoch %d loss %.6g (best %.6g @ %d)", epoch, epoch_loss, stopper.best, stopper.best_epoch)
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    history.wall_time = time.perf_counter() - t0
    if history.aborted:
        raise TrainingError(history.aborted, history)
    return best, history


class TrainingError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def infer(weights: MlpWeights, signals, bounds: ParamBounds = DEFAULT_BOUNDS, block: int = 256) -> np.ndarray:
    """Clamped parameter estimates (n_voxels, 7), dropout off.

    Rows go through the network in zero-padded blocks of a fixed size, so
    every matrix product has the same shape and a voxel's estimate does not
    depend on which other voxels share its call.
    """
    X = signals.values if isinstance(signals, SignalMatrix) else np.atleast_2d(np.asarray(signals, dtype=float))
    n = X.shape[0]
    out = np.empty((n, N_PARAMS))
    buf = np.zeros((block, X.shape[1]))
    for start in range(0, n, block):
        stop = min(n, start + block)
        buf[: stop - start] = X[start:stop]
        buf[stop - start :] = 0.0
        _, est = mlp_forward(weights, buf, None, bounds)
        out[start:stop] = est[: stop - start]
    return out
