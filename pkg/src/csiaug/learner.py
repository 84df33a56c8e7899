"""Fully connected position regressor written against numpy.

The network is ``Linear -> ReLU -> Dropout`` repeated ``hidden_layers`` times
followed by a linear 2-output head. The first ``feature_extractor_depth``
hidden blocks form the feature extractor used in transfer learning; the
remaining blocks plus the output layer form the head.

Training minimizes the mean squared Euclidean position error with
minibatch Adam and decoupled weight decay. Inputs are standardized per
dimension with statistics taken from the measured training samples, and
labels are centered on their measured mean.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, Origin, RngStream
from .dataset import Dataset

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Features


def vectorize(csi) -> np.ndarray:
    """Flatten ``(..., n_ap, n_rx, M)`` CSI to real features.

    Layout is AP-major, then antenna; within each (AP, antenna) block the M
    real parts come before the M imaginary parts.
    """
    csi = np.asarray(csi)
    if csi.ndim < 3:
        raise DimensionError("expected (..., n_ap, n_rx, M) CSI")
    parts = np.stack([csi.real, csi.imag], axis=-2)
    return parts.reshape(csi.shape[:-3] + (-1,)).astype(np.float64)


def feature_dim(n_subcarriers: int, n_ap: int, n_rx: int) -> int:
    return n_subcarriers * n_ap * n_rx * 2


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_layers: int = 3
    hidden_width: int = 128
    dropout_p: float = 0.2
    feature_extractor_depth: int = 2

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_layers < 0 or self.hidden_width < 1:
            raise ValueError("input_dim, hidden_width must be >= 1 and hidden_layers >= 0")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if not 0 <= self.feature_extractor_depth < self.hidden_layers + 1:
            raise ValueError("feature_extractor_depth must be < hidden_layers + 1")

    @classmethod
    def paper_scale(cls, input_dim: int) -> MlpConfig:
        return cls(input_dim, hidden_layers=4, hidden_width=512, dropout_p=0.2, feature_extractor_depth=2)

    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [2]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    seed: int = 0
    keep_best: bool = True
    # arithmetic precision of the training loop; parameters are stored as float64
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


# ---------------------------------------------------------------------------
# Model


def _init_layer(gen: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = gen.uniform(-bound, bound, (fan_in, fan_out))
    b = gen.uniform(-bound, bound, fan_out)
    return w, b


@dataclass
class Model:
    config: MlpConfig
    weights: list
    biases: list
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def init(cls, config: MlpConfig, seed: int, x_mean=None, x_std=None, y_mean=None) -> Model:
        gen = RngStream(seed, (7,)).generator()
        sizes = config.layer_sizes()
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            w, bias = _init_layer(gen, a, b)
            ws.append(w)
            bs.append(bias)
        d = config.input_dim
        return cls(
            config,
            ws,
            bs,
            np.zeros(d) if x_mean is None else np.asarray(x_mean, dtype=np.float64),
            np.ones(d) if x_std is None else np.asarray(x_std, dtype=np.float64),
            np.zeros(2) if y_mean is None else np.asarray(y_mean, dtype=np.float64),
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def feature_params(self) -> list[np.ndarray]:
        k = self.config.feature_extractor_depth
        return [p for i in range(k) for p in (self.weights[i], self.biases[i])]

    def head_params(self) -> list[np.ndarray]:
        k = self.config.feature_extractor_depth
        return [p for i in range(k, self.n_layers) for p in (self.weights[i], self.biases[i])]

    def reinit_head(self, seed: int) -> None:
        gen = RngStream(seed, (8,)).generator()
        sizes = self.config.layer_sizes()
        for i in range(self.config.feature_extractor_depth, self.n_layers):
            self.weights[i], self.biases[i] = _init_layer(gen, sizes[i], sizes[i + 1])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_flat_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for i in range(self.n_layers):
            for arr_list in (self.weights, self.biases):
                a = arr_list[i]
                arr_list[i] = flat[pos : pos + a.size].reshape(a.shape).copy()
                pos += a.size
        if pos != flat.size:
            raise ValueError("parameter vector has the wrong length")

    # -- forward / backward on standardized inputs ---------------------------

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def forward(self, z: np.ndarray, gen: np.random.Generator | None = None):
        """Forward pass on standardized inputs. Dropout runs only when ``gen`` is given."""
        cache = []
        a = z
        p = self.config.dropout_p
        for i in range(self.n_layers - 1):
            pre = a @ self.weights[i] + self.biases[i]
            act = np.maximum(pre, 0.0)
            mask = None
            if gen is not None and p > 0:
                mask = (gen.random(act.shape) >= p) / (1.0 - p)
                act = act * mask
            cache.append((a, pre, mask))
            a = act
        out = a @ self.weights[-1] + self.biases[-1]
        cache.append((a, None, None))
        return out, cache

    def backward(self, cache, dout: np.ndarray):
        """Gradients of ``sum(dout * out)`` w.r.t. every weight and bias."""
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        g = dout
        for i in range(self.n_layers - 1, -1, -1):
            a, _, _ = cache[i]
            gw[i] = a.T @ g
            gb[i] = g.sum(axis=0)
            if i == 0:
                break
            g = g @ self.weights[i].T
            _, pre, mask = cache[i - 1]
            if mask is not None:
                g = g * mask
            g = g * (pre > 0)
        return gw, gb

    def loss_and_grad(self, z: np.ndarray, y_centered: np.ndarray, gen=None):
        """Mean over the batch of squared Euclidean error, per-sample losses and gradients."""
        out, cache = self.forward(z, gen)
        diff = out - y_centered
        per_sample = np.sum(diff**2, axis=1)
        n = z.shape[0]
        gw, gb = self.backward(cache, 2.0 * diff / n)
        return float(per_sample.mean()), per_sample, gw, gb

    # -- inference on raw features -------------------------------------------

    def predict_features(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.input_dim:
            raise DimensionError(f"feature length {x.shape[-1]} != model input {self.config.input_dim}")
        out = np.empty((x.shape[0], 2))
        for s in range(0, x.shape[0], batch):
            out[s : s + batch] = self.forward(self.normalize(x[s : s + batch]))[0]
        return out + self.y_mean

    def predict(self, dataset: Dataset) -> np.ndarray:
        return self.predict_features(vectorize(dataset.csi))


# ---------------------------------------------------------------------------
# Optimizer


class AdamW:
    """Adam with decoupled weight decay over one flat parameter vector.

    ``flat`` is updated in place, so arrays that view into it see every step.
    """

    def __init__(self, flat: np.ndarray, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.flat = flat
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros_like(flat)
        self.v = np.zeros_like(flat)
        self._buf = np.empty_like(flat)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        m, v, buf, p = self.m, self.v, self._buf, self.flat
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        np.multiply(grad, grad, out=buf)
        buf *= 1 - self.b2
        v += buf
        p *= 1 - self.lr * self.wd
        np.sqrt(v, out=buf)
        buf *= 1.0 / np.sqrt(c2)
        buf += self.eps
        np.divide(m, buf, out=buf)
        buf *= self.lr / c1
        p -= buf


def _pack(model: Model, layers, dtype):
    """Move the given layers' parameters into one flat buffer and make them views of it."""
    arrays = [a for i in layers for a in (model.weights[i], model.biases[i])]
    flat = np.concatenate([a.ravel() for a in arrays]).astype(dtype)
    pos = 0
    for i in layers:
        for lst in (model.weights, model.biases):
            a = lst[i]
            lst[i] = flat[pos : pos + a.size].reshape(a.shape)
            pos += a.size
    return flat


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainTrace:
    per_sample_avg_loss: np.ndarray
    epoch_train_loss: np.ndarray
    epoch_val_loss: np.ndarray
    best_epoch: int


def normalization_stats(dataset: Dataset):
    """Feature mean/std and label mean from the measured samples (all samples if none are measured)."""
    mask = dataset.origin == Origin.MEASURED
    src = dataset.subset(np.flatnonzero(mask)) if mask.any() else dataset
    x = vectorize(src.csi)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))), std, 1.0)
    std = np.where(std > 0, std, 1.0)
    return mean, std, src.labels.mean(axis=0)


def _fit(model: Model, train_set: Dataset, val_set: Dataset | None, cfg: TrainConfig, first_trainable: int = 0):
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    dtype = np.dtype(cfg.precision)
    x = model.normalize(vectorize(train_set.csi)).astype(dtype)
    if x.shape[1] != model.config.input_dim:
        raise DimensionError(f"feature length {x.shape[1]} != model input {model.config.input_dim}")
    y = (train_set.labels - model.y_mean).astype(dtype)
    have_val = val_set is not None and len(val_set) > 0
    if have_val:
        xv = model.normalize(vectorize(val_set.csi)).astype(dtype)
        yv = val_set.labels - model.y_mean

    layers = list(range(first_trainable, model.n_layers))
    flat = _pack(model, layers, dtype)
    grad = np.empty_like(flat)
    opt = AdamW(flat, cfg.learning_rate, cfg.weight_decay)
    gen = RngStream(cfg.seed, (11,)).generator()

    n = x.shape[0]
    loss_sum = np.zeros(n)
    epoch_train = np.zeros(cfg.epochs)
    epoch_val = np.full(cfg.epochs, np.nan)
    best_score, best_flat, best_epoch = np.inf, None, cfg.epochs - 1
    for epoch in range(cfg.epochs):
        order = gen.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, per_sample, gw, gb = model.loss_and_grad(x[idx], y[idx], gen)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}; "
                    "lower the learning rate or check the inputs for exploding values"
                )
            loss_sum[idx] += per_sample
            total += loss * idx.size
            pos = 0
            for i in layers:
                for g in (gw[i], gb[i]):
                    grad[pos : pos + g.size] = g.ravel()
                    pos += g.size
            opt.step(grad)
        epoch_train[epoch] = total / n
        if have_val:
            out = model.forward(xv)[0]
            epoch_val[epoch] = float(np.mean(np.sum((out - yv) ** 2, axis=1)))
            if cfg.keep_best and epoch_val[epoch] < best_score:
                best_score, best_flat, best_epoch = epoch_val[epoch], flat.copy(), epoch
    if best_flat is not None:
        flat[...] = best_flat
    for i in layers:
        model.weights[i] = model.weights[i].astype(np.float64)
        model.biases[i] = model.biases[i].astype(np.float64)
    trace = TrainTrace(loss_sum / cfg.epochs, epoch_train, epoch_val, int(best_epoch))
    return model, trace


def train(train_set: Dataset, val_set: Dataset | None, mlp: MlpConfig | None = None, cfg: TrainConfig | None = None):
    """Train a fresh model; returns ``(model, trace)``."""
    cfg = cfg or TrainConfig()
    d = feature_dim(train_set.meta.n_subcarriers, train_set.meta.n_ap, train_set.meta.n_rx)
    mlp = mlp or MlpConfig(d)
    if mlp.input_dim != d:
        raise DimensionError(f"MlpConfig.input_dim={mlp.input_dim} but data has D={d}")
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    mean, std, y_mean = normalization_stats(train_set)
    model = Model.init(mlp, cfg.seed, mean, std, y_mean)
    return _fit(model, train_set, val_set, cfg)


def evaluate_rmse(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return rmse(model.predict(dataset), dataset.labels)


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if pred.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    # exactly rounded sum, so the result does not depend on sample order
    return math.sqrt(math.fsum(np.sum((pred - truth) ** 2, axis=1)) / pred.shape[0])


# ---------------------------------------------------------------------------
# Sample difficulty


def rank_difficulty(trace_or_losses, rho_hs: float):
    """Split indices into ``(hard, easy)`` by average training loss.

    ``hard`` holds the ``ceil(N * rho_hs)`` highest-loss samples in
    descending-loss order; ``easy`` holds the rest in ascending-loss order,
    so ``easy[:k]`` are the ``k`` easiest. Ties go to the lower index first.
    """
    if not 0 < rho_hs <= 1:
        raise ValueError("rho_hs must lie in (0, 1]")
    losses = getattr(trace_or_losses, "per_sample_avg_loss", trace_or_losses)
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    n = losses.size
    k = int(np.ceil(n * rho_hs - 1e-9))
    desc = np.argsort(-losses, kind="stable")
    hard = desc[:k]
    rest = desc[k:]
    easy = rest[np.lexsort((rest, losses[rest]))]
    return hard, easy


def copies_for_ratio(rho_hs: float) -> int:
    return int(round(1.0 / rho_hs))


def augment_selected(dataset: Dataset, indices, method: str, rho_hs: float, rng, **params) -> Dataset:
    """Augment only ``indices`` with ``round(1 / rho_hs)`` copies each; others pass through once."""
    from .augment import augment_indices

    if not 0 < rho_hs <= 1:
        raise ValueError("rho_hs must lie in (0, 1]")
    return augment_indices(dataset, indices, copies_for_ratio(rho_hs), method, rng, **params)


# ---------------------------------------------------------------------------
# Transfer


FULL_FINE_TUNE = "full"
FREEZE_FEATURES = "freeze"


def transfer(source: Model, target_train: Dataset, target_val: Dataset | None, mode: str, cfg: TrainConfig | None = None):
    """Adapt ``source`` to a target domain.

    ``mode="full"`` continues training every parameter; ``mode="freeze"``
    keeps the feature extractor fixed and trains a freshly initialized head.
    The source model is not modified.
    """
    cfg = cfg or TrainConfig()
    d = feature_dim(target_train.meta.n_subcarriers, target_train.meta.n_ap, target_train.meta.n_rx)
    if d != source.config.input_dim:
        raise DimensionError(f"target data has D={d}, source model expects {source.config.input_dim}")
    model = source.copy()
    if mode == FULL_FINE_TUNE:
        return _fit(model, target_train, target_val, cfg, first_trainable=0)
    if mode == FREEZE_FEATURES:
        model.reinit_head(cfg.seed)
        return _fit(model, target_train, target_val, cfg, first_trainable=source.config.feature_extractor_depth)
    raise ValueError(f"unknown transfer mode {mode!r}")


# ---------------------------------------------------------------------------
# Checkpoints
#
# "CSIM" | u16 version | u32 input_dim | u32 hidden_layers | u32 hidden_width
# | f64 dropout_p | u32 feature_extractor_depth | D f64 x_mean | D f64 x_std
# | 2 f64 y_mean | u64 n_params | n_params f64 (per layer: W row-major, then b)

CKPT_MAGIC = b"CSIM"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHIIIdI")


class CheckpointError(ValueError):
    pass


def save_model(model: Model, path) -> None:
    c = model.config
    flat = model.flat_params()
    with open(path, "wb") as f:
        f.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, c.input_dim, c.hidden_layers, c.hidden_width, c.dropout_p, c.feature_extractor_depth))
        f.write(model.x_mean.astype("<f8").tobytes())
        f.write(model.x_std.astype("<f8").tobytes())
        f.write(model.y_mean.astype("<f8").tobytes())
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.astype("<f8").tobytes())


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a CSIM checkpoint")
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    _, ver, d, hl, hw, p, fe = _CKPT_HEAD.unpack_from(data, 0)
    if ver != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {ver}")
    cfg = MlpConfig(d, hl, hw, p, fe)
    pos = _CKPT_HEAD.size
    need = pos + 8 * (2 * d + 2) + 8
    if len(data) < need:
        raise CheckpointError(f"{path}: truncated")
    x_mean = np.frombuffer(data, "<f8", d, pos).copy()
    pos += 8 * d
    x_std = np.frombuffer(data, "<f8", d, pos).copy()
    pos += 8 * d
    y_mean = np.frombuffer(data, "<f8", 2, pos).copy()
    pos += 16
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) != pos + 8 * n:
        raise CheckpointError(f"{path}: parameter block length mismatch")
    model = Model.init(cfg, 0, x_mean, x_std, y_mean)
    model.set_flat_params(np.frombuffer(data, "<f8", n, pos))
    return model
