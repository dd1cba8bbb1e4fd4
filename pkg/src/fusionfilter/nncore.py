"""Small deterministic feed-forward networks trained with Adam on BCE.

Parameters of a model live in one flat float64 vector, layer by layer: the
weight matrix (fan_in x fan_out, row-major) then the bias. ``weights`` and
``biases`` are views into that vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ShapeError
from .seeding import derive_seed

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("sigmoid", "relu")

# Scores are clipped to this band before taking logs.
_SCORE_EPS = 1e-15


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"an MLP needs at least 2 layer widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return param_count(self)


def param_count(spec: MlpSpec) -> int:
    w = spec.layer_widths
    return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


class MlpModel:
    """Parameters of one MLP plus the MlpSpec and the seed they were drawn from."""

    def __init__(self, spec: MlpSpec, params: np.ndarray, rng_seed: int):
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.ndim != 1 or params.size != spec.n_params:
            raise ShapeError(
                f"spec {spec.layer_widths} needs {spec.n_params} parameters, got {params.shape}"
            )
        self.spec = spec
        self.params = params
        self.rng_seed = int(rng_seed)
        self._widths = np.asarray(spec.layer_widths, dtype=np.int64)

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def weights(self) -> list[np.ndarray]:
        return [w for w, _ in self._layers()]

    @property
    def biases(self) -> list[np.ndarray]:
        return [b for _, b in self._layers()]

    def _layers(self):
        w = self.spec.layer_widths
        p = 0
        out = []
        for i in range(len(w) - 1):
            W = self.params[p:p + w[i] * w[i + 1]].reshape(w[i], w[i + 1])
            p += w[i] * w[i + 1]
            b = self.params[p:p + w[i + 1]]
            p += w[i + 1]
            out.append((W, b))
        return out

    def with_params(self, params: np.ndarray) -> "MlpModel":
        return MlpModel(self.spec, np.array(params, dtype=np.float64), self.rng_seed)

    def copy(self) -> "MlpModel":
        return self.with_params(self.params)

    def same_parameters(self, other: "MlpModel") -> bool:
        return self.spec == other.spec and np.array_equal(self.params, other.params)

    def __repr__(self):
        return f"MlpModel(widths={self.spec.layer_widths}, n_params={self.n_params})"


def init_model(spec: MlpSpec, seed: int) -> MlpModel:
    """Uniform fan-in/fan-out init in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(tuple(spec))
    rng = np.random.default_rng(int(seed))
    chunks = []
    w = spec.layer_widths
    for i in range(len(w) - 1):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        chunks.append(rng.uniform(-limit, limit, size=w[i] * w[i + 1]))
        chunks.append(np.zeros(w[i + 1]))
    return MlpModel(spec, np.concatenate(chunks), seed)


def _as_batch(x, width: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"expected input width {width}, got shape {np.shape(x)}")
    return np.ascontiguousarray(arr), single


def forward_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Forward a (batch, width) array; returns a fresh (batch, n_outputs) array."""
    X, _ = _as_batch(X, model.spec.n_inputs)
    if X.shape[0] == 0:
        return np.zeros((0, model.spec.n_outputs))
    acts = np.empty(X.shape[0] * sum(model.spec.layer_widths[1:]))
    out = kernels.mlp_forward(
        model.params, model._widths, model.spec.output_activation == "relu", X, acts
    )
    return np.array(out)


def forward(model: MlpModel, x) -> np.ndarray:
    """Scores for one input vector (or a batch of row vectors)."""
    X, single = _as_batch(x, model.spec.n_inputs)
    out = forward_batch(model, X)
    return out[0] if single else out


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy over all entries."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if s.size == 0:
        raise ShapeError("bce_loss of an empty vector")
    s = np.clip(s, _SCORE_EPS, 1.0 - _SCORE_EPS)
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log1p(-s)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay_gamma: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    validation_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ConfigError("lr_decay_gamma must be in (0, 1]")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must be in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        return self.learning_rate * self.lr_decay_gamma ** epoch


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    val_loss: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.epochs]


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split; the validation side gets at least one row."""
    if n < 2:
        raise ConfigError(f"need at least 2 examples to hold out a validation split, got {n}")
    order = np.random.default_rng(derive_seed(seed, "val-split")).permutation(n)
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


LossGrad = Callable[[np.ndarray, np.ndarray, np.ndarray], float]
LossOnly = Callable[[np.ndarray, np.ndarray], float]


def fit_adam(
    params: np.ndarray,
    n_examples: int,
    loss_grad: LossGrad,
    eval_loss: LossOnly,
    config: TrainConfig,
) -> tuple[np.ndarray, TrainLog]:
    """Generic minibatch Adam loop with per-epoch exponential LR decay.

    ``loss_grad(params, idx, grad_out)`` returns the mean loss over rows
    ``idx`` and writes its gradient into ``grad_out``. ``eval_loss(params,
    idx)`` returns the mean loss only. Returns the snapshot with the lowest
    validation loss and the per-epoch log.
    """
    train_idx, val_idx = split_indices(n_examples, config.validation_fraction, config.seed)
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    params = np.array(params, dtype=np.float64)
    grad = np.zeros_like(params)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    best = params.copy()
    log = TrainLog()
    step = 0
    bs = config.batch_size
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = train_idx[shuffle_rng.permutation(train_idx.size)]
        total = 0.0
        for start in range(0, order.size, bs):
            idx = order[start:start + bs]
            total += loss_grad(params, idx, grad) * idx.size
            step += 1
            kernels.adam_update(
                params, grad, m, v, lr,
                config.adam_beta1, config.adam_beta2, config.adam_epsilon, step,
            )
        val = eval_loss(params, val_idx)
        log.epochs.append(EpochRecord(epoch, lr, total / order.size, val))
        if val < log.best_val_loss:
            log.best_val_loss = val
            log.best_epoch = epoch
            best = params.copy()
    return best, log


class _MlpObjective:
    """BCE objective for a sigmoid-output MLP over fixed (X, Y) arrays."""

    def __init__(self, spec: MlpSpec, X: np.ndarray, Y: np.ndarray, max_batch: int):
        self.widths = np.asarray(spec.layer_widths, dtype=np.int64)
        self.X = X
        self.Y = Y
        self.acts = np.empty(max(max_batch, 1) * sum(spec.layer_widths[1:]))

    def loss_grad(self, params, idx, grad):
        xb = self.X[idx]
        yb = self.Y[idx]
        out = kernels.mlp_forward(params, self.widths, False, xb, self.acts)
        loss = bce_loss(out, yb)
        dz = (out - yb) / out.size
        kernels.mlp_backward(params, self.widths, xb, self.acts, dz, grad)
        return loss

    def eval_loss(self, params, idx):
        xb = self.X[idx]
        acts = np.empty(idx.size * int(self.widths[1:].sum()))
        out = kernels.mlp_forward(params, self.widths, False, xb, acts)
        return bce_loss(out, self.Y[idx])


def train(model: MlpModel, X, Y, config: TrainConfig) -> tuple[MlpModel, TrainLog]:
    """Train a sigmoid-output MLP on (X, Y) with BCE; returns the best-validation snapshot."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigError("training set is empty")
    if X.shape[0] != Y.shape[0]:
        raise ConfigError(f"{X.shape[0]} inputs but {Y.shape[0]} label rows")
    if X.shape[1] != model.spec.n_inputs:
        raise ConfigError(f"input width {X.shape[1]} != model width {model.spec.n_inputs}")
    if Y.shape[1] != model.spec.n_outputs:
        raise ConfigError(f"label width {Y.shape[1]} != model outputs {model.spec.n_outputs}")
    if model.spec.output_activation != "sigmoid":
        raise ConfigError("train() needs a sigmoid output layer")
    objective = _MlpObjective(model.spec, X, Y, config.batch_size)
    best, log = fit_adam(model.params, X.shape[0], objective.loss_grad, objective.eval_loss, config)
    return model.with_params(best), log


# -- serialization ----------------------------------------------------------
#
# Binary layout, little-endian:
#   magic  b"FFMLP\x00\x00\x00" (8 bytes)
#   u32 format version, u32 layer count (widths), u32[] widths
#   u8 hidden activation code, u8 output activation code, 2 pad bytes
#   u64 rng seed, u64 parameter count
#   f64[] parameters in flat layer order (row-major W, then b, per layer)

MODEL_MAGIC = b"FFMLP\x00\x00\x00"
MODEL_FORMAT_VERSION = 1


def dumps_model(model: MlpModel) -> bytes:
    spec = model.spec
    widths = spec.layer_widths
    head = MODEL_MAGIC + struct.pack("<II", MODEL_FORMAT_VERSION, len(widths))
    head += struct.pack(f"<{len(widths)}I", *widths)
    head += struct.pack(
        "<BBxxQQ",
        HIDDEN_ACTIVATIONS.index(spec.hidden_activation),
        OUTPUT_ACTIVATIONS.index(spec.output_activation),
        model.rng_seed & 0xFFFFFFFFFFFFFFFF,
        model.n_params,
    )
    return head + model.params.astype("<f8").tobytes()


def loads_model(data: bytes) -> MlpModel:
    if data[:8] != MODEL_MAGIC:
        raise DataError("not a model file (bad magic)")
    try:
        version, n_widths = struct.unpack_from("<II", data, 8)
        if version != MODEL_FORMAT_VERSION:
            raise DataError(f"unsupported model format version {version}")
        off = 16
        widths = struct.unpack_from(f"<{n_widths}I", data, off)
        off += 4 * n_widths
        hid, out, seed, n_params = struct.unpack_from("<BBxxQQ", data, off)
        off += struct.calcsize("<BBxxQQ")
        spec = MlpSpec(widths, HIDDEN_ACTIVATIONS[hid], OUTPUT_ACTIVATIONS[out])
        params = np.frombuffer(data, dtype="<f8", count=n_params, offset=off).astype(np.float64)
    except (struct.error, ValueError, IndexError) as exc:
        raise DataError(f"truncated or corrupt model file: {exc}") from None
    return MlpModel(spec, params, seed)


def save_model(model: MlpModel, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_model(model))
    return path


def load_model(path) -> MlpModel:
    return loads_model(Path(path).read_bytes())

