"""From-scratch fully connected classifier on numpy.

Architecture for input width N: four hidden blocks of widths 2N, 3N, 3N,
4N, each affine -> batch norm -> LeakyReLU -> inverted dropout, then an
affine output layer with 7 logits.  Training uses softmax cross-entropy
and Adam with bias correction.  Backpropagation goes through the
batch-statistics path of batch norm, so gradients are exact for the
train-mode forward pass.

Batch norm uses batch statistics in Train mode (updating running stats
with momentum 0.1) and running statistics in Eval mode.  Variances are
population variances throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

N_CLASSES = 7
HIDDEN_MULTIPLIERS = (2, 3, 3, 4)
N_HIDDEN = len(HIDDEN_MULTIPLIERS)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"FEDFLOWC"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss evaluates to a non-finite value."""


@dataclass
class TrainConfig:
    """Local training hyperparameters."""

    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 10
    dropout_p: float = 0.15
    leaky_slope: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch statistics")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


def layer_widths(input_dim: int) -> list[int]:
    return [input_dim] + [m * input_dim for m in HIDDEN_MULTIPLIERS] + [N_CLASSES]


def _tensor_names() -> list[str]:
    names = []
    for i in range(N_HIDDEN):
        names += [f"w{i}", f"b{i}", f"gamma{i}", f"beta{i}", f"run_mean{i}", f"run_var{i}"]
    names += [f"w{N_HIDDEN}", f"b{N_HIDDEN}"]
    return names


@dataclass
class ModelParams:
    """All model tensors in a fixed, named order.

    Trainable tensors are weights, biases and batch-norm gain/shift; the
    running batch-norm statistics ride along but are never touched by
    optimizers.
    """

    input_dim: int
    tensors: dict[str, np.ndarray]

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("run_")]

    def copy(self) -> "ModelParams":
        return ModelParams(self.input_dim, {k: v.copy() for k, v in self.tensors.items()})

    def shape_signature(self) -> tuple:
        return tuple((name, self.tensors[name].shape) for name in self.tensors)


def init_params(input_dim: int, seed: int) -> ModelParams:
    """Seeded initialization.

    Weights are uniform in +-sqrt(6 / fan_in) corrected for the LeakyReLU
    gain (gain^2 = 2 / (1 + slope^2)); biases and batch-norm shifts start
    at 0, gains at 1, running stats at (0, 1).
    """
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    widths = layer_widths(input_dim)
    slope = 0.1
    tensors: dict[str, np.ndarray] = {}
    for i in range(N_HIDDEN + 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = np.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
        tensors[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"b{i}"] = np.zeros(fan_out)
        if i < N_HIDDEN:
            tensors[f"gamma{i}"] = np.ones(fan_out)
            tensors[f"beta{i}"] = np.zeros(fan_out)
            tensors[f"run_mean{i}"] = np.zeros(fan_out)
            tensors[f"run_var{i}"] = np.ones(fan_out)
    ordered = {name: tensors[name] for name in _tensor_names()}
    return ModelParams(input_dim=input_dim, tensors=ordered)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def forward(params: ModelParams, inputs: np.ndarray, train: bool,
            dropout_p: float = 0.0, leaky_slope: float = 0.1,
            rng: np.random.Generator | None = None):
    """Run the network; returns (logits, cache).

    Train mode uses batch statistics (batch >= 2 required) and updates the
    running stats in place; Eval mode uses running stats and never applies
    dropout.  The cache holds everything `backward` needs.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"input width {x.shape[-1] if x.ndim else 0} does not match model dim {params.input_dim}"
        )
    if train and x.shape[0] < 2:
        raise ValueError("batch too small for batch statistics")
    if train and dropout_p > 0 and rng is None:
        raise ValueError("dropout in train mode requires an rng")

    t = params.tensors
    h = x
    layers = []
    for i in range(N_HIDDEN):
        z = h @ t[f"w{i}"] + t[f"b{i}"]
        if train:
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            t[f"run_mean{i}"] *= 1.0 - BN_MOMENTUM
            t[f"run_mean{i}"] += BN_MOMENTUM * mean
            t[f"run_var{i}"] *= 1.0 - BN_MOMENTUM
            t[f"run_var{i}"] += BN_MOMENTUM * var
        else:
            mean = t[f"run_mean{i}"]
            var = t[f"run_var{i}"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (z - mean) * inv_std
        bn_out = t[f"gamma{i}"] * x_hat + t[f"beta{i}"]
        act = np.where(bn_out > 0, bn_out, leaky_slope * bn_out)
        mask = None
        if train and dropout_p > 0:
            mask = (rng.random(act.shape) >= dropout_p) / (1.0 - dropout_p)
            act = act * mask
        layers.append((h, x_hat, inv_std, bn_out, mask))
        h = act
    logits = h @ t[f"w{N_HIDDEN}"] + t[f"b{N_HIDDEN}"]
    cache = (layers, h, leaky_slope)
    return logits, cache


def _backward(params: ModelParams, cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    layers, last_h, slope = cache
    t = params.tensors
    grads: dict[str, np.ndarray] = {}
    grads[f"w{N_HIDDEN}"] = last_h.T @ d_logits
    grads[f"b{N_HIDDEN}"] = d_logits.sum(axis=0)
    g = d_logits @ t[f"w{N_HIDDEN}"].T
    for i in reversed(range(N_HIDDEN)):
        h_in, x_hat, inv_std, bn_out, mask = layers[i]
        if mask is not None:
            g = g * mask
        g = g * np.where(bn_out > 0, 1.0, slope)
        grads[f"gamma{i}"] = (g * x_hat).sum(axis=0)
        grads[f"beta{i}"] = g.sum(axis=0)
        # Batch-norm backward through the batch statistics.
        d_xhat = g * t[f"gamma{i}"]
        m = g.shape[0]
        dz = (inv_std / m) * (
            m * d_xhat - d_xhat.sum(axis=0) - x_hat * (d_xhat * x_hat).sum(axis=0)
        )
        grads[f"w{i}"] = h_in.T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        g = dz @ t[f"w{i}"].T
    return grads


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    probs = softmax(logits)
    picked = probs[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(picked)))


def loss_and_grad(params: ModelParams, inputs: np.ndarray, targets: np.ndarray,
                  cfg: TrainConfig, rng: np.random.Generator | None = None):
    """Train-mode loss and exact gradients for every trainable tensor."""
    logits, cache = forward(
        params, inputs, train=True,
        dropout_p=cfg.dropout_p, leaky_slope=cfg.leaky_slope, rng=rng,
    )
    probs = softmax(logits)
    n = len(targets)
    loss = float(-np.mean(np.log(probs[np.arange(n), targets])))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite training loss: {loss}")
    d_logits = probs.copy()
    d_logits[np.arange(n), targets] -= 1.0
    d_logits /= n
    return loss, _backward(params, cache, d_logits)


# Evaluation runs in slices: forward keeps per-layer activations alive, so
# one full-corpus pass would need gigabytes.
EVAL_CHUNK = 8192


def eval_loss(params: ModelParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets)
    total = 0.0
    for start in range(0, x.shape[0], EVAL_CHUNK):
        stop = start + EVAL_CHUNK
        logits, _ = forward(params, x[start:stop], train=False)
        total += cross_entropy(logits, y[start:stop]) * (min(stop, x.shape[0]) - start)
    loss = total / x.shape[0]
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite validation loss: {loss}")
    return loss


def predict(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Eval-mode class predictions; argmax ties break to the lowest code."""
    x = np.asarray(inputs, dtype=float)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=int)
    out = np.empty(x.shape[0], dtype=int)
    for start in range(0, x.shape[0], EVAL_CHUNK):
        stop = start + EVAL_CHUNK
        logits, _ = forward(params, x[start:stop], train=False)
        out[start:stop] = logits.argmax(axis=1)
    return out


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(params.tensors[n]) for n in params.trainable_names},
            v={n: np.zeros_like(params.tensors[n]) for n in params.trainable_names},
        )


def adam_step(params: ModelParams, state: AdamState, grads: dict[str, np.ndarray],
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place; running stats untouched."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in state.m:
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params.tensors[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class TrainResult:
    params: ModelParams
    epochs_run: int
    train_loss: float
    val_loss: float


def _batch_slices(n: int, batch_size: int) -> list[tuple[int, int]]:
    # Keep a trailing batch of >= 2 rows; fold a single leftover row into
    # the previous batch (batch norm needs >= 2 rows).
    slices = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(slices) > 1 and slices[-1][1] - slices[-1][0] < 2:
        last = slices.pop()
        slices[-1] = (slices[-1][0], last[1])
    return slices


def train_local(params: ModelParams, train_x: np.ndarray, train_y: np.ndarray,
                val_x: np.ndarray, val_y: np.ndarray, cfg: TrainConfig,
                prox_mu: float = 0.0,
                prox_ref: ModelParams | None = None) -> TrainResult:
    """Train a copy of ``params`` on one client's data.

    Runs up to cfg.epochs epochs of seeded shuffled mini-batches.  With a
    non-empty validation set, evaluates after every epoch and stops once
    the loss has not improved for cfg.early_stop_patience epochs, returning
    the best-epoch snapshot; otherwise runs the full budget.

    A positive ``prox_mu`` adds the proximal penalty (mu/2)||theta -
    theta_ref||^2 against ``prox_ref`` to the objective.
    """
    n = len(train_y)
    if n < 2:
        raise ValueError("training requires at least 2 samples")
    if prox_mu < 0:
        raise ValueError("prox_mu must be >= 0")
    if prox_mu > 0 and prox_ref is None:
        raise ValueError("prox_mu > 0 requires prox_ref")

    params = params.copy()
    state = AdamState.fresh(params)
    rng = np.random.default_rng(cfg.seed)
    use_val = len(val_y) > 0

    best_val = np.inf
    best_snapshot = None
    bad_epochs = 0
    epochs_run = 0
    train_loss = np.nan
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start, stop in _batch_slices(n, cfg.batch_size):
            idx = order[start:stop]
            loss, grads = loss_and_grad(params, train_x[idx], train_y[idx], cfg, rng)
            if prox_mu > 0:
                ref = prox_ref.tensors
                penalty = 0.0
                for name in state.m:
                    diff = params.tensors[name] - ref[name]
                    grads[name] = grads[name] + prox_mu * diff
                    penalty += float((diff * diff).sum())
                loss += 0.5 * prox_mu * penalty
            adam_step(params, state, grads, cfg)
            epoch_loss += loss * len(idx)
        train_loss = epoch_loss / n
        epochs_run += 1
        if use_val:
            val = eval_loss(params, val_x, val_y)
            if val < best_val:
                best_val = val
                best_snapshot = params.copy()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.early_stop_patience:
                    break
    if use_val and best_snapshot is not None:
        return TrainResult(best_snapshot, epochs_run, train_loss, best_val)
    return TrainResult(params, epochs_run, train_loss, np.nan)


def fresh_train_config(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Copy of cfg with its seed replaced."""
    return replace(cfg, seed=seed)


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Write the versioned binary checkpoint (all floats little-endian)."""
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<III", CHECKPOINT_VERSION, params.input_dim,
                                 len(params.tensors)))
        for name, tensor in params.tensors.items():
            raw_name = name.encode("utf-8")
            handle.write(struct.pack("<I", len(raw_name)))
            handle.write(raw_name)
            handle.write(struct.pack("<I", tensor.ndim))
            handle.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            handle.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as handle:
        data = handle.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a fedflow checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)

    def unpack(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    version, input_dim, n_tensors = unpack("<III")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = unpack("<I")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = unpack("<I")
        shape = unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        tensor = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        tensors[name] = tensor.reshape(shape).astype(float)
    if offset != len(data):
        raise ValueError("trailing bytes after last tensor")
    return ModelParams(input_dim=input_dim, tensors=tensors)
