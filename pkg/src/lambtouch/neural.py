"""Small fully connected networks trained from scratch with NumPy.

A network is a cascade of stages, each ``batchnorm -> linear -> ReLU -> dropout``,
followed by a linear head that is either a softmax classifier or a plain
linear regressor. Arithmetic is float64 throughout.

Trainable parameters are exposed as a flat list of arrays in a fixed order
(per stage ``gamma, beta, W, b``; then head ``W, b``) so that gradients and
optimizer state line up with them index for index.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)


class Head(Enum):
    SOFTMAX_CLASSIFIER = "softmax_classifier"
    LINEAR_REGRESSOR = "linear_regressor"


class LossKind(Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    head: Head
    dropout_p: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("at least one hidden stage is required")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_dims + (self.output_dim,)

    @property
    def loss_kind(self) -> LossKind:
        return LossKind.CROSS_ENTROPY if self.head is Head.SOFTMAX_CLASSIFIER else LossKind.MSE

    def describe(self) -> str:
        arrow = "→"
        return arrow.join(str(w) for w in self.widths) + f" ({self.head.value})"


@dataclass(eq=False)
class StageParams:
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    weight: np.ndarray  # (out, in)
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class ModelCheckpoint:
    spec: NetSpec
    stages: list[StageParams]
    head_weight: np.ndarray
    head_bias: np.ndarray
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        spec = self.spec
        if len(self.stages) != len(spec.hidden_dims):
            raise ValueError(f"{len(self.stages)} stages for {len(spec.hidden_dims)} hidden widths")
        widths = spec.widths
        for i, st in enumerate(self.stages):
            n_in, n_out = widths[i], widths[i + 1]
            for name in ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
                if getattr(st, name).shape != (n_in,):
                    raise ValueError(f"stage {i}: {name} has shape {getattr(st, name).shape}, expected ({n_in},)")
            if st.weight.shape != (n_out, n_in):
                raise ValueError(f"stage {i}: weight has shape {st.weight.shape}, expected {(n_out, n_in)}")
            if st.bias.shape != (n_out,):
                raise ValueError(f"stage {i}: bias has shape {st.bias.shape}, expected ({n_out},)")
            if np.any(st.bn_running_var < 0):
                raise ValueError(f"stage {i}: negative running variance")
        if self.head_weight.shape != (widths[-1], widths[-2]):
            raise ValueError(f"head weight has shape {self.head_weight.shape}, expected {(widths[-1], widths[-2])}")
        if self.head_bias.shape != (widths[-1],):
            raise ValueError(f"head bias has shape {self.head_bias.shape}, expected ({widths[-1]},)")

    def trainable(self) -> list[np.ndarray]:
        out = []
        for st in self.stages:
            out += [st.bn_gamma, st.bn_beta, st.weight, st.bias]
        return out + [self.head_weight, self.head_bias]

    def copy(self) -> "ModelCheckpoint":
        return copy.deepcopy(self)

    def n_floats(self) -> int:
        n = sum(4 * st.in_dim + st.weight.size + st.bias.size for st in self.stages)
        return n + self.head_weight.size + self.head_bias.size


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "adam_eps", "bn_eps", "bn_momentum"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")


def init_model(spec: NetSpec, rng: np.random.Generator) -> ModelCheckpoint:
    """Glorot-uniform weights, zero biases, identity batchnorm."""
    widths = spec.widths

    def glorot(n_out, n_in):
        lim = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_out, n_in))

    stages = []
    for n_in, n_out in zip(widths[:-2], widths[1:-1]):
        stages.append(
            StageParams(
                bn_gamma=np.ones(n_in),
                bn_beta=np.zeros(n_in),
                bn_running_mean=np.zeros(n_in),
                bn_running_var=np.ones(n_in),
                weight=glorot(n_out, n_in),
                bias=np.zeros(n_out),
            )
        )
    return ModelCheckpoint(spec, stages, glorot(widths[-1], widths[-2]), np.zeros(widths[-1]))


# ---------------------------------------------------------------- forward


@dataclass
class ForwardCache:
    """Everything backward() needs from a train-mode pass."""

    model_id: int
    batch: int
    stage_caches: list
    head_input: np.ndarray
    logits: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batchnorm_infer(st: StageParams, h: np.ndarray, bn_eps: float = 1e-5) -> np.ndarray:
    """Batchnorm with frozen running statistics: a fixed per-feature affine map."""
    return (h - st.bn_running_mean) / np.sqrt(st.bn_running_var + bn_eps) * st.bn_gamma + st.bn_beta


def _as_batch(model: ModelCheckpoint, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(getattr(x, "values", x), dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {model.spec.input_dim}")
    return x, single


def forward_logits(model, x, mode="infer", rng=None, bn_eps=1e-5):
    """Head pre-activation (logits or regression output) and, in train mode, the cache.

    ``x`` is a single feature vector or an (n, input_dim) batch.
    """
    x, single = _as_batch(model, x)
    train = mode == "train"
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    p = model.spec.dropout_p
    if train and x.shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2 for batch statistics")
    if train and p > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")

    h = x
    caches = []
    for st in model.stages:
        if train:
            mu = h.mean(axis=0)
            var = h.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + bn_eps)
            xhat = (h - mu) * inv_std
            a = (xhat * st.bn_gamma + st.bn_beta) @ st.weight.T + st.bias
        else:
            a = batchnorm_infer(st, h, bn_eps) @ st.weight.T + st.bias
        r = np.maximum(a, 0.0)
        mask = None
        if train and p > 0:
            mask = (rng.random(r.shape) >= p) / (1.0 - p)
            r = r * mask
        if train:
            caches.append((h, mu, var, inv_std, xhat, a, mask))
        h = r
    logits = h @ model.head_weight.T + model.head_bias
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activation in forward pass")
    if single:
        logits = logits[0]
    if train:
        return logits, ForwardCache(id(model), x.shape[0], caches, h, logits)
    return logits, None


def forward(model, x, mode="infer", rng=None, bn_eps=1e-5):
    """Network output: class probabilities for a classifier, coordinates for a regressor.

    In train mode returns ``(output, cache)``; in infer mode just the output.
    """
    logits, cache = forward_logits(model, x, mode, rng, bn_eps)
    out = softmax(logits) if model.spec.head is Head.SOFTMAX_CLASSIFIER else logits
    return (out, cache) if mode == "train" else out


def predict(model, x, bn_eps=1e-5) -> np.ndarray:
    return forward(model, x, "infer", bn_eps=bn_eps)


# ---------------------------------------------------------------- loss


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("loss inputs must be finite")


def loss(pred, target, kind) -> float:
    """Mean loss over the batch.

    For cross-entropy ``pred`` holds logits and ``target`` is one-hot (or a
    vector of class indices); for MSE the squared error is averaged over the
    output dimensions and the batch.
    """
    return loss_and_grad(pred, target, kind)[0]


def _one_hot(target, n_class):
    t = np.asarray(target)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        oh = np.zeros((t.size, n_class))
        oh[np.arange(t.size), t] = 1.0
        return oh
    return np.atleast_2d(np.asarray(t, dtype=float))


def loss_and_grad(pred, target, kind):
    """Loss and its gradient with respect to ``pred`` (logits for cross-entropy)."""
    kind = LossKind(kind) if not isinstance(kind, LossKind) else kind
    pred = np.asarray(pred, dtype=float)
    single = pred.ndim == 1
    z = np.atleast_2d(pred)
    if kind is LossKind.CROSS_ENTROPY:
        y = _one_hot(target, z.shape[1])
        if y.shape != z.shape:
            raise ValueError(f"target shape {y.shape} does not match prediction {z.shape}")
        _check_finite(z, y)
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        value = float(np.mean(lse - (y * z).sum(axis=1)))
        grad = (softmax(z) - y) / z.shape[0]
    else:
        y = np.atleast_2d(np.asarray(target, dtype=float))
        if y.shape != z.shape:
            raise ValueError(f"target shape {y.shape} does not match prediction {z.shape}")
        _check_finite(z, y)
        diff = z - y
        value = float(np.mean(diff**2))
        grad = 2.0 * diff / diff.size
    return value, (grad[0] if single else grad)


# ---------------------------------------------------------------- backward


def backward(model: ModelCheckpoint, cache: ForwardCache, dlogits) -> list[np.ndarray]:
    """Exact gradients for all trainable parameters, ordered like ``model.trainable()``.

    ``dlogits`` is the loss gradient with respect to the head pre-activation.
    """
    if cache is None or cache.model_id != id(model) or len(cache.stage_caches) != len(model.stages):
        raise ValueError("cache does not belong to this model")
    g = np.atleast_2d(np.asarray(dlogits, dtype=float))
    if g.shape != np.atleast_2d(cache.logits).shape:
        raise ValueError("upstream gradient does not match the cached forward pass")

    grads_head = [g.T @ cache.head_input, g.sum(axis=0)]
    dh = g @ model.head_weight
    stage_grads = []
    for st, (h, mu, var, inv_std, xhat, a, mask) in zip(reversed(model.stages), reversed(cache.stage_caches)):
        if mask is not None:
            dh = dh * mask
        da = dh * (a > 0)
        y = xhat * st.bn_gamma + st.bn_beta
        dW = da.T @ y
        db = da.sum(axis=0)
        dy = da @ st.weight
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * st.bn_gamma
        n = h.shape[0]
        dh = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        stage_grads.append([dgamma, dbeta, dW, db])
    out = []
    for sg in reversed(stage_grads):
        out += sg
    return out + grads_head


def update_running_stats(model: ModelCheckpoint, cache: ForwardCache, momentum: float):
    n = cache.batch
    for st, (_, mu, var, *_rest) in zip(model.stages, cache.stage_caches):
        unbiased = var * n / (n - 1)
        st.bn_running_mean *= 1.0 - momentum
        st.bn_running_mean += momentum * mu
        st.bn_running_var *= 1.0 - momentum
        st.bn_running_var += momentum * unbiased


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, t: int, cfg: TrainConfig):
    """One in-place Adam update with bias correction; returns ``(params, state)``."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    state.t = t
    return params, state


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: ModelCheckpoint
    history: list[dict]
    split: dict = field(default_factory=dict)


def split_indices(n: int, seed: int, fractions=(0.7, 0.2, 0.1)) -> dict:
    """Seeded shuffle of ``range(n)`` cut into train/val/test index arrays."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0,)))
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": perm[:n_train],
        "val": perm[n_train : n_train + n_val],
        "test": perm[n_train + n_val :],
    }


def _targets_for(spec: NetSpec, y):
    y = np.asarray(y)
    if spec.head is Head.SOFTMAX_CLASSIFIER:
        if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("classifier labels must be a vector of class indices")
        if y.size and (y.min() < 0 or y.max() >= spec.output_dim):
            raise ValueError("class index out of range")
        return y
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != spec.output_dim:
        raise ValueError(f"regression targets must be (n, {spec.output_dim})")
    return y


def evaluate_loss(model, X, Y, bn_eps=1e-5, chunk=4096) -> float:
    kind = model.spec.loss_kind
    total = 0.0
    for s in range(0, len(X), chunk):
        logits, _ = forward_logits(model, X[s : s + chunk], "infer", bn_eps=bn_eps)
        total += loss(logits, Y[s : s + chunk], kind) * len(logits)
    return total / len(X)


def quantize_float32(model: ModelCheckpoint) -> ModelCheckpoint:
    """Round every parameter to the nearest float32 so checkpoint files reproduce it exactly."""
    m = model.copy()
    for st in m.stages:
        for name in ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "weight", "bias"):
            setattr(st, name, getattr(st, name).astype(np.float32).astype(np.float64))
    m.head_weight = m.head_weight.astype(np.float32).astype(np.float64)
    m.head_bias = m.head_bias.astype(np.float32).astype(np.float64)
    return m


def fit(spec: NetSpec, X_train, Y_train, X_val, Y_val, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Mini-batch Adam with best-validation checkpointing and early stopping.

    The returned model holds the parameters from the epoch with the lowest
    validation loss, rounded to float32. ``on_epoch(record, model)`` is called
    after every epoch with the history record and the live model.
    """
    X_train = np.asarray(X_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    Y_train = _targets_for(spec, Y_train)
    Y_val = _targets_for(spec, Y_val)
    if len(X_train) < 2 or len(X_val) < 1:
        raise ValueError("need at least 2 training and 1 validation sample")

    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(1,)))
    model = init_model(spec, rng)
    params = model.trainable()
    state = AdamState.zeros_like(params)
    kind = spec.loss_kind
    n = len(X_train)
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    if n // n_batches < 2:
        n_batches = n // 2

    history = []
    best_val = math.inf
    best_model = model.copy()
    best_epoch = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        batch_losses = []
        for idx in np.array_split(perm, n_batches):
            logits, cache = forward_logits(model, X_train[idx], "train", rng, cfg.bn_eps)
            value, dlogits = loss_and_grad(logits, Y_train[idx], kind)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, step {step + 1}")
            grads = backward(model, cache, dlogits)
            step += 1
            adam_step(params, grads, state, step, cfg)
            update_running_stats(model, cache, cfg.bn_momentum)
            batch_losses.append(value * len(idx))
        train_loss = sum(batch_losses) / n
        try:
            val_loss = evaluate_loss(model, X_val, Y_val, cfg.bn_eps)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite validation output at epoch {epoch}") from exc
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if on_epoch is not None:
            on_epoch(history[-1], model)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_model = model.copy()
        elif epoch - best_epoch >= cfg.patience:
            break
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)

    final = quantize_float32(best_model)
    final.train_meta = {
        "seed": int(cfg.seed),
        "epochs": len(history),
        "best_epoch": best_epoch,
        "train_loss": history[best_epoch - 1]["train_loss"],
        "val_loss": best_val,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "patience": cfg.patience,
        "max_epochs": cfg.max_epochs,
        "bn_eps": cfg.bn_eps,
        "bn_momentum": cfg.bn_momentum,
    }
    return TrainResult(final, history)


def train(spec: NetSpec, X, Y, cfg: TrainConfig, split=(0.7, 0.2, 0.1)) -> TrainResult:
    """Seeded 70/20/10 split of ``(X, Y)`` followed by :func:`fit`."""
    X = np.asarray(X, dtype=float)
    if len(X) < 10:
        raise ValueError("need at least 10 samples to train")
    parts = split_indices(len(X), cfg.seed, split)
    Y = np.asarray(Y)
    result = fit(spec, X[parts["train"]], Y[parts["train"]], X[parts["val"]], Y[parts["val"]], cfg)
    result.split = parts
    return result
