"""Minimal dense-network numerics on numpy.

Models are dataclasses holding per-layer weight matrices (input_dim x
output_dim, row-major) and bias vectors, with optional per-layer batch
normalization on hidden layers. Training code drives them through
``forward``, ``backward`` and ``optimizer_step``; there is no hidden
state, so results are deterministic given a seed in a single-threaded
run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid", "softmax")
LOSS_KINDS = ("cross_entropy", "mse", "composite")

PROB_EPS = 1e-12  # probability clamp inside cross-entropy
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

MODEL_MAGIC = b"PRFM"
MODEL_VERSION = 1
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
_CODE_ACT = {i: name for name, i in _ACT_CODE.items()}


class DimensionMismatch(ValueError):
    """Array shapes do not line up with the model or with each other."""


class NumericsError(RuntimeError):
    """A loss or gradient became non-finite."""


class ModelFormatError(ValueError):
    """Model file is malformed or the model cannot be serialized."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(
                f"layer dims must be positive, got {self.input_dim}x{self.output_dim}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
        )


@dataclass
class Mlp:
    """A fully connected network: ordered layer specs plus parameters."""

    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn: list[BatchNormState | None]
    seed: int

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def copy(self) -> "Mlp":
        return Mlp(
            self.specs,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [s.copy() if s is not None else None for s in self.bn],
            self.seed,
        )

    def astype(self, dtype) -> "Mlp":
        out = self.copy()
        out.weights = [w.astype(dtype) for w in out.weights]
        out.biases = [b.astype(dtype) for b in out.biases]
        for s in out.bn:
            if s is not None:
                s.gamma = s.gamma.astype(dtype)
                s.beta = s.beta.astype(dtype)
                s.running_mean = s.running_mean.astype(dtype)
                s.running_var = s.running_var.astype(dtype)
        return out


def init_mlp(specs, seed: int, dtype=np.float32, weight_scale: float = 0.01) -> Mlp:
    """Initialize weights as normal(0, weight_scale) and biases as zero."""
    specs = tuple(specs)
    if not specs:
        raise ValueError("need at least one layer")
    for a, b in zip(specs[:-1], specs[1:]):
        if a.output_dim != b.input_dim:
            raise DimensionMismatch(
                f"layer chain broken: {a.output_dim} -> {b.input_dim}"
            )
    rng = np.random.default_rng(seed)
    weights, biases, bn = [], [], []
    for spec in specs:
        weights.append(
            rng.normal(0.0, weight_scale, (spec.input_dim, spec.output_dim)).astype(dtype)
        )
        biases.append(np.zeros(spec.output_dim, dtype=dtype))
        if spec.batch_norm:
            bn.append(
                BatchNormState(
                    gamma=np.ones(spec.output_dim, dtype=dtype),
                    beta=np.zeros(spec.output_dim, dtype=dtype),
                    running_mean=np.zeros(spec.output_dim, dtype=dtype),
                    running_var=np.ones(spec.output_dim, dtype=dtype),
                )
            )
        else:
            bn.append(None)
    return Mlp(specs, weights, biases, bn, seed)


def build_mlp(
    sizes,
    hidden_activation: str = "relu",
    output_activation: str = "softmax",
    seed: int = 0,
    dtype=np.float32,
    batch_norm: bool = False,
    weight_scale: float = 0.01,
) -> Mlp:
    """Build an MLP from a flat size list [in, h1, ..., out].

    Batch norm, when enabled, applies to hidden layers only.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    specs = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        specs.append(
            LayerSpec(
                a,
                b,
                activation=output_activation if last else hidden_activation,
                batch_norm=batch_norm and not last,
            )
        )
    return init_mlp(specs, seed, dtype=dtype, weight_scale=weight_scale)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    # floor keeps exp() out of the denormal range, which stalls float32 matmuls
    ez = np.exp(np.maximum(shifted, -60.0))
    return ez / ez.sum(axis=1, keepdims=True)


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "softmax":
        return _softmax(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class _ForwardCache:
    activations: list  # a0 (the input) .. aL
    bn_caches: list  # per layer: None or (xhat, inv_std)


def _check_batch(model: Mlp, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise DimensionMismatch(f"batch must be 2-D, got shape {batch.shape}")
    if batch.shape[1] != model.input_dim:
        raise DimensionMismatch(
            f"batch has {batch.shape[1]} columns, model expects {model.input_dim}"
        )
    if not np.isfinite(batch).all():
        raise NumericsError("batch contains non-finite values")
    return batch


def _forward(
    model: Mlp, batch: np.ndarray, train_mode: bool, update_stats: bool = False
) -> _ForwardCache:
    a = _check_batch(model, batch)
    activations = [a]
    bn_caches: list = []
    for spec, w, b, bn in zip(model.specs, model.weights, model.biases, model.bn):
        z = a @ w + b
        if bn is not None:
            if train_mode:
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                if update_stats:
                    m = BN_MOMENTUM
                    bn.running_mean = ((1 - m) * bn.running_mean + m * mean).astype(
                        bn.running_mean.dtype
                    )
                    bn.running_var = ((1 - m) * bn.running_var + m * var).astype(
                        bn.running_var.dtype
                    )
            else:
                mean = bn.running_mean
                var = bn.running_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mean) * inv_std
            z = bn.gamma * xhat + bn.beta
            bn_caches.append((xhat, inv_std))
        else:
            bn_caches.append(None)
        a = _apply_activation(spec.activation, z)
        activations.append(a)
    return _ForwardCache(activations, bn_caches)


def forward(model: Mlp, batch: np.ndarray, train_mode: bool = False) -> list:
    """Run the batch through the model; returns the activation after each layer."""
    return _forward(model, batch, train_mode).activations[1:]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_labels(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionMismatch(f"labels shape {labels.shape}, expected ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    return labels.astype(np.int64)


def cross_entropy(pred: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true label, on probability rows."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise DimensionMismatch("pred must be 2-D")
    if np.any(pred < -1e-6) or np.any(np.abs(pred.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("pred rows must lie on the probability simplex")
    labels = _check_labels(labels, pred.shape[0], pred.shape[1])
    clipped = np.clip(pred[np.arange(pred.shape[0]), labels], PROB_EPS, 1.0)
    return float(-np.mean(np.log(clipped)))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of squared element differences."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _loss_and_grad(out: np.ndarray, targets, loss_kind: str, lam: float):
    """Loss value and its gradient w.r.t. the final activation."""
    n, k = out.shape
    if loss_kind == "cross_entropy":
        labels = _check_labels(targets, n, k)
        picked = out[np.arange(n), labels]
        clipped = np.clip(picked, PROB_EPS, 1.0)
        loss = float(-np.mean(np.log(clipped)))
        grad = np.zeros_like(out)
        active = (picked > PROB_EPS) & (picked < 1.0)
        rows = np.arange(n)[active]
        grad[rows, labels[active]] = -1.0 / (n * clipped[active])
        return loss, grad
    if loss_kind == "mse":
        t = np.asarray(targets, dtype=out.dtype)
        if t.shape != out.shape:
            raise DimensionMismatch(f"target shape {t.shape}, output {out.shape}")
        diff = out - t
        loss = float(np.mean(diff**2))
        return loss, (2.0 / out.size) * diff
    if loss_kind == "composite":
        recon_target, labels = targets
        l_mse, g_mse = _loss_and_grad(out, recon_target, "mse", lam)
        l_ce, g_ce = _loss_and_grad(out, labels, "cross_entropy", lam)
        return l_mse + lam * l_ce, g_mse + lam * g_ce
    raise ValueError(f"unknown loss kind {loss_kind!r}")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


@dataclass
class Gradients:
    weights: list
    biases: list
    bn_gammas: list  # per layer, None where the layer has no batch norm
    bn_betas: list
    loss: float | None
    input_grad: np.ndarray


def _activation_backward(name: str, a_out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if name == "identity":
        return grad
    if name == "relu":
        return grad * (a_out > 0)
    if name == "tanh":
        return grad * (1.0 - a_out**2)
    if name == "sigmoid":
        return grad * a_out * (1.0 - a_out)
    if name == "softmax":
        inner = (grad * a_out).sum(axis=1, keepdims=True)
        return a_out * (grad - inner)
    raise ValueError(f"unknown activation {name!r}")


def _bn_backward(cache, bn: BatchNormState, grad: np.ndarray):
    xhat, inv_std = cache
    n = grad.shape[0]
    dgamma = (grad * xhat).sum(axis=0)
    dbeta = grad.sum(axis=0)
    dxhat = grad * bn.gamma
    dz = (
        inv_std
        / n
        * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    )
    return dz, dgamma, dbeta


def _backprop(model: Mlp, cache: _ForwardCache, grad_out: np.ndarray) -> Gradients:
    g = grad_out
    n_layers = model.n_layers
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    gg: list = [None] * n_layers
    gbeta: list = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        spec = model.specs[i]
        a_prev = cache.activations[i]
        a_out = cache.activations[i + 1]
        dh = _activation_backward(spec.activation, a_out, g)
        if model.bn[i] is not None:
            dz, dgamma, dbeta = _bn_backward(cache.bn_caches[i], model.bn[i], dh)
            gg[i] = dgamma
            gbeta[i] = dbeta
        else:
            dz = dh
        gw[i] = a_prev.T @ dz
        gb[i] = dz.sum(axis=0)
        g = dz @ model.weights[i].T
    return Gradients(gw, gb, gg, gbeta, None, g)


def backward(
    model: Mlp,
    batch: np.ndarray,
    targets,
    loss_kind: str,
    lam: float = 1.0,
    train_mode: bool = True,
) -> Gradients:
    """Loss gradient for every parameter (and the input) of the model.

    ``targets`` is an int label vector for cross_entropy, an array matching
    the output for mse, and a (reconstruction_target, labels) pair for the
    composite reconstruction-plus-label loss weighted by ``lam``.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    cache = _forward(model, batch, train_mode)
    out = cache.activations[-1]
    loss, grad_out = _loss_and_grad(out, targets, loss_kind, lam)
    if not np.isfinite(loss):
        raise NumericsError(f"non-finite loss {loss}")
    grads = _backprop(model, cache, grad_out)
    grads.loss = loss
    return grads


def backprop_output_grad(
    model: Mlp, batch: np.ndarray, grad_out: np.ndarray, train_mode: bool = True
) -> Gradients:
    """Backpropagate an externally supplied output gradient (for chained models)."""
    cache = _forward(model, batch, train_mode)
    if grad_out.shape != cache.activations[-1].shape:
        raise DimensionMismatch(
            f"output grad shape {grad_out.shape}, output {cache.activations[-1].shape}"
        )
    return _backprop(model, cache, grad_out)


def compute_loss(model: Mlp, batch, targets, loss_kind: str, lam: float = 1.0) -> float:
    """Loss of the model on a batch, via the same code path the gradients use."""
    cache = _forward(model, batch, train_mode=True)
    loss, _ = _loss_and_grad(cache.activations[-1], targets, loss_kind, lam)
    return loss


# ---------------------------------------------------------------------------
# Parameter flattening and optimizers
# ---------------------------------------------------------------------------


def parameters(model: Mlp) -> list:
    """Flat parameter list: per layer W, b, then gamma and beta if present."""
    out = []
    for w, b, bn in zip(model.weights, model.biases, model.bn):
        out.append(w)
        out.append(b)
        if bn is not None:
            out.append(bn.gamma)
            out.append(bn.beta)
    return out


def gradient_arrays(grads: Gradients) -> list:
    out = []
    for gw, gb, gg, gbeta in zip(
        grads.weights, grads.biases, grads.bn_gammas, grads.bn_betas
    ):
        out.append(gw)
        out.append(gb)
        if gg is not None:
            out.append(gg)
            out.append(gbeta)
    return out


def set_parameters(model: Mlp, arrays: list) -> None:
    want = len(parameters(model))
    if len(arrays) != want:
        raise DimensionMismatch(f"got {len(arrays)} arrays, model has {want}")
    it = iter(arrays)
    for i, bn in enumerate(model.bn):
        model.weights[i] = next(it)
        model.biases[i] = next(it)
        if bn is not None:
            bn.gamma = next(it)
            bn.beta = next(it)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list | None = None
    v: list | None = None


@dataclass
class SgdConfig:
    lr: float = 0.1


def optimizer_step(params: list, grads: list, state) -> list:
    """One optimizer update; returns new parameter arrays.

    Adam state is mutated in place (moments and step counter).
    """
    if len(params) != len(grads):
        raise DimensionMismatch("parameter/gradient count mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionMismatch(f"shape mismatch {p.shape} vs {g.shape}")
        if not np.isfinite(g).all():
            raise NumericsError("non-finite gradient")
    if isinstance(state, SgdConfig):
        return [p - state.lr * g.astype(p.dtype) for p, g in zip(params, grads)]
    if isinstance(state, AdamState):
        if state.m is None:
            state.m = [np.zeros_like(p) for p in params]
            state.v = [np.zeros_like(p) for p in params]
        if len(state.m) != len(params):
            raise DimensionMismatch("Adam state does not match parameter count")
        state.step += 1
        t = state.step
        b1, b2 = state.beta1, state.beta2
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            g = g.astype(p.dtype)
            m = b1 * state.m[i] + (1 - b1) * g
            v = b2 * state.v[i] + (1 - b2) * g * g
            # flush decayed moments before they underflow to denormals
            m[np.abs(m) < 1e-32] = 0.0
            v[v < 1e-32] = 0.0
            state.m[i] = m
            state.v[i] = v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        return out
    raise TypeError(f"unknown optimizer state {type(state)!r}")


def fit(
    model: Mlp,
    X: np.ndarray,
    targets,
    loss_kind: str,
    epochs: int,
    batch_size: int,
    state,
    seed: int,
    lam: float = 1.0,
    weight_decay: float = 0.0,
    lr_schedule=(),
) -> list:
    """Generic minibatch training loop; returns per-epoch mean losses.

    ``lr_schedule`` is a sequence of (epoch, lr) pairs applied at epoch start.
    Weight decay applies to weight matrices only.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    X = np.asarray(X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    schedule = {int(e): float(lr) for e, lr in lr_schedule}
    losses = []
    for epoch in range(epochs):
        if epoch in schedule:
            state.lr = schedule[epoch]
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            xb = X[idx]
            if loss_kind == "composite":
                tb = (targets[0][idx], targets[1][idx])
            else:
                tb = np.asarray(targets)[idx]
            grads = backward(model, xb, tb, loss_kind, lam=lam)
            garrs = gradient_arrays(grads)
            params = parameters(model)
            if weight_decay:
                j = 0
                for w, b, bn in zip(model.weights, model.biases, model.bn):
                    garrs[j] = garrs[j] + weight_decay * w
                    j += 2
                    if bn is not None:
                        j += 2
            set_parameters(model, optimizer_step(params, garrs, state))
            total += grads.loss * len(idx)
        losses.append(total / n)
    return losses


# ---------------------------------------------------------------------------
# Serialization: magic "PRFM", version u16, layer count u16, then per layer
# input_dim u32, output_dim u32, activation u8, weights then biases as
# little-endian float32, row-major.
# ---------------------------------------------------------------------------


def save_model(model: Mlp, path) -> None:
    for spec in model.specs:
        if spec.batch_norm:
            raise ModelFormatError("batch-norm layers are not serializable")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HH", MODEL_VERSION, model.n_layers))
        for spec, w, b in zip(model.specs, model.weights, model.biases):
            fh.write(
                struct.pack("<IIB", spec.input_dim, spec.output_dim, _ACT_CODE[spec.activation])
            )
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path) -> Mlp:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad magic bytes")
    version, n_layers = struct.unpack_from("<HH", raw, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    off = 8
    specs, weights, biases = [], [], []
    for _ in range(n_layers):
        if off + 9 > len(raw):
            raise ModelFormatError("truncated layer header")
        din, dout, act = struct.unpack_from("<IIB", raw, off)
        off += 9
        if act not in _CODE_ACT:
            raise ModelFormatError(f"unknown activation code {act}")
        nw = din * dout * 4
        nb = dout * 4
        if off + nw + nb > len(raw):
            raise ModelFormatError("truncated parameter data")
        w = np.frombuffer(raw, dtype="<f4", count=din * dout, offset=off).reshape(din, dout)
        off += nw
        b = np.frombuffer(raw, dtype="<f4", count=dout, offset=off)
        off += nb
        specs.append(LayerSpec(din, dout, activation=_CODE_ACT[act]))
        weights.append(w.copy())
        biases.append(b.copy())
    if off != len(raw):
        raise ModelFormatError("trailing bytes after last layer")
    for a, b_ in zip(specs[:-1], specs[1:]):
        if a.output_dim != b_.input_dim:
            raise ModelFormatError("layer chain broken in file")
    return Mlp(tuple(specs), weights, biases, [None] * n_layers, seed=-1)
