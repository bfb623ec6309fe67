"""The defense pipeline: confidence reformer, label swapper, and purify.

The reformer is a conditional autoencoder over confidence vectors,
conditioned on the predicted label and trained only on the defender's
reference (non-member) confidences to minimize reconstruction error plus
a weighted label loss. Gaussian noise of fixed scale is injected in the
latent space. The label swapper stores the original confidences of a
fixed subset of training members in a small index; queries whose raw
confidence matches an index entry get their top-1 and top-2 purified
probabilities exchanged, which closes the train/test accuracy gap.

Inference noise is derived from a keyed hash of the raw confidence
vector, so the whole pipeline is a pure function of the target model's
output and repeated identical queries cannot be compared for drift.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nncore
from .data import Dataset
from .nncore import AdamState, DimensionMismatch, Mlp
from .target import TrainingDiverged, predict_confidence

INDEX_MAGIC = b"PRFI"


@dataclass
class CvaeConfig:
    n_classes: int
    encoder_hidden: tuple = (64, 32)
    decoder_hidden: tuple = (32, 64)
    latent_dim: int = 8
    lam: float = 1.0  # label-loss weight against reconstruction
    sigma: float = 0.1  # latent noise scale, train and inference
    kl_weight: float = 0.0
    lr: float = 1e-3
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    hidden_activation: str = "relu"
    batch_norm: bool = False
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class ConfidenceReformer:
    """Conditional autoencoder: encoder maps (confidence, onehot label) to a
    latent mean, decoder maps (latent, onehot label) back to the simplex."""

    encoder: Mlp
    decoder: Mlp
    n_classes: int
    latent_dim: int
    sigma: float
    seed: int


def _onehot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_confidences(c: np.ndarray, k: int | None = None) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    single = c.ndim == 1
    batch = c[None, :] if single else c
    if batch.ndim != 2:
        raise DimensionMismatch("confidence input must be 1-D or 2-D")
    if k is not None and batch.shape[1] != k:
        raise DimensionMismatch(f"expected {k} classes, got {batch.shape[1]}")
    if np.any(batch < -1e-9) or np.any(np.abs(batch.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("input rows are not on the probability simplex")
    return batch


def train_reformer(model: Mlp, d2: Dataset, cfg: CvaeConfig) -> ConfidenceReformer:
    """Fit the reformer on the target's confidences over the reference set.

    Each minibatch minimizes reconstruction error against the raw
    confidence plus ``lam`` times the cross entropy against the predicted
    label, with latent noise of scale ``sigma`` injected between encoder
    and decoder.
    """
    if cfg.n_classes != d2.k:
        raise DimensionMismatch(
            f"condition dim {cfg.n_classes} does not match dataset classes {d2.k}"
        )
    dtype = np.dtype(cfg.dtype)
    k = cfg.n_classes
    conf = predict_confidence(model, d2.X).astype(dtype)
    labels = np.argmax(conf, axis=1)

    encoder = nncore.build_mlp(
        [2 * k, *cfg.encoder_hidden, cfg.latent_dim],
        hidden_activation=cfg.hidden_activation,
        output_activation="identity",
        seed=cfg.seed,
        dtype=dtype,
        batch_norm=cfg.batch_norm,
    )
    decoder = nncore.build_mlp(
        [cfg.latent_dim + k, *cfg.decoder_hidden, k],
        hidden_activation=cfg.hidden_activation,
        output_activation="softmax",
        seed=cfg.seed + 1,
        dtype=dtype,
        batch_norm=cfg.batch_norm,
    )
    enc_state = AdamState(lr=cfg.lr)
    dec_state = AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng(cfg.seed + 11)
    noise_rng = np.random.default_rng(cfg.seed + 23)

    n = conf.shape[0]
    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            c_b = conf[idx]
            l_b = labels[idx]
            onehot = _onehot(l_b, k, dtype)
            enc_in = np.hstack([c_b, onehot])
            mu = nncore.forward(encoder, enc_in, train_mode=True)[-1]
            z = mu
            if cfg.sigma > 0:
                z = mu + cfg.sigma * noise_rng.standard_normal(mu.shape).astype(dtype)
            dec_in = np.hstack([z, onehot])
            try:
                dec_grads = nncore.backward(
                    decoder, dec_in, (c_b, l_b), "composite", lam=cfg.lam
                )
            except nncore.NumericsError as exc:
                raise TrainingDiverged(str(exc)) from exc
            dmu = dec_grads.input_grad[:, : cfg.latent_dim]
            if cfg.kl_weight > 0:
                dmu = dmu + cfg.kl_weight * mu / len(idx)
            enc_grads = nncore.backprop_output_grad(encoder, enc_in, dmu)
            nncore.set_parameters(
                decoder,
                nncore.optimizer_step(
                    nncore.parameters(decoder), nncore.gradient_arrays(dec_grads), dec_state
                ),
            )
            nncore.set_parameters(
                encoder,
                nncore.optimizer_step(
                    nncore.parameters(encoder), nncore.gradient_arrays(enc_grads), enc_state
                ),
            )
    return ConfidenceReformer(
        encoder=encoder,
        decoder=decoder,
        n_classes=k,
        latent_dim=cfg.latent_dim,
        sigma=cfg.sigma,
        seed=cfg.seed,
    )


def _hash_noise(row: np.ndarray, seed: int, size: int) -> np.ndarray:
    """Gaussian draw keyed by the confidence bytes; identical rows map to
    identical noise, which is what makes replayed queries indistinguishable."""
    digest = hashlib.blake2b(
        row.tobytes(), key=struct.pack("<q", seed), digest_size=16
    ).digest()
    key = int.from_bytes(digest, "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(size)


def encode_mean(
    reformer: ConfidenceReformer, c: np.ndarray, labels: np.ndarray | None = None
) -> np.ndarray:
    """Latent means for a batch of confidence rows (no noise)."""
    batch = _check_confidences(c, reformer.n_classes)
    if labels is None:
        labels = np.argmax(batch, axis=1)
    enc = reformer.encoder.astype(np.float64)
    enc_in = np.hstack([batch, _onehot(labels, reformer.n_classes)])
    return nncore.forward(enc, enc_in)[-1]


def reform(
    reformer: ConfidenceReformer, c: np.ndarray, noise_mode: str = "sample"
) -> np.ndarray:
    """Rewrite confidence rows toward the learned non-member pattern.

    noise_mode "sample" perturbs the latent mean at scale sigma with noise
    keyed to the input bytes; "zero" is fully deterministic.
    """
    if noise_mode not in ("sample", "zero"):
        raise ValueError(f"unknown noise mode {noise_mode!r}")
    single = np.asarray(c).ndim == 1
    batch = _check_confidences(c, reformer.n_classes)
    labels = np.argmax(batch, axis=1)
    onehot = _onehot(labels, reformer.n_classes)
    enc = reformer.encoder.astype(np.float64)
    dec = reformer.decoder.astype(np.float64)
    mu = nncore.forward(enc, np.hstack([batch, onehot]))[-1]
    z = mu
    if noise_mode == "sample" and reformer.sigma > 0:
        noise = np.stack(
            [_hash_noise(row, reformer.seed, reformer.latent_dim) for row in batch]
        )
        z = mu + reformer.sigma * noise
    out = nncore.forward(dec, np.hstack([z, onehot]))[-1]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Label swapper
# ---------------------------------------------------------------------------


def compute_swap_rate(acc_train: float, acc_test: float) -> float:
    """Fraction of training members whose labels get swapped:
    (acc_train - acc_test) / acc_train, clamped to [0, 1]."""
    if acc_train <= 0:
        raise ValueError("acc_train must be positive")
    return float(min(max((acc_train - acc_test) / acc_train, 0.0), 1.0))


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class SwapPlan:
    p_swap: float
    indices: np.ndarray  # positions into d1, fixed at training time
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_swap <= 1.0:
            raise ValueError("p_swap must lie in [0, 1]")
        self.indices = np.asarray(self.indices, dtype=np.int64)


def make_swap_plan(n_train: int, p_swap: float, seed: int) -> SwapPlan:
    """Fix the swap subset: shuffle d1 positions, keep the first
    round-half-up(p_swap * n) of them."""
    count = round_half_up(p_swap * n_train)
    rng = np.random.default_rng(seed)
    indices = rng.permutation(n_train)[:count]
    return SwapPlan(p_swap=p_swap, indices=indices, seed=seed)


@dataclass
class PredictionIndex:
    """Original confidences of the swap subset, searched by nearest neighbor."""

    entries: np.ndarray  # (m, k) float64
    k_nn: int = 1
    tau: float = 1e-7

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise DimensionMismatch("index entries must be 2-D")
        if not np.isfinite(self.entries).all():
            raise ValueError("index entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def build_index(
    model: Mlp, d1: Dataset, plan: SwapPlan, k_nn: int = 1, tau: float = 1e-7
) -> PredictionIndex:
    """Store the pre-reform target confidence of every swap-subset member."""
    if plan.indices.size and (plan.indices.min() < 0 or plan.indices.max() >= d1.n):
        raise ValueError("swap plan indices out of range for d1")
    if plan.p_swap > 0 and plan.indices.size == 0:
        raise ValueError("empty swap subset with a positive swap rate")
    if plan.indices.size == 0:
        entries = np.zeros((0, d1.k), dtype=np.float64)
    else:
        entries = predict_confidence(model, d1.X[plan.indices])
    return PredictionIndex(entries=entries, k_nn=k_nn, tau=tau)


def nearest_distances(index: PredictionIndex, c: np.ndarray, chunk: int = 512) -> np.ndarray:
    """L2 distance from each query row to its nearest index entry.

    Computed from explicit differences (not the expanded quadratic form) so
    a query equal to a stored entry reports a distance of exactly zero.
    """
    queries = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if index.size == 0:
        return np.full(queries.shape[0], np.inf)
    if queries.shape[1] != index.entries.shape[1]:
        raise DimensionMismatch(
            f"query dim {queries.shape[1]} does not match index dim {index.entries.shape[1]}"
        )
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], chunk):
        block = queries[start : start + chunk]
        diff = block[:, None, :] - index.entries[None, :, :]
        d2 = np.einsum("qek,qek->qe", diff, diff)
        out[start : start + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


def match_members(
    index: PredictionIndex, c: np.ndarray, k_nn: int | None = None, tau: float | None = None
) -> np.ndarray:
    """True where the nearest of the k_nn neighbors lies within tau."""
    tau = index.tau if tau is None else tau
    return nearest_distances(index, c) <= tau


def match_member(
    index: PredictionIndex, c: np.ndarray, k_nn: int | None = None, tau: float | None = None
) -> bool:
    return bool(match_members(index, np.atleast_2d(c), k_nn, tau)[0])


def swap_label(p: np.ndarray) -> np.ndarray:
    """Exchange the top-1 and top-2 entries; ties break toward lower indices."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    batch = np.atleast_2d(p).copy()
    if batch.shape[1] < 2:
        raise ValueError("need at least 2 classes to swap")
    rows = np.arange(batch.shape[0])
    top1 = np.argmax(batch, axis=1)
    masked = batch.copy()
    masked[rows, top1] = -np.inf
    top2 = np.argmax(masked, axis=1)
    v1 = batch[rows, top1].copy()
    batch[rows, top1] = batch[rows, top2]
    batch[rows, top2] = v1
    return batch[0] if single else batch


# ---------------------------------------------------------------------------
# Bundle and the purify pipeline
# ---------------------------------------------------------------------------


@dataclass
class PurifierBundle:
    reformer: ConfidenceReformer
    index: PredictionIndex
    swap_plan: SwapPlan
    reformer_enabled: bool = True
    swapper_enabled: bool = True


def purify(bundle: PurifierBundle, model: Mlp, x: np.ndarray) -> np.ndarray:
    """Full defended prediction for raw inputs: query the target, reform the
    confidence, and swap the label when the raw confidence matches the index.

    Both the latent noise and the member match depend only on the raw
    confidence, so identical queries always produce identical outputs.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    conf = predict_confidence(model, x)
    out = purify_confidences(bundle, np.atleast_2d(conf))
    return out[0] if single else out


def purify_confidences(bundle: PurifierBundle, conf: np.ndarray) -> np.ndarray:
    """Purify already-computed raw confidence rows (the black-box output path)."""
    conf = np.atleast_2d(np.asarray(conf, dtype=np.float64))
    if bundle.reformer_enabled:
        out = reform(bundle.reformer, conf, noise_mode="sample")
    else:
        out = conf.copy()
    if bundle.swapper_enabled and bundle.index.size > 0:
        matched = match_members(bundle.index, conf)
        if matched.any():
            out[matched] = swap_label(out[matched])
    return out


def train_purifier(
    model: Mlp,
    d1: Dataset,
    d2: Dataset,
    acc_train: float,
    acc_test: float,
    cfg: CvaeConfig,
    k_nn: int = 1,
    tau: float = 1e-7,
    seed: int | None = None,
) -> PurifierBundle:
    """Train the reformer on d2, then fix the swap subset of d1 and index it.

    Callers must pass a d2 disjoint from d1; the reformer only works as a
    defense when it has seen non-member confidences exclusively.
    """
    reformer = train_reformer(model, d2, cfg)
    p_swap = compute_swap_rate(acc_train, acc_test)
    plan = make_swap_plan(d1.n, p_swap, cfg.seed if seed is None else seed)
    index = build_index(model, d1, plan, k_nn=k_nn, tau=tau)
    return PurifierBundle(reformer=reformer, index=index, swap_plan=plan)


# ---------------------------------------------------------------------------
# Serialization: two model files, an index file (magic "PRFI", entry count
# u32, k u32, float32 little-endian entries), and a JSON sidecar.
# ---------------------------------------------------------------------------


def save_index(index: PredictionIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<II", index.size, index.entries.shape[1]))
        fh.write(np.ascontiguousarray(index.entries, dtype="<f4").tobytes())


def load_index(path, k_nn: int = 1, tau: float = 1e-7) -> PredictionIndex:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != INDEX_MAGIC:
        raise nncore.ModelFormatError("bad index magic bytes")
    count, k = struct.unpack_from("<II", raw, 4)
    expected = 12 + count * k * 4
    if len(raw) != expected:
        raise nncore.ModelFormatError("index file length mismatch")
    entries = np.frombuffer(raw, dtype="<f4", count=count * k, offset=12)
    return PredictionIndex(
        entries=entries.reshape(count, k).astype(np.float64), k_nn=k_nn, tau=tau
    )


def save_bundle(bundle: PurifierBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nncore.save_model(bundle.reformer.encoder, directory / "encoder.prfm")
    nncore.save_model(bundle.reformer.decoder, directory / "decoder.prfm")
    save_index(bundle.index, directory / "index.prfi")
    sidecar = {
        "n_classes": bundle.reformer.n_classes,
        "latent_dim": bundle.reformer.latent_dim,
        "sigma": bundle.reformer.sigma,
        "reformer_seed": bundle.reformer.seed,
        "swap_plan": {
            "p_swap": bundle.swap_plan.p_swap,
            "indices": bundle.swap_plan.indices.tolist(),
            "seed": bundle.swap_plan.seed,
        },
        "k_nn": bundle.index.k_nn,
        "tau": bundle.index.tau,
        "reformer_enabled": bundle.reformer_enabled,
        "swapper_enabled": bundle.swapper_enabled,
    }
    with open(directory / "bundle.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_bundle(directory) -> PurifierBundle:
    directory = Path(directory)
    with open(directory / "bundle.json") as fh:
        sidecar = json.load(fh)
    encoder = nncore.load_model(directory / "encoder.prfm")
    decoder = nncore.load_model(directory / "decoder.prfm")
    index = load_index(
        directory / "index.prfi", k_nn=sidecar["k_nn"], tau=sidecar["tau"]
    )
    reformer = ConfidenceReformer(
        encoder=encoder,
        decoder=decoder,
        n_classes=sidecar["n_classes"],
        latent_dim=sidecar["latent_dim"],
        sigma=sidecar["sigma"],
        seed=sidecar["reformer_seed"],
    )
    plan = SwapPlan(
        p_swap=sidecar["swap_plan"]["p_swap"],
        indices=np.asarray(sidecar["swap_plan"]["indices"], dtype=np.int64),
        seed=sidecar["swap_plan"]["seed"],
    )
    return PurifierBundle(
        reformer=reformer,
        index=index,
        swap_plan=plan,
        reformer_enabled=sidecar["reformer_enabled"],
        swapper_enabled=sidecar["swapper_enabled"],
    )
