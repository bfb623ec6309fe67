"""Target classifier training and black-box confidence prediction.

The training recipe deliberately supports an overfit regime (many epochs,
little or no weight decay) so that a member/non-member accuracy gap exists
for the defense to remove.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .data import Dataset
from .nncore import AdamState, Mlp, SgdConfig


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


class OverfitRegimeError(RuntimeError):
    """Requested overfit gap between train and test accuracy was not reached."""


@dataclass
class ClassifierConfig:
    hidden_sizes: tuple = (256, 128)
    activation: str = "relu"
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_schedule: tuple = ()  # (epoch, lr) pairs
    epochs: int = 50
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    min_overfit_gap: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    acc_train: float
    acc_test: float | None
    loss_curve: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    epochs: int = 0
    seed: int = 0

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "acc_train": self.acc_train,
            "acc_test": self.acc_test,
            "loss_curve": [float(v) for v in self.loss_curve],
            "epochs": self.epochs,
            "seed": self.seed,
        }
        if include_timing:
            out["wall_clock_s"] = self.wall_clock_s
        return out


def _make_state(cfg: ClassifierConfig):
    if cfg.optimizer == "adam":
        return AdamState(lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return SgdConfig(lr=cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def train_target(
    cfg: ClassifierConfig, train_ds: Dataset, test_ds: Dataset | None = None
) -> tuple[Mlp, TrainReport]:
    """Train the classifier on d1 and report train/test accuracy."""
    if train_ds.n == 0:
        raise ValueError("empty training set")
    dtype = np.dtype(cfg.dtype)
    model = nncore.build_mlp(
        [train_ds.d, *cfg.hidden_sizes, train_ds.k],
        hidden_activation=cfg.activation,
        output_activation="softmax",
        seed=cfg.seed,
        dtype=dtype,
    )
    X = train_ds.X.astype(dtype)
    started = time.perf_counter()
    try:
        losses = nncore.fit(
            model,
            X,
            train_ds.y,
            "cross_entropy",
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            state=_make_state(cfg),
            seed=cfg.seed + 1,
            weight_decay=cfg.weight_decay,
            lr_schedule=cfg.lr_schedule,
        )
    except nncore.NumericsError as exc:
        raise TrainingDiverged(str(exc)) from exc
    elapsed = time.perf_counter() - started

    acc_train = accuracy(model, train_ds)
    acc_test = accuracy(model, test_ds) if test_ds is not None else None
    report = TrainReport(
        acc_train=acc_train,
        acc_test=acc_test,
        loss_curve=losses,
        wall_clock_s=elapsed,
        epochs=cfg.epochs,
        seed=cfg.seed,
    )
    if cfg.min_overfit_gap is not None:
        if acc_test is None:
            raise ValueError("min_overfit_gap requires a test set")
        if acc_train - acc_test < cfg.min_overfit_gap:
            raise OverfitRegimeError(
                f"train/test gap {acc_train - acc_test:.4f} below required "
                f"{cfg.min_overfit_gap:.4f}"
            )
    return model, report


def predict_confidence(model: Mlp, x: np.ndarray) -> np.ndarray:
    """Confidence vectors for one sample or a batch, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    out = nncore.forward(model.astype(np.float64), batch)[-1]
    return out[0] if single else out


def predicted_labels(model: Mlp, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties break toward the lowest class index."""
    conf = predict_confidence(model, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return np.argmax(conf, axis=1)


def accuracy(model: Mlp, ds: Dataset) -> float:
    return float(np.mean(predicted_labels(model, ds.X) == ds.y))
