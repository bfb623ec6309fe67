"""Synthetic dataset generation, CSV ingestion, and the evaluation data split.

Datasets hold feature rows, class labels, and an optional sensitive
attribute column. The split carves a dataset into the classifier's
training set (d1), the defender's reference set (d2), the test set (d3),
and the attacker's known member/non-member subsets drawn from d1 and d3.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


class InsufficientData(ValueError):
    """Split plan asks for more rows than the dataset has."""


class CsvFormatError(ValueError):
    """CSV file is malformed; the message names the offending line."""


@dataclass
class DataPoint:
    features: np.ndarray
    label: int
    sensitive: int | None = None


@dataclass
class Dataset:
    """Feature rows with class labels and an optional sensitive attribute."""

    name: str
    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) int64
    k: int
    sensitive: np.ndarray | None = None  # (n,) int64
    s: int = 0

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise ValueError("dataset must be a non-empty 2-D feature array")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("label count does not match row count")
        if self.k < 2:
            raise ValueError("need at least 2 classes")
        if self.y.min() < 0 or self.y.max() >= self.k:
            raise ValueError("label out of range")
        if self.sensitive is not None:
            self.sensitive = np.asarray(self.sensitive, dtype=np.int64)
            if self.sensitive.shape != (self.X.shape[0],):
                raise ValueError("sensitive count does not match row count")
            if self.s < 2:
                raise ValueError("sensitive attribute needs s >= 2 classes")
            if self.sensitive.min() < 0 or self.sensitive.max() >= self.s:
                raise ValueError("sensitive value out of range")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def point(self, i: int) -> DataPoint:
        sens = None if self.sensitive is None else int(self.sensitive[i])
        return DataPoint(self.X[i], int(self.y[i]), sens)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        sens = None if self.sensitive is None else self.sensitive[idx]
        return Dataset(
            name or self.name,
            self.X[idx],
            self.y[idx],
            self.k,
            sensitive=sens,
            s=self.s,
        )

    def equals(self, other: "Dataset") -> bool:
        if self.k != other.k or self.s != other.s:
            return False
        if not np.array_equal(self.X, other.X) or not np.array_equal(self.y, other.y):
            return False
        if (self.sensitive is None) != (other.sensitive is None):
            return False
        if self.sensitive is not None and not np.array_equal(
            self.sensitive, other.sensitive
        ):
            return False
        return True


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureComponent:
    """One generator component: a class id plus its feature distribution."""

    class_id: int
    weight: float = 1.0
    sensitive_id: int | None = None
    bernoulli_p: tuple | None = None  # per-feature on-probability
    gauss_mean: tuple | None = None
    gauss_scale: tuple | None = None


@dataclass(frozen=True)
class SynthSpec:
    name: str
    k: int
    d: int
    n: int
    components: tuple[MixtureComponent, ...]
    label_noise: float = 0.0
    seed: int = 0
    s: int = 0

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if self.n < self.k:
            raise ValueError(f"degenerate spec: n={self.n} smaller than k={self.k}")
        classes = {c.class_id for c in self.components}
        if classes != set(range(self.k)):
            raise ValueError("components must cover every class exactly")


def synthesize(spec: SynthSpec) -> Dataset:
    """Draw a dataset from the mixture; deterministic per seed, classes balanced
    within one point."""
    rng = np.random.default_rng(spec.seed)
    counts = np.full(spec.k, spec.n // spec.k, dtype=np.int64)
    counts[: spec.n % spec.k] += 1

    by_class: dict[int, list[MixtureComponent]] = {c: [] for c in range(spec.k)}
    for comp in spec.components:
        by_class[comp.class_id].append(comp)

    X = np.empty((spec.n, spec.d), dtype=np.float64)
    y = np.empty(spec.n, dtype=np.int64)
    sens = np.empty(spec.n, dtype=np.int64) if spec.s else None

    row = 0
    for cls in range(spec.k):
        comps = by_class[cls]
        weights = np.array([c.weight for c in comps], dtype=np.float64)
        weights = weights / weights.sum()
        picks = rng.choice(len(comps), size=counts[cls], p=weights)
        for pick in picks:
            comp = comps[pick]
            if comp.bernoulli_p is not None:
                p = np.asarray(comp.bernoulli_p, dtype=np.float64)
                X[row] = (rng.random(spec.d) < p).astype(np.float64)
            else:
                mean = np.asarray(comp.gauss_mean, dtype=np.float64)
                scale = np.asarray(comp.gauss_scale, dtype=np.float64)
                X[row] = rng.normal(mean, scale)
            y[row] = cls
            if sens is not None:
                sens[row] = comp.sensitive_id if comp.sensitive_id is not None else 0
            row += 1

    if spec.label_noise > 0:
        flip = rng.random(spec.n) < spec.label_noise
        offsets = rng.integers(1, spec.k, size=spec.n)
        y = np.where(flip, (y + offsets) % spec.k, y)

    return Dataset(spec.name, X, y, spec.k, sensitive=sens, s=spec.s)


def class_partner(c: int, k: int) -> int:
    """Pair classes (0,1), (2,3), ...; a trailing odd class pairs with 0."""
    p = c ^ 1
    return p if p < k else 0


def purchase_like_spec(
    n: int = 6000,
    k: int = 20,
    d: int = 64,
    seed: int = 0,
    modes_per_class: int = 20,
    pair_bits: int = 4,
    loner_frac: float = 0.15,
    within_noise: float = 0.05,
    label_noise: float = 0.0,
    name: str = "purchase-like",
) -> SynthSpec:
    """Binary-feature task built from many tight modes in cross-class pairs.

    Each mode is a bit prototype observed through a small per-bit flip
    probability. Most modes of class c have a twin a few bits away belonging
    to c's partner class, so a classifier that never saw a mode reads its
    samples as the twin class; that puts the true label of such errors at
    the runner-up position, which is also where the label swapper moves
    members. A fraction of modes are loners with no nearby twin, and
    mispredictions on those scatter over arbitrary classes.
    """
    rng = np.random.default_rng(seed)
    pair_bits = min(pair_bits, d)
    n_pairs = (k // 2) * modes_per_class if k % 2 == 0 else k * modes_per_class // 2
    components = []
    for pair in range(n_pairs):
        cls_a = (2 * pair) % k
        cls_b = class_partner(cls_a, k)
        prototype = rng.integers(0, 2, size=d).astype(np.float64)
        if rng.random() < loner_frac:
            twin = rng.integers(0, 2, size=d).astype(np.float64)
        else:
            twin = prototype.copy()
            flip = rng.choice(d, size=pair_bits, replace=False)
            twin[flip] = 1.0 - twin[flip]
        p_a = np.where(prototype > 0.5, 1.0 - within_noise, within_noise)
        p_b = np.where(twin > 0.5, 1.0 - within_noise, within_noise)
        components.append(MixtureComponent(class_id=cls_a, bernoulli_p=tuple(p_a)))
        components.append(MixtureComponent(class_id=cls_b, bernoulli_p=tuple(p_b)))
    return SynthSpec(
        name=name,
        k=k,
        d=d,
        n=n,
        components=tuple(components),
        label_noise=label_noise,
        seed=seed,
    )


def attribute_like_spec(
    n: int = 6000,
    d: int = 16,
    s: int = 5,
    seed: int = 0,
    margins: tuple = (0.35, 0.65, 1.0, 1.5, 2.2),
    name: str = "attribute-like",
) -> SynthSpec:
    """Binary classification task whose margin depends on a sensitive attribute.

    The first feature block separates the two classes with a per-sensitive-class
    margin, so the classifier's confidence leaks the sensitive value; the
    remaining block is sensitive-specific structure the label task ignores.
    """
    if len(margins) != s:
        raise ValueError("need one margin per sensitive class")
    rng = np.random.default_rng(seed)
    half = d // 2
    components = []
    for sid in range(s):
        trait = rng.normal(0.0, 0.8, size=d - half)
        for cls in (0, 1):
            direction = 1.0 if cls == 1 else -1.0
            mean = np.concatenate(
                [np.full(half, direction * margins[sid]), trait]
            )
            scale = np.ones(d)
            components.append(
                MixtureComponent(
                    class_id=cls,
                    sensitive_id=sid,
                    gauss_mean=tuple(mean),
                    gauss_scale=tuple(scale),
                )
            )
    return SynthSpec(
        name=name, k=2, d=d, n=n, components=tuple(components), seed=seed, s=s
    )


def two_gaussians_spec(n: int = 100, separation: float = 2.0, seed: int = 0) -> SynthSpec:
    """Tiny linearly separable toy used in tests."""
    comps = (
        MixtureComponent(0, gauss_mean=(0.0, 0.0), gauss_scale=(0.25, 0.25)),
        MixtureComponent(
            1, gauss_mean=(separation, separation), gauss_scale=(0.25, 0.25)
        ),
    )
    return SynthSpec(name="two-gaussians", k=2, d=2, n=n, components=comps, seed=seed)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    d1: int
    d2: int
    d3: int
    attacker_members: int
    attacker_nonmembers: int
    seed: int = 0

    def __post_init__(self) -> None:
        for label, value in (
            ("d1", self.d1),
            ("d2", self.d2),
            ("d3", self.d3),
        ):
            if value < 1:
                raise ValueError(f"{label} must be positive")
        if not 0 <= self.attacker_members <= self.d1:
            raise ValueError("attacker_members must lie within d1")
        if not 0 <= self.attacker_nonmembers <= self.d3:
            raise ValueError("attacker_nonmembers must lie within d3")


@dataclass
class Splits:
    """Index assignment for one experiment; indices refer to the parent dataset."""

    dataset: Dataset
    idx_d1: np.ndarray
    idx_d2: np.ndarray
    idx_d3: np.ndarray
    idx_attacker_members: np.ndarray
    idx_attacker_nonmembers: np.ndarray

    @property
    def d1(self) -> Dataset:
        return self.dataset.subset(self.idx_d1, "d1")

    @property
    def d2(self) -> Dataset:
        return self.dataset.subset(self.idx_d2, "d2")

    @property
    def d3(self) -> Dataset:
        return self.dataset.subset(self.idx_d3, "d3")

    @property
    def attacker_members(self) -> Dataset:
        return self.dataset.subset(self.idx_attacker_members, "attacker-members")

    @property
    def attacker_nonmembers(self) -> Dataset:
        return self.dataset.subset(self.idx_attacker_nonmembers, "attacker-nonmembers")

    @property
    def idx_eval_members(self) -> np.ndarray:
        return self.idx_d1[len(self.idx_attacker_members):]

    @property
    def idx_eval_nonmembers(self) -> np.ndarray:
        return self.idx_d3[len(self.idx_attacker_nonmembers):]

    @property
    def eval_members(self) -> Dataset:
        return self.dataset.subset(self.idx_eval_members, "eval-members")

    @property
    def eval_nonmembers(self) -> Dataset:
        return self.dataset.subset(self.idx_eval_nonmembers, "eval-nonmembers")

    def is_member(self, index: int) -> bool:
        return bool(np.isin(index, self.idx_d1))

    def manifest(self) -> dict:
        return {
            "d1": self.idx_d1.tolist(),
            "d2": self.idx_d2.tolist(),
            "d3": self.idx_d3.tolist(),
            "attacker_members": self.idx_attacker_members.tolist(),
            "attacker_nonmembers": self.idx_attacker_nonmembers.tolist(),
        }


def split(dataset: Dataset, plan: SplitPlan) -> Splits:
    """Disjoint d1/d2/d3 partition plus attacker subsets, deterministic per seed."""
    total = plan.d1 + plan.d2 + plan.d3
    if total > dataset.n:
        raise InsufficientData(
            f"plan needs {total} rows, dataset has {dataset.n}"
        )
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(dataset.n)
    idx_d1 = perm[: plan.d1]
    idx_d2 = perm[plan.d1 : plan.d1 + plan.d2]
    idx_d3 = perm[plan.d1 + plan.d2 : total]
    return Splits(
        dataset=dataset,
        idx_d1=idx_d1,
        idx_d2=idx_d2,
        idx_d3=idx_d3,
        idx_attacker_members=idx_d1[: plan.attacker_members],
        idx_attacker_nonmembers=idx_d3[: plan.attacker_nonmembers],
    )


def save_manifest(splits: Splits, path) -> None:
    with open(path, "w") as fh:
        json.dump(splits.manifest(), fh, indent=2, sort_keys=True)


def load_manifest(dataset: Dataset, path) -> Splits:
    with open(path) as fh:
        raw = json.load(fh)
    return Splits(
        dataset=dataset,
        idx_d1=np.asarray(raw["d1"], dtype=np.int64),
        idx_d2=np.asarray(raw["d2"], dtype=np.int64),
        idx_d3=np.asarray(raw["d3"], dtype=np.int64),
        idx_attacker_members=np.asarray(raw["attacker_members"], dtype=np.int64),
        idx_attacker_nonmembers=np.asarray(raw["attacker_nonmembers"], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# CSV in/out
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    label_col: str = "label"
    sensitive_col: str | None = None


def load_csv(path, schema: CsvSchema, name: str | None = None) -> Dataset:
    """Read a header-first CSV into a dataset; errors name the offending line."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if schema.label_col not in header:
            raise CsvFormatError(f"{path}: missing label column {schema.label_col!r}")
        if schema.sensitive_col is not None and schema.sensitive_col not in header:
            raise CsvFormatError(
                f"{path}: missing sensitive column {schema.sensitive_col!r}"
            )
        label_i = header.index(schema.label_col)
        sens_i = (
            header.index(schema.sensitive_col)
            if schema.sensitive_col is not None
            else None
        )
        feature_is = [
            i for i in range(len(header)) if i != label_i and i != sens_i
        ]
        rows, labels, sens = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: line {lineno}: expected {len(header)} cells, got {len(row)}"
                )
            try:
                labels.append(int(row[label_i]))
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {lineno}: bad label {row[label_i]!r}"
                ) from None
            if sens_i is not None:
                try:
                    sens.append(int(row[sens_i]))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: line {lineno}: bad sensitive value {row[sens_i]!r}"
                    ) from None
            try:
                rows.append([float(row[i]) for i in feature_is])
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {lineno}: non-numeric feature cell"
                ) from None
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    k = int(y.max()) + 1 if y.size else 0
    sens_arr = np.asarray(sens, dtype=np.int64) if sens_i is not None else None
    s = int(sens_arr.max()) + 1 if sens_arr is not None else 0
    return Dataset(
        name or str(path), np.asarray(rows), y, max(k, 2), sensitive=sens_arr, s=max(s, 2) if sens_arr is not None else 0
    )


def save_csv(dataset: Dataset, path, schema: CsvSchema = CsvSchema()) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{i}" for i in range(dataset.d)] + [schema.label_col]
        if dataset.sensitive is not None:
            if schema.sensitive_col is None:
                schema = CsvSchema(schema.label_col, "sensitive")
            header.append(schema.sensitive_col or "sensitive")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.X[i]] + [str(int(dataset.y[i]))]
            if dataset.sensitive is not None:
                row.append(str(int(dataset.sensitive[i])))
            writer.writerow(row)
