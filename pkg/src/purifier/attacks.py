"""Black-box data-inference attacks against a prediction oracle.

Every attack sees the target only through an oracle exposing
``predict(X) -> (n, k) confidence rows`` and ``n_classes``; auxiliary
knowledge (ground truth, known member/non-member subsets, the defense
recipe for the adaptive attacker) is declared per attack. Membership
attacks are always evaluated on balanced held-out member/non-member sets
disjoint from whatever the attack trained on, so chance level is exactly
one half.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import defense, nncore
from .data import Dataset
from .defense import CvaeConfig
from .nncore import AdamState, Mlp
from .target import ClassifierConfig, predict_confidence, train_target


@dataclass
class LabeledSet:
    """Feature rows with ground-truth labels (and optionally a sensitive value)."""

    X: np.ndarray
    y: np.ndarray
    sensitive: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ValueError("feature/label count mismatch")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "LabeledSet":
        return cls(ds.X, ds.y, ds.sensitive)


@dataclass
class AttackContext:
    """Everything an attacker may legitimately hold.

    ``oracle`` is the only channel to the target. Aux sets feed attack
    training; eval sets are the balanced held-out members/non-members the
    attack is scored on.
    """

    oracle: object  # predict(X) -> (n, k); n_classes
    n_classes: int
    aux_members: LabeledSet
    aux_nonmembers: LabeledSet
    eval_members: LabeledSet
    eval_nonmembers: LabeledSet
    shadow_config: ClassifierConfig | None = None
    n_sensitive: int = 0
    seed: int = 0


@dataclass
class DefenseRecipe:
    """Full defense configuration, as known to the adaptive attacker."""

    cvae: CvaeConfig
    reference: Dataset  # the defender's reformer training data
    k_nn: int = 1
    tau: float = 1e-7
    reformer_enabled: bool = True
    swapper_enabled: bool = True


@dataclass
class MembershipAttackResult:
    attack: str
    accuracy: float
    auc: float
    threshold: float
    scores_members: np.ndarray
    scores_nonmembers: np.ndarray
    seed: int
    wall_clock_s: float = 0.0
    target_arm: str = ""
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "attack": self.attack,
            "target_arm": self.target_arm,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "threshold": self.threshold,
            "seed": self.seed,
            "wall_clock": self.wall_clock_s,
        }


def boundary_attack_record(target_arm: str = "") -> dict:
    """Placeholder record for the out-of-scope decision-boundary attack."""
    return {
        "attack": "boundary",
        "target_arm": target_arm,
        "status": "not_implemented",
        "accuracy": None,
        "auc": None,
    }


# ---------------------------------------------------------------------------
# Scoring helpers
# ---------------------------------------------------------------------------


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(x):
        end = start
        while end + 1 < len(x) and sx[end + 1] == sx[start]:
            end += 1
        ranks[order[start : end + 1]] = 0.5 * (start + end) + 1.0
        start = end + 1
    return ranks


def auc_score(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Rank-based AUC with tie averaging."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need scores on both sides")
    ranks = _average_ranks(np.concatenate([pos, neg]))
    rank_sum = ranks[: len(pos)].sum()
    return float((rank_sum - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def balanced_accuracy(
    scores_members: np.ndarray, scores_nonmembers: np.ndarray, threshold: float
) -> float:
    """Mean of true-positive and true-negative rates for 'member iff score > t'."""
    tpr = float(np.mean(np.asarray(scores_members) > threshold))
    tnr = float(np.mean(np.asarray(scores_nonmembers) <= threshold))
    return (tpr + tnr) / 2


def best_threshold(scores_members: np.ndarray, scores_nonmembers: np.ndarray) -> float:
    """Threshold maximizing balanced accuracy over midpoints of observed scores."""
    merged = np.unique(np.concatenate([scores_members, scores_nonmembers]))
    candidates = [merged[0] - 1.0]
    candidates.extend((merged[:-1] + merged[1:]) / 2)
    candidates.append(merged[-1] + 1.0)
    best_t, best_acc = candidates[0], -1.0
    for t in candidates:
        acc = balanced_accuracy(scores_members, scores_nonmembers, t)
        if acc > best_acc:
            best_t, best_acc = t, acc
    return float(best_t)


def _balanced_eval(ctx: AttackContext) -> tuple[LabeledSet, LabeledSet]:
    n = min(len(ctx.eval_members), len(ctx.eval_nonmembers))
    if n == 0:
        raise ValueError("empty evaluation set")
    m, nm = ctx.eval_members, ctx.eval_nonmembers
    return (
        LabeledSet(m.X[:n], m.y[:n], None if m.sensitive is None else m.sensitive[:n]),
        LabeledSet(nm.X[:n], nm.y[:n], None if nm.sensitive is None else nm.sensitive[:n]),
    )


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _top_sorted(conf: np.ndarray, top_k: int) -> np.ndarray:
    ordered = np.sort(conf, axis=1)[:, ::-1]
    return ordered[:, :top_k] if top_k else ordered


@dataclass(frozen=True)
class AttackNetConfig:
    # shared recipe for the little attack classifiers
    hidden: int = 128
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64


def _train_scorer(
    features: np.ndarray,
    labels: np.ndarray,
    n_out: int,
    seed: int,
    cfg: AttackNetConfig = AttackNetConfig(),
) -> Mlp:
    model = nncore.build_mlp(
        [features.shape[1], cfg.hidden, n_out],
        hidden_activation="relu",
        output_activation="softmax",
        seed=seed,
        dtype=np.float32,
    )
    nncore.fit(
        model,
        features.astype(np.float32),
        labels,
        "cross_entropy",
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        state=AdamState(lr=cfg.lr),
        seed=seed + 1,
    )
    return model


def _score(model: Mlp, features: np.ndarray) -> np.ndarray:
    out = nncore.forward(model.astype(np.float64), np.asarray(features, dtype=np.float64))[-1]
    return out[:, 1]


def _membership_result(
    name: str,
    scores_m: np.ndarray,
    scores_n: np.ndarray,
    threshold: float,
    ctx: AttackContext,
    started: float,
    extra: dict | None = None,
) -> MembershipAttackResult:
    return MembershipAttackResult(
        attack=name,
        accuracy=balanced_accuracy(scores_m, scores_n, threshold),
        auc=auc_score(scores_m, scores_n),
        threshold=threshold,
        scores_members=scores_m,
        scores_nonmembers=scores_n,
        seed=ctx.seed,
        wall_clock_s=time.perf_counter() - started,
        extra=extra or {},
    )


# ---------------------------------------------------------------------------
# Membership attacks
# ---------------------------------------------------------------------------


def nsh_attack(ctx: AttackContext, net: AttackNetConfig = AttackNetConfig()) -> MembershipAttackResult:
    """Membership classifier on (confidence, one-hot ground truth); the
    attacker knows both membership and ground truth of its aux data, so
    no shadow model is involved."""
    started = time.perf_counter()
    if len(ctx.aux_members) == 0 or len(ctx.aux_nonmembers) == 0:
        raise ValueError("aux data must contain both members and non-members")
    k = ctx.n_classes

    def featurize(ls: LabeledSet) -> np.ndarray:
        conf = ctx.oracle.predict(ls.X)
        return np.hstack([conf, _onehot(ls.y, k)])

    feats = np.vstack([featurize(ctx.aux_members), featurize(ctx.aux_nonmembers)])
    labels = np.concatenate(
        [np.ones(len(ctx.aux_members), dtype=np.int64), np.zeros(len(ctx.aux_nonmembers), dtype=np.int64)]
    )
    model = _train_scorer(feats, labels, 2, ctx.seed, net)
    ev_m, ev_n = _balanced_eval(ctx)
    scores_m = _score(model, featurize(ev_m))
    scores_n = _score(model, featurize(ev_n))
    result = _membership_result("nsh", scores_m, scores_n, 0.5, ctx, started)
    return result


def _shadow_split(ctx: AttackContext, seed: int) -> tuple[Dataset, Dataset]:
    """Pool the aux data (membership unknown to this attacker) and split it
    into a shadow training half and a shadow out half."""
    X = np.vstack([ctx.aux_members.X, ctx.aux_nonmembers.X])
    y = np.concatenate([ctx.aux_members.y, ctx.aux_nonmembers.y])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    half = len(y) // 2
    train_idx, out_idx = perm[:half], perm[half:]
    k = ctx.n_classes
    return (
        Dataset("shadow-train", X[train_idx], y[train_idx], k),
        Dataset("shadow-out", X[out_idx], y[out_idx], k),
    )


def mlleaks_attack(
    ctx: AttackContext,
    top_k: int = 3,
    net: AttackNetConfig = AttackNetConfig(),
) -> MembershipAttackResult:
    """Shadow-model attack: ground truth known, membership unknown.

    Half the aux pool trains a shadow with the target's architecture; the
    membership classifier learns shadow-member vs shadow-non-member from the
    shadow's top confidences and is then applied to the oracle's outputs.
    """
    started = time.perf_counter()
    if ctx.shadow_config is None:
        raise ValueError("mlleaks needs a shadow training recipe")
    shadow_train, shadow_out = _shadow_split(ctx, ctx.seed + 101)
    shadow_cfg = replace(ctx.shadow_config, seed=ctx.seed + 103, min_overfit_gap=None)
    shadow, _ = train_target(shadow_cfg, shadow_train)

    feats = np.vstack(
        [
            _top_sorted(predict_confidence(shadow, shadow_train.X), top_k),
            _top_sorted(predict_confidence(shadow, shadow_out.X), top_k),
        ]
    )
    labels = np.concatenate(
        [np.ones(shadow_train.n, dtype=np.int64), np.zeros(shadow_out.n, dtype=np.int64)]
    )
    model = _train_scorer(feats, labels, 2, ctx.seed + 105, net)
    ev_m, ev_n = _balanced_eval(ctx)
    scores_m = _score(model, _top_sorted(ctx.oracle.predict(ev_m.X), top_k))
    scores_n = _score(model, _top_sorted(ctx.oracle.predict(ev_n.X), top_k))
    return _membership_result("mlleaks", scores_m, scores_n, 0.5, ctx, started)


def adaptive_attack(
    ctx: AttackContext,
    defense_recipe: DefenseRecipe,
    top_k: int = 3,
    net: AttackNetConfig = AttackNetConfig(),
) -> MembershipAttackResult:
    """Mlleaks attacker who also replicates the deployed defense.

    The attacker trains a shadow target, fits the same purification pipeline
    on top of it (using the defender's reference data, which this threat
    model assumes known), and trains the membership classifier on purified
    shadow outputs.
    """
    started = time.perf_counter()
    if ctx.shadow_config is None:
        raise ValueError("adaptive attack needs a shadow training recipe")
    shadow_train, shadow_out = _shadow_split(ctx, ctx.seed + 201)
    shadow_cfg = replace(ctx.shadow_config, seed=ctx.seed + 203, min_overfit_gap=None)
    shadow, shadow_report = train_target(shadow_cfg, shadow_train, shadow_out)

    if defense_recipe.reformer_enabled or defense_recipe.swapper_enabled:
        cvae_cfg = replace(defense_recipe.cvae, seed=ctx.seed + 205)
        bundle = defense.train_purifier(
            shadow,
            shadow_train,
            defense_recipe.reference,
            shadow_report.acc_train,
            shadow_report.acc_test,
            cvae_cfg,
            k_nn=defense_recipe.k_nn,
            tau=defense_recipe.tau,
        )
        bundle.reformer_enabled = defense_recipe.reformer_enabled
        bundle.swapper_enabled = defense_recipe.swapper_enabled

        def shadow_predict(X):
            return defense.purify(bundle, shadow, X)

    else:

        def shadow_predict(X):
            return predict_confidence(shadow, X)

    feats = np.vstack(
        [
            _top_sorted(shadow_predict(shadow_train.X), top_k),
            _top_sorted(shadow_predict(shadow_out.X), top_k),
        ]
    )
    labels = np.concatenate(
        [np.ones(shadow_train.n, dtype=np.int64), np.zeros(shadow_out.n, dtype=np.int64)]
    )
    model = _train_scorer(feats, labels, 2, ctx.seed + 207, net)
    ev_m, ev_n = _balanced_eval(ctx)
    scores_m = _score(model, _top_sorted(ctx.oracle.predict(ev_m.X), top_k))
    scores_n = _score(model, _top_sorted(ctx.oracle.predict(ev_n.X), top_k))
    return _membership_result("adaptive", scores_m, scores_n, 0.5, ctx, started)


# ---------------------------------------------------------------------------
# BlindMI
# ---------------------------------------------------------------------------


def mean_replacement_transform(X: np.ndarray, rng: np.random.Generator, frac: float = 0.5) -> np.ndarray:
    """Tabular probe generator: overwrite a random fraction of each row's
    features with the population mean, yielding clearly atypical samples."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    out = X.copy()
    n_replace = max(1, int(round(frac * X.shape[1])))
    for i in range(len(out)):
        cols = rng.choice(X.shape[1], size=n_replace, replace=False)
        out[i, cols] = mean[cols]
    return out


def _blindmi_features(conf: np.ndarray, y: np.ndarray) -> np.ndarray:
    p_true = conf[np.arange(len(y)), y][:, None]
    return np.hstack([p_true, _top_sorted(conf, 2)])


def blindmi_attack(
    ctx: AttackContext,
    nonmember_transform=None,
    n_probe: int = 20,
) -> MembershipAttackResult:
    """Differential MMD attack: move each candidate into the probe
    non-member set; if the kernel MMD between the sets grows, the candidate
    behaved like a non-member, otherwise it is called a member."""
    started = time.perf_counter()
    rng = np.random.default_rng(ctx.seed + 301)
    transform = nonmember_transform or (lambda X, r: mean_replacement_transform(X, r))

    aux_X = np.vstack([ctx.aux_members.X, ctx.aux_nonmembers.X])
    aux_y = np.concatenate([ctx.aux_members.y, ctx.aux_nonmembers.y])
    pick = rng.choice(len(aux_X), size=min(n_probe, len(aux_X)), replace=False)
    probe_X = transform(aux_X[pick], rng)
    probe_conf = ctx.oracle.predict(probe_X)
    probe_feat = _blindmi_features(probe_conf, aux_y[pick])

    ev_m, ev_n = _balanced_eval(ctx)
    cand_X = np.vstack([ev_m.X, ev_n.X])
    cand_y = np.concatenate([ev_m.y, ev_n.y])
    cand_feat = _blindmi_features(ctx.oracle.predict(cand_X), cand_y)

    scores = _blindmi_scores(probe_feat, cand_feat)
    scores_m, scores_n = scores[: len(ev_m)], scores[len(ev_m) :]
    return _membership_result("blindmi", scores_m, scores_n, 0.0, ctx, started)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2 * a @ b.T, 0.0)


def _gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-_sq_dists(a, b) / (2 * bandwidth**2))


def _blindmi_scores(probe: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Per-candidate drop in squared MMD when that candidate moves from the
    candidate set into the probe set. Members lower the separation when
    treated as non-members, so larger scores mean more member-like."""
    pooled = np.vstack([probe, candidates])
    d2 = _sq_dists(pooled, pooled)
    pair = np.sqrt(d2[np.triu_indices(len(pooled), k=1)])
    bandwidth = float(np.median(pair))
    if not np.isfinite(bandwidth) or bandwidth <= 0:
        raise ValueError("degenerate kernel bandwidth: all feature rows coincide")

    p, m = len(probe), len(candidates)
    k_pp = _gaussian_kernel(probe, probe, bandwidth)
    k_pc = _gaussian_kernel(probe, candidates, bandwidth)
    k_cc = _gaussian_kernel(candidates, candidates, bandwidth)

    sum_pp = float(k_pp.sum())
    sum_pc = float(k_pc.sum())
    sum_cc = float(k_cc.sum())
    row_p = k_pc.sum(axis=0)  # kernel mass between candidate i and the probes
    row_c = k_cc.sum(axis=1)  # kernel mass between candidate i and all candidates

    base = sum_pp / p**2 + sum_cc / m**2 - 2 * sum_pc / (p * m)
    moved_pp = sum_pp + 2 * row_p + 1.0
    moved_cc = sum_cc - 2 * row_c + 1.0
    moved_pc = sum_pc - row_p + row_c - 1.0
    moved = (
        moved_pp / (p + 1) ** 2
        + moved_cc / (m - 1) ** 2
        - 2 * moved_pc / ((p + 1) * (m - 1))
    )
    return base - moved


# ---------------------------------------------------------------------------
# Label-only attacks
# ---------------------------------------------------------------------------


def gap_attack(ctx: AttackContext) -> MembershipAttackResult:
    """Predict member exactly when the oracle's label matches the ground truth."""
    started = time.perf_counter()
    ev_m, ev_n = _balanced_eval(ctx)
    pred_m = np.argmax(ctx.oracle.predict(ev_m.X), axis=1)
    pred_n = np.argmax(ctx.oracle.predict(ev_n.X), axis=1)
    scores_m = (pred_m == ev_m.y).astype(np.float64)
    scores_n = (pred_n == ev_n.y).astype(np.float64)
    return _membership_result("gap", scores_m, scores_n, 0.5, ctx, started)


def transfer_attack(
    ctx: AttackContext,
    shadow_epochs: int | None = None,
    include_candidates: bool = True,
) -> MembershipAttackResult:
    """Label-only transfer attack.

    The attacker's pool is relabeled with the oracle's predicted labels; by
    default the pool joins the aux data with the candidate points themselves,
    since label-only queries on candidates are free in this threat model and
    distill the target's labeling around every point under test. A shadow
    with the target's architecture is trained on the relabeled pool, and the
    membership score of a query is the shadow's confidence in the label the
    oracle assigns to it: memorized member labels are locally consistent
    while prediction errors are not. The decision threshold is tuned on the
    aux pool, where this attacker knows membership.
    """
    started = time.perf_counter()
    if ctx.shadow_config is None:
        raise ValueError("transfer attack needs a shadow training recipe")
    pool = [ctx.aux_members.X, ctx.aux_nonmembers.X]
    if include_candidates:
        pool.extend([ctx.eval_members.X, ctx.eval_nonmembers.X])
    pool_X = np.vstack(pool)
    relabels = np.argmax(ctx.oracle.predict(pool_X), axis=1)
    shadow_cfg = replace(ctx.shadow_config, seed=ctx.seed + 401, min_overfit_gap=None)
    if shadow_epochs is not None:
        shadow_cfg = replace(shadow_cfg, epochs=shadow_epochs)
    shadow, _ = train_target(
        shadow_cfg, Dataset("transfer-shadow", pool_X, relabels, ctx.n_classes)
    )

    def scores(X: np.ndarray) -> np.ndarray:
        oracle_labels = np.argmax(ctx.oracle.predict(X), axis=1)
        shadow_conf = predict_confidence(shadow, X)
        return shadow_conf[np.arange(len(X)), oracle_labels]

    threshold = best_threshold(scores(ctx.aux_members.X), scores(ctx.aux_nonmembers.X))
    ev_m, ev_n = _balanced_eval(ctx)
    return _membership_result(
        "transfer", scores(ev_m.X), scores(ev_n.X), threshold, ctx, started
    )


# ---------------------------------------------------------------------------
# Inversion and attribute inference
# ---------------------------------------------------------------------------


def inversion_attack(
    ctx: AttackContext,
    inv_train: Dataset,
    inv_test: Dataset,
    epochs: int = 60,
    hidden: tuple = (128,),
    lr: float = 1e-3,
    output_activation: str = "auto",
) -> tuple[Mlp, float]:
    """Train a confidence-to-input reconstructor; report held-out mean
    squared error between inputs and reconstructions."""
    if output_activation == "auto":
        in_unit_box = inv_train.X.min() >= 0.0 and inv_train.X.max() <= 1.0
        output_activation = "sigmoid" if in_unit_box else "identity"
    conf_train = ctx.oracle.predict(inv_train.X)
    model = nncore.build_mlp(
        [ctx.n_classes, *hidden, inv_train.d],
        hidden_activation="relu",
        output_activation=output_activation,
        seed=ctx.seed + 501,
        dtype=np.float32,
    )
    try:
        nncore.fit(
            model,
            conf_train.astype(np.float32),
            inv_train.X.astype(np.float32),
            "mse",
            epochs=epochs,
            batch_size=64,
            state=AdamState(lr=lr),
            seed=ctx.seed + 503,
        )
    except nncore.NumericsError as exc:
        raise RuntimeError(f"inversion model diverged: {exc}") from exc
    conf_test = ctx.oracle.predict(inv_test.X)
    recon = nncore.forward(model.astype(np.float64), conf_test)[-1]
    return model, nncore.mse(recon, inv_test.X)


def attribute_attack(
    ctx: AttackContext, net: AttackNetConfig = AttackNetConfig()
) -> float:
    """Infer the sensitive attribute from confidence rows; returns held-out
    inference accuracy (chance level is 1/s)."""
    if ctx.n_sensitive < 2:
        raise ValueError("attribute inference needs sensitive labels")
    for ls in (ctx.aux_members, ctx.aux_nonmembers, ctx.eval_members, ctx.eval_nonmembers):
        if ls.sensitive is None:
            raise ValueError("attribute inference needs sensitive labels")
    feats = np.vstack(
        [ctx.oracle.predict(ctx.aux_members.X), ctx.oracle.predict(ctx.aux_nonmembers.X)]
    )
    labels = np.concatenate([ctx.aux_members.sensitive, ctx.aux_nonmembers.sensitive])
    model = _train_scorer(feats, labels, ctx.n_sensitive, ctx.seed + 601, net)
    ev_m, ev_n = _balanced_eval(ctx)
    eval_feats = np.vstack([ctx.oracle.predict(ev_m.X), ctx.oracle.predict(ev_n.X)])
    eval_labels = np.concatenate([ev_m.sensitive, ev_n.sensitive])
    pred = np.argmax(
        nncore.forward(model.astype(np.float64), eval_feats)[-1], axis=1
    )
    return float(np.mean(pred == eval_labels))
