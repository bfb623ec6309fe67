"""Experiment orchestration: build the dataset, train both arms, run the
attack suite, and collect per-seed outcomes into report cells.

Arms: "none" is the bare target, "reformer" purifies without the label
swapper (the ablation arm), "full" is the complete defense. Attack
contexts share one seed per experiment seed so arm comparisons are
paired.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from . import defense, evaluation
from .data import Dataset, SplitPlan, Splits, attribute_like_spec, purchase_like_spec, split, synthesize
from .defense import CvaeConfig, PurifierBundle
from .evaluation import GapStats
from .nncore import Mlp
from .target import ClassifierConfig, TrainReport, predict_confidence, train_target

ARMS = ("none", "reformer", "full")
MEMBERSHIP_ATTACKS = ("nsh", "mlleaks", "adaptive", "blindmi", "gap", "transfer")
ALL_ATTACKS = MEMBERSHIP_ATTACKS + ("boundary", "inversion", "attribute")

# membership attacks run on the undefended and fully defended arms; the
# reformer-only arm gets the cheap label-facing attacks needed for the
# swapper ablation
DEFAULT_ARM_ATTACKS = {
    "none": ALL_ATTACKS,
    "reformer": ("nsh", "gap", "transfer"),
    "full": ALL_ATTACKS,
}


class ModelOracle:
    """Black-box view of the bare target."""

    def __init__(self, model: Mlp):
        self._model = model
        self.n_classes = model.output_dim

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict_confidence(self._model, np.atleast_2d(np.asarray(X, dtype=np.float64)))


class PurifyOracle:
    """Black-box view of the defended pipeline."""

    def __init__(self, bundle: PurifierBundle, model: Mlp):
        self._bundle = bundle
        self._model = model
        self.n_classes = bundle.reformer.n_classes

    def predict(self, X: np.ndarray) -> np.ndarray:
        return defense.purify(self._bundle, self._model, np.atleast_2d(np.asarray(X, dtype=np.float64)))


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict  # {"kind": ..., **params}
    plan: SplitPlan
    target: ClassifierConfig
    cvae: CvaeConfig
    k_nn: int = 1
    tau: float = 1e-7
    attack_names: tuple = ALL_ATTACKS
    arm_attacks: dict = field(default_factory=lambda: dict(DEFAULT_ARM_ATTACKS))
    arms: tuple = ARMS
    transfer_shadow_epochs: int | None = None
    inversion_epochs: int = 60
    inversion_fraction: float = 0.8
    attribute_epochs: int = 50
    seed: int = 0


def desk_config(seed: int = 0) -> ExperimentConfig:
    """The standard desk-scale task: 20 classes, 64 binary features,
    2000/2000/2000 split with 1000-strong attacker subsets."""
    return ExperimentConfig(
        name="purchase-desk",
        dataset={
            "kind": "purchase_like",
            "n": 6000,
            "k": 20,
            "d": 64,
            "modes_per_class": 20,
            "pair_bits": 6,
            "within_noise": 0.05,
        },
        plan=SplitPlan(2000, 2000, 2000, 1000, 1000),
        target=ClassifierConfig(
            hidden_sizes=(256, 128),
            epochs=150,
            lr=1e-3,
            batch_size=128,
            weight_decay=1e-5,
        ),
        cvae=CvaeConfig(
            n_classes=20,
            encoder_hidden=(64, 32),
            decoder_hidden=(32, 64),
            latent_dim=8,
            lam=3.0,
            sigma=0.2,
            epochs=150,
            lr=1e-3,
            batch_size=64,
        ),
        transfer_shadow_epochs=60,
        seed=seed,
    )


def attribute_config(seed: int = 0) -> ExperimentConfig:
    """The sensitive-attribute task: binary label whose margin depends on a
    five-valued sensitive attribute."""
    return ExperimentConfig(
        name="attribute-desk",
        dataset={"kind": "attribute_like", "n": 6000, "d": 16, "s": 5},
        plan=SplitPlan(2000, 2000, 2000, 1000, 1000),
        target=ClassifierConfig(
            hidden_sizes=(128, 64), epochs=150, lr=1e-3, batch_size=128
        ),
        cvae=CvaeConfig(
            n_classes=2,
            encoder_hidden=(32,),
            decoder_hidden=(32,),
            latent_dim=4,
            lam=3.0,
            sigma=0.5,
            epochs=150,
            lr=1e-3,
        ),
        attack_names=("nsh", "gap", "attribute"),
        arm_attacks={"none": ("nsh", "gap", "attribute"), "full": ("nsh", "gap", "attribute")},
        arms=("none", "full"),
        attribute_epochs=200,
        seed=seed,
    )


def make_dataset(config: ExperimentConfig, seed: int) -> Dataset:
    params = dict(config.dataset)
    kind = params.pop("kind")
    if kind == "purchase_like":
        return synthesize(purchase_like_spec(seed=seed, **params))
    if kind == "attribute_like":
        return synthesize(attribute_like_spec(seed=seed, **params))
    if kind == "csv":
        from .data import CsvSchema, load_csv

        return load_csv(
            params["path"],
            CsvSchema(
                label_col=params.get("label_col", "label"),
                sensitive_col=params.get("sensitive_col"),
            ),
        )
    raise ValueError(f"unknown dataset kind {kind!r}")


@dataclass
class ArmOutcome:
    acc_train: float
    acc_test: float
    attacks: dict = field(default_factory=dict)  # name -> MembershipAttackResult
    boundary: dict | None = None
    inversion_error: float | None = None
    attribute_accuracy: float | None = None
    gap_conf: GapStats | None = None
    gap_unc: GapStats | None = None
    dispersion_ratio: float | None = None

    def to_cell(self) -> dict:
        cell = {
            "acc_train": self.acc_train,
            "acc_test": self.acc_test,
            "attacks": {},
        }
        for name, result in self.attacks.items():
            cell["attacks"][name] = {
                "accuracy": result.accuracy,
                "auc": result.auc,
                "threshold": result.threshold,
            }
        if self.boundary is not None:
            cell["attacks"]["boundary"] = {"status": self.boundary["status"]}
        if self.inversion_error is not None:
            cell["inversion_error"] = self.inversion_error
        if self.attribute_accuracy is not None:
            cell["attribute_accuracy"] = self.attribute_accuracy
        if self.gap_conf is not None:
            cell["gap_stats"] = {
                "confidence": self.gap_conf.to_dict(),
                "uncertainty": self.gap_unc.to_dict(),
            }
        if self.dispersion_ratio is not None:
            cell["dispersion_ratio"] = self.dispersion_ratio
        return cell


@dataclass
class SeedResult:
    seed: int
    target_report: TrainReport
    swap_rate: float
    arms: dict = field(default_factory=dict)  # arm -> ArmOutcome
    timings: dict = field(default_factory=dict)


def _oracle_accuracy(oracle, ds: Dataset) -> float:
    pred = np.argmax(oracle.predict(ds.X), axis=1)
    return float(np.mean(pred == ds.y))


def _make_context(config: ExperimentConfig, splits: Splits, oracle, seed: int) -> atk.AttackContext:
    return atk.AttackContext(
        oracle=oracle,
        n_classes=splits.dataset.k,
        aux_members=atk.LabeledSet.from_dataset(splits.attacker_members),
        aux_nonmembers=atk.LabeledSet.from_dataset(splits.attacker_nonmembers),
        eval_members=atk.LabeledSet.from_dataset(splits.eval_members),
        eval_nonmembers=atk.LabeledSet.from_dataset(splits.eval_nonmembers),
        shadow_config=config.target,
        n_sensitive=splits.dataset.s,
        seed=seed,
    )


def _inversion_split(splits: Splits, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Sample the same fraction from each of d1, d2, d3 for inversion
    training; the remainder is the inversion test set."""
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for idx in (splits.idx_d1, splits.idx_d2, splits.idx_d3):
        perm = rng.permutation(len(idx))
        cut = int(round(fraction * len(idx)))
        train_parts.append(idx[perm[:cut]])
        test_parts.append(idx[perm[cut:]])
    ds = splits.dataset
    return (
        ds.subset(np.concatenate(train_parts), "inversion-train"),
        ds.subset(np.concatenate(test_parts), "inversion-test"),
    )


def _arm_recipe(config: ExperimentConfig, splits: Splits, arm: str) -> atk.DefenseRecipe:
    return atk.DefenseRecipe(
        cvae=config.cvae,
        reference=splits.d2,
        k_nn=config.k_nn,
        tau=config.tau,
        reformer_enabled=arm in ("reformer", "full"),
        swapper_enabled=arm == "full",
    )


def run_seed(config: ExperimentConfig, seed: int, verbose: bool = False) -> SeedResult:
    """Run the whole matrix for one seed: train, defend, attack, diagnose."""

    def log(msg: str) -> None:
        if verbose:
            print(f"[seed {seed}] {msg}", flush=True)

    dataset = make_dataset(config, seed)
    splits = split(dataset, replace(config.plan, seed=seed + 1))

    log("training target")
    target_cfg = replace(config.target, seed=seed + 2)
    model, report = train_target(target_cfg, splits.d1, splits.d3)
    log(f"target acc train={report.acc_train:.4f} test={report.acc_test:.4f}")

    log("training purifier")
    t0 = time.perf_counter()
    cvae_cfg = replace(config.cvae, seed=seed + 3)
    bundle = defense.train_purifier(
        model,
        splits.d1,
        splits.d2,
        report.acc_train,
        report.acc_test,
        cvae_cfg,
        k_nn=config.k_nn,
        tau=config.tau,
    )
    purifier_train_s = time.perf_counter() - t0

    oracles = {}
    for arm in config.arms:
        if arm == "none":
            oracles[arm] = ModelOracle(model)
        elif arm == "reformer":
            oracles[arm] = PurifyOracle(replace(bundle, swapper_enabled=False), model)
        elif arm == "full":
            oracles[arm] = PurifyOracle(bundle, model)
        else:
            raise ValueError(f"unknown arm {arm!r}")

    result = SeedResult(
        seed=seed,
        target_report=report,
        swap_rate=bundle.swap_plan.p_swap,
    )

    attack_seed = seed + 4
    inv_train, inv_test = _inversion_split(splits, config.inversion_fraction, seed + 5)
    eval_m, eval_n = splits.eval_members, splits.eval_nonmembers
    n_bal = min(eval_m.n, eval_n.n)

    test_times = {}
    for arm, oracle in oracles.items():
        log(f"arm {arm}: utility and diagnostics")
        t0 = time.perf_counter()
        conf_test = oracle.predict(splits.d3.X)
        test_times[arm] = time.perf_counter() - t0
        acc_test = float(np.mean(np.argmax(conf_test, axis=1) == splits.d3.y))
        outcome = ArmOutcome(
            acc_train=_oracle_accuracy(oracle, splits.d1),
            acc_test=acc_test,
        )

        conf_m = oracle.predict(eval_m.X[:n_bal])
        conf_n = oracle.predict(eval_n.X[:n_bal])
        outcome.gap_conf = evaluation.gap_stats(
            evaluation.confidence_in_correct(conf_m, eval_m.y[:n_bal]),
            evaluation.confidence_in_correct(conf_n, eval_n.y[:n_bal]),
        )
        outcome.gap_unc = evaluation.gap_stats(
            evaluation.uncertainties(conf_m), evaluation.uncertainties(conf_n)
        )
        if arm != "none":
            raw_m = predict_confidence(model, eval_m.X[:n_bal])
            raw_disp = evaluation.latent_dispersion(
                bundle.reformer, raw_m, eval_m.y[:n_bal]
            )
            arm_disp = evaluation.latent_dispersion(
                bundle.reformer, conf_m, eval_m.y[:n_bal]
            )
            outcome.dispersion_ratio = arm_disp / raw_disp

        ctx = _make_context(config, splits, oracle, attack_seed)
        names = config.arm_attacks.get(arm, config.attack_names)
        for name in names:
            if name not in config.attack_names:
                continue
            log(f"arm {arm}: attack {name}")
            if name == "nsh":
                outcome.attacks[name] = atk.nsh_attack(ctx)
            elif name == "mlleaks":
                outcome.attacks[name] = atk.mlleaks_attack(ctx)
            elif name == "adaptive":
                outcome.attacks[name] = atk.adaptive_attack(
                    ctx, _arm_recipe(config, splits, arm)
                )
            elif name == "blindmi":
                outcome.attacks[name] = atk.blindmi_attack(ctx)
            elif name == "gap":
                outcome.attacks[name] = atk.gap_attack(ctx)
            elif name == "transfer":
                outcome.attacks[name] = atk.transfer_attack(
                    ctx, shadow_epochs=config.transfer_shadow_epochs
                )
            elif name == "boundary":
                outcome.boundary = atk.boundary_attack_record(arm)
            elif name == "inversion":
                _, err = atk.inversion_attack(
                    ctx, inv_train, inv_test, epochs=config.inversion_epochs
                )
                outcome.inversion_error = err
            elif name == "attribute":
                if dataset.s >= 2:
                    outcome.attribute_accuracy = atk.attribute_attack(
                        ctx, atk.AttackNetConfig(epochs=config.attribute_epochs)
                    )
            else:
                raise ValueError(f"unknown attack {name!r}")
            for res in outcome.attacks.values():
                res.target_arm = arm
        result.arms[arm] = outcome

    result.timings = {
        "target_train_s": report.wall_clock_s,
        "purifier_train_s": purifier_train_s,
        "test_s": test_times,
    }
    return result


def run_matrix(config: ExperimentConfig, seeds, verbose: bool = False) -> list:
    return [run_seed(config, seed, verbose=verbose) for seed in seeds]


# ---------------------------------------------------------------------------
# Aggregation over seeds
# ---------------------------------------------------------------------------


def mean_attack_metric(results, arm: str, attack: str, metric: str = "accuracy") -> float:
    values = [getattr(r.arms[arm].attacks[attack], metric) for r in results]
    return float(np.mean(values))


def mean_arm_value(results, arm: str, getter) -> float:
    return float(np.mean([getter(r.arms[arm]) for r in results]))


def matrix_report(config: ExperimentConfig, results) -> tuple:
    """Aggregate seed results into the report plus the efficiency sidecar."""
    arms_cells = {}
    for arm in config.arms:
        per_seed = [r.arms[arm] for r in results]
        cell = {
            "acc_train": float(np.mean([a.acc_train for a in per_seed])),
            "acc_test": float(np.mean([a.acc_test for a in per_seed])),
            "attacks": {},
        }
        for name in MEMBERSHIP_ATTACKS:
            if all(name in a.attacks for a in per_seed):
                cell["attacks"][name] = {
                    "accuracy": float(np.mean([a.attacks[name].accuracy for a in per_seed])),
                    "auc": float(np.mean([a.attacks[name].auc for a in per_seed])),
                    "per_seed_accuracy": [a.attacks[name].accuracy for a in per_seed],
                    "per_seed_auc": [a.attacks[name].auc for a in per_seed],
                }
        if all(a.boundary is not None for a in per_seed):
            cell["attacks"]["boundary"] = {"status": "not_implemented"}
        if all(a.inversion_error is not None for a in per_seed):
            cell["inversion_error"] = float(np.mean([a.inversion_error for a in per_seed]))
        if all(a.attribute_accuracy is not None for a in per_seed):
            cell["attribute_accuracy"] = float(
                np.mean([a.attribute_accuracy for a in per_seed])
            )
        cell["gap_stats"] = {
            "confidence": {
                "max_gap": float(np.mean([a.gap_conf.max_gap for a in per_seed])),
                "avg_gap": float(np.mean([a.gap_conf.avg_gap for a in per_seed])),
            },
            "uncertainty": {
                "max_gap": float(np.mean([a.gap_unc.max_gap for a in per_seed])),
                "avg_gap": float(np.mean([a.gap_unc.avg_gap for a in per_seed])),
            },
        }
        if all(a.dispersion_ratio is not None for a in per_seed):
            cell["dispersion_ratio"] = float(
                np.mean([a.dispersion_ratio for a in per_seed])
            )
        arms_cells[arm] = cell

    diagnostics = {
        "swap_rate": float(np.mean([r.swap_rate for r in results])),
        "target_acc_train": float(np.mean([r.target_report.acc_train for r in results])),
        "target_acc_test": float(np.mean([r.target_report.acc_test for r in results])),
    }
    report = evaluation.assemble_report(
        experiment=config.name,
        seeds=[r.seed for r in results],
        arms=arms_cells,
        diagnostics=diagnostics,
        expected_attacks=tuple(
            n for n in config.attack_names if n not in ("inversion", "attribute")
        ),
    )
    efficiency_data = {
        "per_seed": [r.timings for r in results],
        "train_ratio": float(
            np.mean(
                [r.timings["purifier_train_s"] / r.timings["target_train_s"] for r in results]
            )
        ),
    }
    if all("full" in r.timings["test_s"] and "none" in r.timings["test_s"] for r in results):
        efficiency_data["test_ratio"] = float(
            np.mean(
                [r.timings["test_s"]["full"] / r.timings["test_s"]["none"] for r in results]
            )
        )
    return report, efficiency_data
