"""Metrics, indistinguishability diagnostics, and report assembly.

The report compares defended and undefended arms: utility, per-attack
results, inversion errors, attribute-inference accuracy, histogram gap
statistics between members and non-members, and the latent-space
dispersion of member confidences. Timing-derived numbers live in a
separate efficiency sidecar so the report file itself is byte-stable
across reruns with the same seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .defense import ConfidenceReformer, encode_mean

ABSENT = "absent"


def uncertainty(y: np.ndarray) -> float:
    """Normalized entropy of one confidence vector: 0 for one-hot, 1 for uniform."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] < 2:
        raise ValueError("need a confidence vector with k >= 2")
    k = y.shape[0]
    nz = y[y > 0]
    return float(-(nz * np.log(nz)).sum() / np.log(k))


def uncertainties(conf: np.ndarray) -> np.ndarray:
    """Row-wise normalized entropy."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[1] < 2:
        raise ValueError("need confidence rows with k >= 2")
    safe = np.where(conf > 0, conf, 1.0)  # 0 * log 0 = 0
    ent = -(conf * np.log(safe)).sum(axis=1)
    return ent / np.log(conf.shape[1])


def confidence_in_correct(conf: np.ndarray, labels: np.ndarray) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    return conf[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]


@dataclass
class GapStats:
    max_gap: float
    avg_gap: float
    bins: int

    def to_dict(self) -> dict:
        return {"max_gap": self.max_gap, "avg_gap": self.avg_gap, "bins": self.bins}


def gap_stats(member_values, nonmember_values, bins: int = 20) -> GapStats:
    """Max and mean absolute difference between normalized member and
    non-member histograms of values in [0, 1]."""
    m = np.asarray(member_values, dtype=np.float64)
    n = np.asarray(nonmember_values, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ValueError("both samples must be non-empty")
    hist_m, _ = np.histogram(m, bins=bins, range=(0.0, 1.0))
    hist_n, _ = np.histogram(n, bins=bins, range=(0.0, 1.0))
    diff = np.abs(hist_m / m.size - hist_n / n.size)
    return GapStats(max_gap=float(diff.max()), avg_gap=float(diff.mean()), bins=bins)


def latent_scatter(
    reformer: ConfidenceReformer,
    confidences: np.ndarray,
    labels: np.ndarray | None = None,
) -> np.ndarray:
    """2-D projection of the encoder means (the first two latent dimensions)."""
    means = encode_mean(reformer, confidences, labels)
    return means[:, :2] if means.shape[1] > 2 else means


def latent_dispersion(
    reformer: ConfidenceReformer, confidences: np.ndarray, class_labels: np.ndarray
) -> float:
    """Mean distance of encoder means to their class centroid in latent space."""
    means = encode_mean(reformer, confidences)
    class_labels = np.asarray(class_labels, dtype=np.int64)
    dists = []
    for cls in np.unique(class_labels):
        rows = means[class_labels == cls]
        centroid = rows.mean(axis=0)
        dists.append(np.linalg.norm(rows - centroid, axis=1).mean())
    return float(np.mean(dists))


def export_scatter(path, points: np.ndarray, labels, is_member) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label", "is_member"])
        for (px, py), lab, mem in zip(points, labels, is_member):
            writer.writerow([repr(float(px)), repr(float(py)), int(lab), int(mem)])


@dataclass
class EfficiencyRatios:
    train_ratio: float
    test_ratio: float

    def to_dict(self) -> dict:
        return {"train_ratio": self.train_ratio, "test_ratio": self.test_ratio}


def efficiency(
    target_train_s: float,
    defense_train_s: float,
    target_test_s: float,
    defense_test_s: float,
) -> EfficiencyRatios:
    """Defense cost relative to the bare target, for training and inference."""
    if target_train_s <= 0 or target_test_s <= 0:
        raise ValueError("baseline times must be positive")
    return EfficiencyRatios(
        train_ratio=defense_train_s / target_train_s,
        test_ratio=defense_test_s / target_test_s,
    )


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

_CSV_COLUMNS = (
    "arm",
    "acc_train",
    "acc_test",
    "nsh",
    "mlleaks",
    "adaptive",
    "blindmi",
    "gap",
    "transfer_auc",
    "boundary",
    "inversion_error",
    "attribute_accuracy",
)


@dataclass
class EvalReport:
    experiment: str
    seeds: list
    arms: dict  # arm name -> cell dict
    diagnostics: dict
    notes: dict

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seeds": self.seeds,
            "arms": self.arms,
            "diagnostics": self.diagnostics,
            "notes": self.notes,
        }


def assemble_report(
    experiment: str,
    seeds: list,
    arms: dict,
    diagnostics: dict,
    expected_attacks: tuple,
    notes: dict | None = None,
) -> EvalReport:
    """Collect per-arm cells; anything configured but missing is marked
    explicitly rather than dropped."""
    filled = {}
    for arm, cells in arms.items():
        cell = dict(cells)
        attacks = dict(cell.get("attacks", {}))
        for name in expected_attacks:
            if name not in attacks:
                attacks[name] = ABSENT
        cell["attacks"] = attacks
        filled[arm] = cell
    return EvalReport(
        experiment=experiment,
        seeds=list(seeds),
        arms=filled,
        diagnostics=diagnostics,
        notes=notes or {},
    )


def report_json_bytes(report: EvalReport) -> bytes:
    return (json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n").encode()


def _csv_cell(cell: dict, attack: str, key: str):
    entry = cell.get("attacks", {}).get(attack, ABSENT)
    if not isinstance(entry, dict):
        return entry if isinstance(entry, str) else ABSENT
    value = entry.get(key)
    return ABSENT if value is None else value


def write_report(report: EvalReport, directory, efficiency_data: dict | None = None) -> dict:
    """Write report.json, report.csv, and the efficiency sidecar; returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "report.json"
    json_path.write_bytes(report_json_bytes(report))
    csv_path = directory / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for arm, cell in sorted(report.arms.items()):
            writer.writerow(
                [
                    arm,
                    cell.get("acc_train", ABSENT),
                    cell.get("acc_test", ABSENT),
                    _csv_cell(cell, "nsh", "accuracy"),
                    _csv_cell(cell, "mlleaks", "accuracy"),
                    _csv_cell(cell, "adaptive", "accuracy"),
                    _csv_cell(cell, "blindmi", "accuracy"),
                    _csv_cell(cell, "gap", "accuracy"),
                    _csv_cell(cell, "transfer", "auc"),
                    _csv_cell(cell, "boundary", "status"),
                    cell.get("inversion_error", ABSENT),
                    cell.get("attribute_accuracy", ABSENT),
                ]
            )
    paths = {"report_json": str(json_path), "report_csv": str(csv_path)}
    if efficiency_data is not None:
        eff_path = directory / "efficiency.json"
        with open(eff_path, "w") as fh:
            json.dump(efficiency_data, fh, indent=2, sort_keys=True)
        paths["efficiency_json"] = str(eff_path)
    return paths
