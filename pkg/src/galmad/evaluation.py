"""Detection and localization scoring harness.

Turns labeled windows into confusion counts and the headline metrics
(accuracy, recall, specificity), runs end-to-end experiments that train a
model and score a held-out mix, and tallies per-anomaly-type localization
hit rates.  Reports are plain dictionaries, JSON- and CSV-serializable.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Topology
from .localization import attribution, localize
from .model import (
    GalMadConfig,
    ModelParams,
    train,
    window_losses,
)
from .pipeline import LabeledWindow

__all__ = [
    "FEATURE_FAMILIES",
    "EXPECTED_FAMILY",
    "ConfusionCounts",
    "metrics",
    "evaluate_detection",
    "run_experiment",
    "top_feature_family",
    "run_localization_eval",
    "write_metrics_table",
    "write_localization_table",
]

# Column index families used to judge whether localization pointed at the
# right kind of telemetry (indices into the 22-feature layout).
FEATURE_FAMILIES = {
    "cpu": [5, 6, 7],
    "fs": [16, 17, 18],
    "rt": [19, 20, 21],
}

# The feature family a correct localization should surface per anomaly type.
EXPECTED_FAMILY = {
    "high-cpu": "cpu",
    "high-fileio": "fs",
    "rt-delay": "rt",
    "high-latency": "rt",
}


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def update(self, actual_anomalous: bool, predicted_anomalous: bool):
        if actual_anomalous:
            if predicted_anomalous:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if predicted_anomalous:
                self.fp += 1
            else:
                self.tn += 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, recall, specificity; undefined ratios come back as None
    with the reason listed under ``undefined``."""
    out = {"accuracy": None, "recall": None, "specificity": None,
           "undefined": []}
    if counts.total > 0:
        out["accuracy"] = (counts.tp + counts.tn) / counts.total
    else:
        out["undefined"].append("accuracy: no windows")
    pos = counts.tp + counts.fn
    if pos > 0:
        out["recall"] = counts.tp / pos
    else:
        out["undefined"].append("recall: no anomalous windows")
    neg = counts.tn + counts.fp
    if neg > 0:
        out["specificity"] = counts.tn / neg
    else:
        out["undefined"].append("specificity: no normal windows")
    return out


def evaluate_detection(params: ModelParams, config: GalMadConfig,
                       test_windows: list[LabeledWindow], topo: Topology
                       ) -> tuple[ConfusionCounts, np.ndarray]:
    """Score labeled windows; returns confusion counts and per-window losses."""
    counts = ConfusionCounts()
    if not test_windows:
        return counts, np.zeros(0)
    batch = np.stack([w.tensor for w in test_windows])
    losses = window_losses(params, batch, topo)
    for w, loss in zip(test_windows, losses):
        counts.update(w.is_anomalous, bool(loss > config.threshold))
    return counts, losses


def run_experiment(config: GalMadConfig, train_windows, test_windows,
                   topo: Topology, ratio: str = "", report_path=None,
                   log_fn=None) -> dict:
    """Train on normal windows, score the labeled test mix, and report.

    ``train_windows`` may be LabeledWindow objects or raw (t, n, k) arrays;
    any anomalous training window is rejected up front.
    """
    tensors = []
    for w in train_windows:
        if isinstance(w, LabeledWindow):
            if w.is_anomalous:
                raise ValueError(
                    f"training set contains an anomalous window ({w.label})"
                )
            tensors.append(w.tensor)
        else:
            tensors.append(np.asarray(w, dtype=np.float64))
    started = time.perf_counter()
    params, log = train(config, np.stack(tensors), topo, log_fn=log_fn)
    counts, losses = evaluate_detection(params, config, test_windows, topo)
    anomalous = np.array([w.is_anomalous for w in test_windows], dtype=bool)
    report = {
        "variant": config.variant,
        "ratio": ratio,
        "seed": config.seed,
        "config": config.fingerprint(),
        "counts": counts.to_dict(),
        "metrics": metrics(counts),
        "mean_loss_normal": (float(losses[~anomalous].mean())
                             if (~anomalous).any() else None),
        "mean_loss_anomalous": (float(losses[anomalous].mean())
                                if anomalous.any() else None),
        "final_train_loss": log[-1]["mean_loss"],
        "runtime_s": time.perf_counter() - started,
    }
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2),
                                     encoding="utf-8")
    return report, params


def top_feature_family(attr, service: str) -> str:
    """Feature family with the most positive attribution mass in the given
    service's row."""
    row = np.maximum(attr.values[attr.services.index(service)], 0.0)
    scores = {fam: row[[i for i in idx if i < row.size]].sum()
              for fam, idx in FEATURE_FAMILIES.items()}
    return max(sorted(scores), key=lambda f: scores[f])


def run_localization_eval(params: ModelParams, config: GalMadConfig,
                          topo: Topology,
                          cases: dict[str, list[tuple[LabeledWindow, str]]],
                          background=None, n_permutations: int = 8,
                          seed: int = 0, groups=None) -> dict:
    """Per-anomaly-type localization hit rates.

    ``cases`` maps anomaly type to (window, target_service) pairs.  For each
    window the attributed service is compared against the target; where the
    anomaly type has an expected feature family, the dominant family in the
    attributed service's row is checked too.
    """
    out = {}
    for atype in sorted(cases):
        service_hits = family_hits = 0
        pairs = cases[atype]
        for i, (window, target) in enumerate(pairs):
            attr = attribution(params, window.tensor, topo, config,
                               background=background, groups=groups,
                               n_permutations=n_permutations,
                               seed=seed + i, window_start=window.start_ts)
            verdict = localize(attr)
            if verdict.service == target:
                service_hits += 1
                if atype in EXPECTED_FAMILY:
                    fam = top_feature_family(attr, verdict.service)
                    family_hits += int(fam == EXPECTED_FAMILY[atype])
        entry = {"total": len(pairs), "service_hits": service_hits}
        if atype in EXPECTED_FAMILY:
            entry["expected_family"] = EXPECTED_FAMILY[atype]
            entry["family_hits"] = family_hits
        out[atype] = entry
    return out


def write_metrics_table(reports: list[dict], path) -> None:
    """CSV table of experiment reports, one row per run."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "ratio", "seed", "accuracy", "recall",
                         "specificity", "tp", "fp", "tn", "fn",
                         "mean_loss_normal", "mean_loss_anomalous"])
        for r in reports:
            m, c = r["metrics"], r["counts"]
            writer.writerow([
                r["variant"], r["ratio"], r["seed"], m["accuracy"],
                m["recall"], m["specificity"], c["tp"], c["fp"], c["tn"],
                c["fn"], r["mean_loss_normal"], r["mean_loss_anomalous"],
            ])


def write_localization_table(results: dict, path) -> None:
    """CSV table of per-anomaly-type localization hit rates."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anomaly_type", "total", "service_hits",
                         "expected_family", "family_hits"])
        for atype in sorted(results):
            r = results[atype]
            writer.writerow([atype, r["total"], r["service_hits"],
                             r.get("expected_family", ""),
                             r.get("family_hits", "")])
