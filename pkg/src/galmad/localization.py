"""Shapley-value attribution of a flagged window to services and features.

Each (service, feature) column of the window is a player; the value of a
coalition is the reconstruction loss of the window with the coalition's
columns kept and everything else replaced by normal background values.  A
player's Shapley value is then how much that column's real data raises the
loss, averaged over orderings — positive mass points at the offending
telemetry.  Values are estimated by permutation sampling (with an exact
enumeration path for small player counts, used as an oracle in tests).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LocalizationError
from .graph import Topology
from .model import GalMadConfig, ModelParams, decode, encode, step_losses
from .pipeline import RESPONSE_TIME_FEATURES, TABLE_METRICS

__all__ = [
    "AttributionMatrix",
    "LocalizationVerdict",
    "default_feature_weights",
    "anomalous_steps",
    "sample_shapley",
    "exact_shapley",
    "attribution",
    "localize",
    "export_heatmap",
]

_EMPHASIZED = ["container_fs_usage_bytes"] + RESPONSE_TIME_FEATURES
_EMPHASIS = 4.0


def default_feature_weights(n_features: int, emphasize: bool = True,
                            include_ma: bool = True) -> np.ndarray:
    """Per-feature loss weights, normalized to mean 1.

    Response-time columns and filesystem usage get extra weight (they carry
    the clearest per-service fault signature); ``include_ma`` controls
    whether the response-time moving averages share the emphasis.
    """
    names = (TABLE_METRICS + RESPONSE_TIME_FEATURES)[:n_features]
    w = np.ones(n_features)
    if emphasize:
        for i, name in enumerate(names):
            if name in _EMPHASIZED:
                if not include_ma and "_ma_" in name:
                    continue
                w[i] = _EMPHASIS
    return w / w.mean()


@dataclass
class AttributionMatrix:
    values: np.ndarray          # (n_services, n_features) Shapley values
    services: list[str]
    feature_names: list[str]
    window_start: float = 0.0

    def service_scores(self) -> np.ndarray:
        """Positive attribution mass per service."""
        return np.maximum(self.values, 0.0).sum(axis=1)


@dataclass
class LocalizationVerdict:
    service: str | None
    scores: dict[str, float]
    inconclusive: bool = False

    def to_dict(self) -> dict:
        return {"service": self.service, "scores": self.scores,
                "inconclusive": self.inconclusive}


def anomalous_steps(params: ModelParams, window, topo: Topology,
                    threshold: float) -> np.ndarray:
    """Boolean mask of window steps whose loss strictly exceeds the
    threshold; falls back to all steps when none do."""
    per_step = step_losses(params, window, topo)
    mask = per_step > threshold
    if not mask.any():
        mask = np.ones_like(mask, dtype=bool)
    return mask


def sample_shapley(value_fn, n_players: int, n_permutations: int = 8,
                   rng=None) -> np.ndarray:
    """Permutation-sampling Shapley estimate.

    ``value_fn`` takes a boolean coalition matrix (B, n_players) and returns
    (B,) coalition values; all prefixes of each sampled permutation are
    evaluated in one batched call.
    """
    if n_permutations < 1:
        raise LocalizationError("need at least one permutation")
    rng = np.random.default_rng(rng)
    phi = np.zeros(n_players)
    for _ in range(n_permutations):
        order = rng.permutation(n_players)
        masks = np.zeros((n_players + 1, n_players), dtype=bool)
        for i, p in enumerate(order):
            masks[i + 1] = masks[i]
            masks[i + 1, p] = True
        values = np.asarray(value_fn(masks), dtype=np.float64)
        phi[order] += np.diff(values)
    return phi / n_permutations


def exact_shapley(value_fn, n_players: int) -> np.ndarray:
    """Exact Shapley values by full coalition enumeration (small n only)."""
    if n_players > 16:
        raise LocalizationError(
            f"exact enumeration over {n_players} players is intractable; "
            "use sample_shapley"
        )
    n = n_players
    subsets = np.arange(2 ** n)
    masks = (subsets[:, None] >> np.arange(n)) & 1
    masks = masks.astype(bool)
    values = np.asarray(value_fn(masks), dtype=np.float64)
    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(n + 1)]
    phi = np.zeros(n)
    for i in range(n):
        without = ~masks[:, i]
        s = subsets[without]
        sz = sizes[without]
        weight = np.array([fact[a] * fact[n - a - 1] / fact[n] for a in sz])
        phi[i] = (weight * (values[s | (1 << i)] - values[s])).sum()
    return phi


def _coalition_value_fn(params: ModelParams, window: np.ndarray,
                        topo: Topology, background: np.ndarray,
                        groups: list[np.ndarray], steps: np.ndarray,
                        weights: np.ndarray, chunk: int = 512):
    t, n, k = window.shape
    flat_window = window.reshape(t, n * k)
    flat_bg = np.broadcast_to(background, window.shape).reshape(t, n * k)

    def value_fn(masks: np.ndarray) -> np.ndarray:
        col_mask = np.zeros((masks.shape[0], n * k), dtype=bool)
        for gi, cols in enumerate(groups):
            col_mask[:, cols] |= masks[:, gi:gi + 1]
        out = np.empty(masks.shape[0])
        w = weights.reshape(1, 1, 1, k)
        for lo in range(0, masks.shape[0], chunk):
            m = col_mask[lo:lo + chunk, None, :]          # (b, 1, n*k)
            x = np.where(m, flat_window, flat_bg).reshape(-1, t, n, k)
            recon = decode(params, encode(params, x, topo), topo, t).data
            err = (w * (recon - x) ** 2).mean(axis=(2, 3))  # (b, t)
            out[lo:lo + chunk] = err[:, steps].mean(axis=1)
        return out

    return value_fn


def attribution(params: ModelParams, window, topo: Topology,
                config: GalMadConfig, background=None, *,
                n_permutations: int = 8, seed: int = 0,
                feature_weights=None, groups=None, method: str = "auto",
                window_start: float = 0.0) -> AttributionMatrix:
    """Shapley attribution of one window's loss over (service, feature)
    columns.

    ``background`` is the normal stand-in for absent players — defaults to
    zeros, the mean of standardized normal data.  Loss is averaged over the
    window's anomalous steps only.  ``groups`` may coarsen the players (a
    list of flat column-index arrays); by default every column is its own
    player and the estimate is spread back uniformly within each group.
    """
    x = np.asarray(window, dtype=np.float64)
    t, n, k = x.shape
    if (n, k) != (config.n_services, config.n_features):
        raise LocalizationError(
            f"window shape {x.shape} does not match config "
            f"({config.n_services} services, {config.n_features} features)"
        )
    if background is None:
        background = np.zeros((n, k))
    background = np.asarray(background, dtype=np.float64)
    if feature_weights is None:
        feature_weights = default_feature_weights(k)
    feature_weights = np.asarray(feature_weights, dtype=np.float64)
    if groups is None:
        groups = [np.array([c]) for c in range(n * k)]
    else:
        groups = [np.asarray(g, dtype=int) for g in groups]
    steps = anomalous_steps(params, x, topo, config.threshold)

    value_fn = _coalition_value_fn(params, x, topo, background, groups,
                                   steps, feature_weights)
    n_players = len(groups)
    if method == "exact" or (method == "auto" and n_players <= 12):
        phi = exact_shapley(value_fn, n_players)
    elif method in ("auto", "sampling"):
        phi = sample_shapley(value_fn, n_players, n_permutations,
                             rng=np.random.default_rng(seed))
    else:
        raise LocalizationError(f"unknown method {method!r}")

    flat = np.zeros(n * k)
    for gi, cols in enumerate(groups):
        flat[cols] = phi[gi] / cols.size
    names = (TABLE_METRICS + RESPONSE_TIME_FEATURES)[:k]
    return AttributionMatrix(values=flat.reshape(n, k),
                             services=list(topo.services),
                             feature_names=list(names),
                             window_start=window_start)


def localize(attr: AttributionMatrix) -> LocalizationVerdict:
    """Name the service carrying the most positive attribution mass.

    Ties break toward the lowest service index; a matrix with no positive
    mass anywhere is inconclusive.
    """
    scores = attr.service_scores()
    mapping = {s: float(v) for s, v in zip(attr.services, scores)}
    if scores.max() <= 0.0:
        return LocalizationVerdict(None, mapping, inconclusive=True)
    return LocalizationVerdict(attr.services[int(np.argmax(scores))], mapping)


def export_heatmap(attr: AttributionMatrix, csv_path, image_path=None):
    """Write the attribution matrix as CSV and, optionally, a heatmap image."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["service"] + attr.feature_names)
        for i, service in enumerate(attr.services):
            writer.writerow([service] + [repr(float(v))
                                         for v in attr.values[i]])
    if image_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(12, 5))
        im = ax.imshow(attr.values, aspect="auto", cmap="magma")
        ax.set_yticks(range(len(attr.services)), attr.services)
        ax.set_xticks(range(len(attr.feature_names)), attr.feature_names,
                      rotation=90, fontsize=6)
        fig.colorbar(im, ax=ax, label="attribution")
        fig.tight_layout()
        fig.savefig(image_path, dpi=150)
        plt.close(fig)
