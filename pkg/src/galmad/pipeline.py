"""Telemetry ingestion and preprocessing.

Consumes the on-disk dataset layout (``normal/{cAdvisor,response_times}``,
``anomalous/<type>/{cAdvisor,response_times}``, ``labels.csv``) and produces
scaled, windowed, labeled tensors:

  1. rate-convert cumulative counters (first differences, resets clamped),
  2. unify per-link response times by summing across links,
  3. append 5-minute and 30-minute trailing moving averages,
  4. standard-scale every (service, feature) column on normal training data,
  5. cut non-overlapping 24-step windows and label them against fault
     intervals (a window is anomalous if any step overlaps one).

The per-service feature vector is the 19 container metrics plus the three
response-time-derived columns (22 total; 264 flattened for 12 services).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, InsufficientDataError

__all__ = [
    "TABLE_METRICS",
    "CUMULATIVE_METRICS",
    "RESPONSE_TIME_FEATURES",
    "DEFAULT_SERVICES",
    "ServiceTelemetry",
    "FeatureSchema",
    "Scaler",
    "LabeledWindow",
    "FaultInterval",
    "POLL_INTERVAL_S",
    "load_dataset",
    "write_corpus",
    "read_labels",
    "write_labels",
    "rate_convert",
    "unify_response_times",
    "moving_averages",
    "telemetry_to_features",
    "fit_scaler",
    "apply_scaler",
    "make_windows",
    "build_splits",
    "parse_ratio",
]

POLL_INTERVAL_S = 5.0
MA_SHORT_STEPS = 60    # 5 minutes at 5 s polling
MA_LONG_STEPS = 360    # 30 minutes
MAX_FFILL_GAP = 2

TABLE_METRICS = [
    "container_memory_rss",
    "container_memory_usage_bytes",
    "container_memory_failures_total",
    "container_memory_working_set_bytes",
    "container_memory_failcnt",
    "container_cpu_usage_seconds_total",
    "container_cpu_user_seconds_total",
    "container_cpu_system_seconds_total",
    "container_network_receive_bytes_total",
    "container_network_receive_errors_total",
    "container_network_receive_packets_dropped_total",
    "container_network_receive_packets_total",
    "container_network_transmit_bytes_total",
    "container_network_transmit_errors_total",
    "container_network_transmit_packets_dropped_total",
    "container_network_transmit_packets_total",
    "container_fs_usage_bytes",
    "container_fs_io_time_seconds_total",
    "container_fs_write_seconds_total",
]

CUMULATIVE_METRICS = frozenset(m for m in TABLE_METRICS if m.endswith("_total")
                               or m == "container_memory_failcnt")

RESPONSE_TIME_FEATURES = [
    "response_time",
    "response_time_ma_5min",
    "response_time_ma_30min",
]

DEFAULT_SERVICES = [
    "payment", "shipping", "redis", "mongodb", "dispatch", "rabbitmq",
    "user", "mysql", "catalogue", "ratings", "web", "cart",
]


@dataclass
class ServiceTelemetry:
    service: str
    timestamps: np.ndarray
    metrics: dict[str, np.ndarray]
    response_times: dict[str, np.ndarray] = field(default_factory=dict)
    call_counts: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.timestamps.size > 1 and not (np.diff(self.timestamps) > 0).all():
            raise IngestionError(
                f"{self.service}: timestamps must be strictly increasing"
            )
        missing = [m for m in TABLE_METRICS if m not in self.metrics]
        if missing:
            raise IngestionError(f"{self.service}: missing metrics {missing}")
        for name, series in {**self.metrics, **self.response_times,
                             **self.call_counts}.items():
            if len(series) != len(self.timestamps):
                raise IngestionError(
                    f"{self.service}: series {name} has {len(series)} samples, "
                    f"expected {len(self.timestamps)}"
                )

    @property
    def n_steps(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class FeatureSchema:
    services: tuple = tuple(DEFAULT_SERVICES)
    include_response_times: bool = True

    @property
    def feature_names(self) -> list[str]:
        names = list(TABLE_METRICS)
        if self.include_response_times:
            names += RESPONSE_TIME_FEATURES
        return names

    @property
    def n_features(self) -> int:
        return len(TABLE_METRICS) + (3 if self.include_response_times else 0)

    @property
    def flat_dim(self) -> int:
        return len(self.services) * self.n_features


@dataclass
class FaultInterval:
    anomaly_type: str
    target_service: str
    start_ts: float
    end_ts: float

    def contains(self, ts: float) -> bool:
        return self.start_ts <= ts <= self.end_ts


@dataclass
class LabeledWindow:
    tensor: np.ndarray  # (t, n, k)
    label: str          # "normal" or an anomaly type
    start_ts: float
    end_ts: float

    @property
    def is_anomalous(self) -> bool:
        return self.label != "normal"


@dataclass
class Scaler:
    mean: np.ndarray  # (n, k)
    std: np.ndarray   # (n, k), constant columns replaced by 1
    fitted_on: str = "normal-train"


# -- counters and response times ----------------------------------------


def rate_convert(series) -> np.ndarray:
    """First differences of a cumulative counter; first element 0 and
    negative differences (counter resets) clamped to 0."""
    s = np.asarray(series, dtype=np.float64)
    out = np.zeros_like(s)
    if s.size > 1:
        out[1:] = np.maximum(np.diff(s), 0.0)
    return out


def unify_response_times(telemetry: ServiceTelemetry,
                         rate: bool = True) -> np.ndarray:
    """Single response-time feature: per-step sum across all of the
    service's links (rate-converted from the cumulative sums first)."""
    if not telemetry.response_times:
        return np.zeros(telemetry.n_steps)
    parts = [rate_convert(v) if rate else np.asarray(v, dtype=np.float64)
             for v in telemetry.response_times.values()]
    return np.sum(parts, axis=0)


def moving_averages(series, short=MA_SHORT_STEPS, long=MA_LONG_STEPS):
    """Trailing moving averages; windows shorter than nominal at the start
    use the available prefix."""
    s = np.asarray(series, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(s)])
    idx = np.arange(1, s.size + 1)

    def trailing(w):
        lo = np.maximum(idx - w, 0)
        return (csum[idx] - csum[lo]) / (idx - lo)

    return trailing(short), trailing(long)


# -- feature assembly ----------------------------------------------------


def telemetry_to_features(per_service: dict[str, ServiceTelemetry],
                          schema: FeatureSchema,
                          rate_convert_counters: bool = True):
    """Assemble a (T, n, k) tensor on the common 5-second grid.

    Missing samples are forward-filled up to MAX_FFILL_GAP consecutive
    steps; longer gaps mark the affected steps invalid (windows containing
    them are dropped later).  Returns (tensor, timestamps, valid_mask).
    """
    missing = [s for s in schema.services if s not in per_service]
    if missing:
        raise IngestionError(f"telemetry missing for services {missing}")
    t0 = max(per_service[s].timestamps[0] for s in schema.services)
    t1 = min(per_service[s].timestamps[-1] for s in schema.services)
    if t1 < t0:
        raise IngestionError("service telemetry spans do not overlap")
    grid = np.arange(t0, t1 + POLL_INTERVAL_S / 2, POLL_INTERVAL_S)
    n, k = len(schema.services), schema.n_features
    out = np.zeros((grid.size, n, k))
    valid = np.ones(grid.size, dtype=bool)
    for si, name in enumerate(schema.services):
        telem = per_service[name]
        pos = np.round((telem.timestamps - t0) / POLL_INTERVAL_S).astype(int)
        keep = (pos >= 0) & (pos < grid.size)
        if not np.allclose(telem.timestamps[keep],
                           grid[pos[keep]], atol=POLL_INTERVAL_S / 4):
            raise IngestionError(
                f"{name}: timestamps misaligned with the 5-second grid"
            )
        present = np.zeros(grid.size, dtype=bool)
        present[pos[keep]] = True
        aligned = np.zeros((grid.size, k))
        for mi, metric in enumerate(TABLE_METRICS):
            series = np.asarray(telem.metrics[metric], dtype=np.float64)
            if rate_convert_counters and metric in CUMULATIVE_METRICS:
                series = rate_convert(series)
            aligned[pos[keep], mi] = series[keep]
        if schema.include_response_times:
            rt = unify_response_times(telem)
            aligned[pos[keep], 19] = rt[keep]
            ma5, ma30 = moving_averages(rt)
            aligned[pos[keep], 20] = ma5[keep]
            aligned[pos[keep], 21] = ma30[keep]
        # forward-fill short gaps
        gap = 0
        for g in range(grid.size):
            if present[g]:
                gap = 0
                continue
            gap += 1
            if g > 0 and gap <= MAX_FFILL_GAP:
                aligned[g] = aligned[g - 1]
            else:
                valid[g] = False
        out[:, si, :] = aligned
    return out, grid, valid


# -- scaling -------------------------------------------------------------


def fit_scaler(normal_train: np.ndarray) -> Scaler:
    """Fit per-(service, feature) standardization statistics.

    Accepts a stream (T, n, k) or stacked windows (N, t, n, k); statistics
    are over all time steps.  Constant columns get std 1 so they scale to 0.
    """
    x = np.asarray(normal_train, dtype=np.float64)
    if x.ndim == 4:
        x = x.reshape(-1, *x.shape[2:])
    if x.ndim != 3 or x.shape[0] == 0:
        raise InsufficientDataError("scaler requires non-empty (T, n, k) data")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return Scaler(mean=mean, std=std)


def apply_scaler(scaler: Scaler, data: np.ndarray) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    return (x - scaler.mean) / scaler.std


# -- windowing and splits ------------------------------------------------


def make_windows(stream: np.ndarray, timestamps: np.ndarray,
                 faults: list[FaultInterval] = (), window_len: int = 24,
                 valid=None) -> list[LabeledWindow]:
    """Non-overlapping windows; a window is labeled with an anomaly type if
    any of its steps falls inside that type's fault interval."""
    x = np.asarray(stream, dtype=np.float64)
    if x.shape[0] < window_len:
        raise InsufficientDataError(
            f"stream of {x.shape[0]} steps is shorter than one window "
            f"({window_len})"
        )
    windows = []
    for start in range(0, x.shape[0] - window_len + 1, window_len):
        stop = start + window_len
        if valid is not None and not valid[start:stop].all():
            continue
        ts = timestamps[start:stop]
        label = "normal"
        for fault in faults:
            if ((ts >= fault.start_ts) & (ts <= fault.end_ts)).any():
                label = fault.anomaly_type
                break
        windows.append(LabeledWindow(
            tensor=x[start:stop], label=label,
            start_ts=float(ts[0]), end_ts=float(ts[-1]),
        ))
    return windows


def parse_ratio(text: str) -> tuple[float, float]:
    try:
        a, b = text.split(":")
        normal, anomalous = float(a), float(b)
    except ValueError as exc:
        raise ValueError(f"ratio must look like '90:10', got {text!r}") from exc
    if normal <= 0 or anomalous < 0:
        raise ValueError(f"ratio parts must be positive, got {text!r}")
    return normal, anomalous


def build_splits(normal_windows: list[LabeledWindow],
                 anomalous_by_type: dict[str, list[LabeledWindow]],
                 ratio: str | tuple, seed: int = 0,
                 train_fraction: float = 0.8):
    """Chronological 80:20 split of normal windows; the test side is mixed
    with anomalous windows at the requested normal:anomalous ratio, balanced
    across anomaly types.  Deterministic under ``seed``."""
    rn, ra = parse_ratio(ratio) if isinstance(ratio, str) else ratio
    normal_sorted = sorted(normal_windows, key=lambda w: w.start_ts)
    cut = int(len(normal_sorted) * train_fraction)
    train = normal_sorted[:cut]
    test_normal = normal_sorted[cut:]
    if not test_normal:
        raise InsufficientDataError("no normal windows left for the test split")
    n_anom = int(round(len(test_normal) * ra / rn))
    types = sorted(anomalous_by_type)
    if n_anom > 0 and not types:
        raise InsufficientDataError("no anomalous windows available")
    rng = np.random.default_rng(seed)
    picked: list[LabeledWindow] = []
    if n_anom > 0:
        base, extra = divmod(n_anom, len(types))
        for i, atype in enumerate(types):
            quota = base + (1 if i < extra else 0)
            pool = anomalous_by_type[atype]
            if quota > len(pool):
                feasible = min(len(anomalous_by_type[t]) for t in types) * len(types)
                max_ratio = feasible / max(len(test_normal), 1)
                raise InsufficientDataError(
                    f"anomaly type {atype!r} has {len(pool)} windows, "
                    f"need {quota}; maximum feasible ratio is roughly "
                    f"{1.0:.0%}:{max_ratio:.0%}"
                )
            idx = rng.choice(len(pool), size=quota, replace=False)
            picked.extend(pool[j] for j in sorted(idx))
    test = list(test_normal) + picked
    order = rng.permutation(len(test))
    test = [test[i] for i in order]
    return train, test


# -- dataset directory I/O ----------------------------------------------


def _read_csv_columns(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"empty CSV file: {path}") from None
        rows = [[float(v) for v in row] for row in reader]
    return header, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))


def _load_corpus(root: Path) -> dict[str, ServiceTelemetry]:
    cadvisor = root / "cAdvisor"
    rtdir = root / "response_times"
    for d in (cadvisor, rtdir):
        if not d.is_dir():
            raise IngestionError(f"missing folder: {d}")
    out = {}
    for path in sorted(cadvisor.glob("*.csv")):
        service = path.stem
        header, data = _read_csv_columns(path)
        if header[0] != "timestamp" or header[1:] != TABLE_METRICS:
            raise IngestionError(f"unexpected metric header in {path}")
        metrics = {m: data[:, i + 1] for i, m in enumerate(TABLE_METRICS)}
        timestamps = data[:, 0]
        rt_path = rtdir / path.name
        response_times: dict[str, np.ndarray] = {}
        call_counts: dict[str, np.ndarray] = {}
        if rt_path.exists():
            rheader, rdata = _read_csv_columns(rt_path)
            if rheader[0] != "timestamp":
                raise IngestionError(f"unexpected response-time header in {rt_path}")
            if rdata.shape[0] != data.shape[0] or not np.array_equal(
                    rdata[:, 0], timestamps):
                raise IngestionError(
                    f"timestamps misaligned between {path} and {rt_path}"
                )
            for i, col in enumerate(rheader[1:], start=1):
                if col.startswith("rt_"):
                    response_times[col[3:]] = rdata[:, i]
                elif col.startswith("calls_"):
                    call_counts[col[6:]] = rdata[:, i]
                else:
                    raise IngestionError(f"unknown column {col!r} in {rt_path}")
        out[service] = ServiceTelemetry(
            service=service, timestamps=timestamps, metrics=metrics,
            response_times=response_times, call_counts=call_counts,
        )
    if not out:
        raise IngestionError(f"no service CSV files under {cadvisor}")
    return out


def load_dataset(root) -> tuple[dict, dict, list[FaultInterval]]:
    """Load the canonical dataset layout.

    Returns (normal, anomalous, faults): normal maps service -> telemetry,
    anomalous maps anomaly type -> service -> telemetry.
    """
    root = Path(root)
    normal_dir = root / "normal"
    if not normal_dir.is_dir():
        raise IngestionError(f"missing folder: {normal_dir}")
    normal = _load_corpus(normal_dir)
    anomalous: dict[str, dict[str, ServiceTelemetry]] = {}
    anom_root = root / "anomalous"
    if anom_root.is_dir():
        for type_dir in sorted(p for p in anom_root.iterdir() if p.is_dir()):
            anomalous[type_dir.name] = _load_corpus(type_dir)
    labels_path = root / "labels.csv"
    faults = read_labels(labels_path) if labels_path.exists() else []
    return normal, anomalous, faults


def write_corpus(root, per_service: dict[str, ServiceTelemetry]) -> None:
    root = Path(root)
    cadvisor = root / "cAdvisor"
    rtdir = root / "response_times"
    cadvisor.mkdir(parents=True, exist_ok=True)
    rtdir.mkdir(parents=True, exist_ok=True)
    for service, telem in sorted(per_service.items()):
        with open(cadvisor / f"{service}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp"] + TABLE_METRICS)
            for i, ts in enumerate(telem.timestamps):
                writer.writerow([_fmt(ts)] + [_fmt(telem.metrics[m][i])
                                              for m in TABLE_METRICS])
        peers = sorted(telem.response_times)
        with open(rtdir / f"{service}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp"] + [f"rt_{p}" for p in peers]
                            + [f"calls_{p}" for p in peers])
            for i, ts in enumerate(telem.timestamps):
                writer.writerow(
                    [_fmt(ts)]
                    + [_fmt(telem.response_times[p][i]) for p in peers]
                    + [_fmt(telem.call_counts[p][i]) for p in peers]
                )


def _fmt(x: float) -> str:
    return repr(float(x))


def read_labels(path) -> list[FaultInterval]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"anomaly_type", "target_service", "start_ts", "end_ts"}
        if set(reader.fieldnames or ()) != expected:
            raise IngestionError(f"unexpected label header in {path}")
        for row in reader:
            out.append(FaultInterval(
                anomaly_type=row["anomaly_type"],
                target_service=row["target_service"],
                start_ts=float(row["start_ts"]),
                end_ts=float(row["end_ts"]),
            ))
    return out


def write_labels(path, faults: list[FaultInterval]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anomaly_type", "target_service", "start_ts", "end_ts"])
        for f in faults:
            writer.writerow([f.anomaly_type, f.target_service,
                             _fmt(f.start_ts), _fmt(f.end_ts)])
