"""Command-line interface: generate, train, detect, localize, evaluate.

Every input is an explicit flag — nothing is read from environment
variables.  Exit codes: 0 on success, 1 for runtime failures (bad data,
model divergence, nothing to localize), 2 for configuration errors
(malformed flags, unreadable JSON).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .errors import GalmadError
from .evaluation import run_experiment, write_metrics_table
from .graph import Topology
from .localization import attribution, export_heatmap, localize as _localize
from .model import (
    GalMadConfig,
    detect as _detect,
    load_checkpoint,
    save_checkpoint,
    train as _train,
)
from .pipeline import (
    FeatureSchema,
    Scaler,
    apply_scaler,
    build_splits,
    fit_scaler,
    load_dataset,
    make_windows,
    parse_ratio,
    telemetry_to_features,
    _load_corpus,
)
from .workload import WorkloadModel, default_faults, scenario as _scenario


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_topology(path) -> Topology:
    try:
        return Topology.from_json(path)
    except FileNotFoundError:
        _fail(f"topology file not found: {path}", 2)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        _fail(f"cannot parse topology {path}: {exc}", 2)


def _load_scaler(path) -> Scaler:
    try:
        with np.load(path) as data:
            return Scaler(mean=data["mean"], std=data["std"])
    except FileNotFoundError:
        _fail(f"scaler file not found: {path}", 2)
    except KeyError as exc:
        _fail(f"scaler file {path} is missing array {exc}", 2)


def _scaler_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + "-scaler.npz")


@click.group()
def main():
    """Graph-attention LSTM autoencoder for microservice anomaly
    detection and localization."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--seed", default=0, show_default=True)
@click.option("--normal-hours", default=4.0, show_default=True,
              help="length of the normal segment")
@click.option("--anomaly-minutes", default=90.0, show_default=True,
              help="length of each anomalous segment")
@click.option("--weak", is_flag=True,
              help="use the weaker network-fault strengths")
def generate(out, seed, normal_hours, anomaly_minutes, weak):
    """Write a synthetic telemetry corpus with one segment per anomaly type."""
    if normal_hours <= 0 or anomaly_minutes <= 0:
        _fail("durations must be positive", 2)
    model = WorkloadModel(seed=seed)
    anomaly_s = anomaly_minutes * 60.0
    faults = default_faults(model, anomaly_s, weak=weak)
    try:
        intervals = _scenario(model, out, normal_duration_s=normal_hours * 3600.0,
                              anomaly_duration_s=anomaly_s, faults=faults)
    except GalmadError as exc:
        _fail(str(exc), 1)
    click.echo(f"wrote {len(intervals)} anomalous segments under {out}")


def _prepare_normal(data, topo, schema, train_fraction):
    normal, anomalous, faults = load_dataset(data)
    stream, grid, valid = telemetry_to_features(normal, schema)
    cut = int(stream.shape[0] * train_fraction)
    scaler = fit_scaler(stream[:cut])
    return normal, anomalous, faults, stream, grid, valid, cut, scaler


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True),
              help="dataset root (normal/, anomalous/, labels.csv)")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--topology", default=None, type=click.Path(),
              help="topology JSON [default: <data>/topology.json]")
@click.option("--variant", default="gal-mad", show_default=True,
              type=click.Choice(["gal-mad", "gat-ae", "lstm-ae", "linear-ae"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=360, show_default=True)
@click.option("--learning-rate", default=0.001, show_default=True)
@click.option("--window", default=24, show_default=True)
@click.option("--threshold", default=2.0, show_default=True)
@click.option("--no-response-times", is_flag=True,
              help="train on the 19 resource metrics only")
@click.option("--train-fraction", default=0.8, show_default=True)
@click.option("--quiet", is_flag=True)
def train(data, checkpoint, topology, variant, seed, epochs, batch_size,
          learning_rate, window, threshold, no_response_times,
          train_fraction, quiet):
    """Train on the normal portion of a dataset and save a checkpoint."""
    topology = topology or str(Path(data) / "topology.json")
    topo = _load_topology(topology)
    schema = FeatureSchema(services=tuple(topo.services),
                           include_response_times=not no_response_times)
    try:
        config = GalMadConfig(
            n_services=len(topo.services), n_features=schema.n_features,
            window_len=window, threshold=threshold, variant=variant,
            seed=seed, epochs=epochs, batch_size=batch_size,
            learning_rate=learning_rate,
        )
    except ValueError as exc:
        _fail(str(exc), 2)
    try:
        _, _, _, stream, grid, valid, cut, scaler = _prepare_normal(
            data, topo, schema, train_fraction)
        scaled = apply_scaler(scaler, stream)
        windows = make_windows(scaled[:cut], grid[:cut], window_len=window,
                               valid=valid[:cut])
        tensors = np.stack([w.tensor for w in windows])
        log_fn = None if quiet else (
            lambda e: click.echo(f"epoch {e['epoch']}: "
                                 f"loss {e['mean_loss']:.6f}"))
        params, log = _train(config, tensors, topo, log_fn=log_fn)
    except GalmadError as exc:
        _fail(str(exc), 1)
    save_checkpoint(params, checkpoint)
    np.savez(_scaler_path(checkpoint), mean=scaler.mean, std=scaler.std)
    click.echo(f"trained on {len(windows)} windows; final loss "
               f"{log[-1]['mean_loss']:.6f}; checkpoint: {checkpoint}")


def _load_model_and_features(corpus, topology, checkpoint, scaler_file):
    topo = _load_topology(topology)
    try:
        params = load_checkpoint(checkpoint)
    except FileNotFoundError:
        _fail(f"checkpoint not found: {checkpoint}", 2)
    config = params.config
    scaler = _load_scaler(scaler_file or _scaler_path(checkpoint))
    schema = FeatureSchema(
        services=tuple(topo.services),
        include_response_times=config.n_features > 19,
    )
    if schema.n_features != config.n_features:
        _fail(
            f"checkpoint expects {config.n_features} features but the "
            f"schema yields {schema.n_features}", 2)
    try:
        telem = _load_corpus(Path(corpus))
        stream, grid, valid = telemetry_to_features(telem, schema)
    except GalmadError as exc:
        _fail(str(exc), 1)
    return topo, params, config, apply_scaler(scaler, stream), grid, valid


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True),
              help="telemetry directory (cAdvisor/, response_times/)")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--topology", required=True, type=click.Path())
@click.option("--scaler", default=None, type=click.Path(),
              help="[default: <checkpoint>-scaler.npz]")
@click.option("--threshold", default=None, type=float,
              help="override the checkpoint's anomaly threshold")
@click.option("--out", default=None, type=click.Path(),
              help="write line-delimited JSON here instead of stdout")
def detect(corpus, checkpoint, topology, scaler, threshold, out):
    """Score non-overlapping windows of a telemetry corpus."""
    topo, params, config, scaled, grid, _ = _load_model_and_features(
        corpus, topology, checkpoint, scaler)
    if threshold is not None:
        config = GalMadConfig(**{**config.__dict__, "threshold": threshold})
    try:
        results = _detect(params, scaled, config, topo, timestamps=grid)
    except GalmadError as exc:
        _fail(str(exc), 1)
    lines = "\n".join(r.to_json() for r in results)
    if out:
        Path(out).write_text(lines + "\n", encoding="utf-8")
    else:
        click.echo(lines)


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--topology", required=True, type=click.Path())
@click.option("--scaler", default=None, type=click.Path())
@click.option("--window-index", default=None, type=int,
              help="window to explain [default: first flagged window]")
@click.option("--permutations", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--heatmap", default=None, type=click.Path(),
              help="write the service-by-feature attribution CSV here")
@click.option("--image", default=None, type=click.Path(),
              help="also render the heatmap as an image")
def localize(corpus, checkpoint, topology, scaler, window_index,
             permutations, seed, heatmap, image):
    """Attribute a flagged window to its most anomalous service."""
    topo, params, config, scaled, grid, _ = _load_model_and_features(
        corpus, topology, checkpoint, scaler)
    try:
        results = _detect(params, scaled, config, topo, timestamps=grid)
        if window_index is None:
            flagged = [i for i, r in enumerate(results) if r.is_anomaly]
            if not flagged:
                _fail("no window exceeds the anomaly threshold; "
                      "pass --window-index to force one", 1)
            window_index = flagged[0]
        if not 0 <= window_index < len(results):
            _fail(f"--window-index must be in [0, {len(results) - 1}]", 2)
        t = config.window_len
        window = scaled[window_index * t:(window_index + 1) * t]
        attr = attribution(params, window, topo, config,
                           n_permutations=permutations, seed=seed,
                           window_start=results[window_index].window_start)
        verdict = _localize(attr)
    except GalmadError as exc:
        _fail(str(exc), 1)
    if heatmap:
        export_heatmap(attr, heatmap, image)
    click.echo(json.dumps({
        "window_index": window_index,
        "window_start": results[window_index].window_start,
        "loss": results[window_index].loss,
        **verdict.to_dict(),
    }))


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--topology", default=None, type=click.Path())
@click.option("--ratio", default="90:10", show_default=True,
              help="normal:anomalous mix of the test split")
@click.option("--variant", default="gal-mad", show_default=True,
              type=click.Choice(["gal-mad", "gat-ae", "lstm-ae", "linear-ae"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--batch-size", default=360, show_default=True)
@click.option("--learning-rate", default=0.001, show_default=True)
@click.option("--window", default=24, show_default=True)
@click.option("--threshold", default=2.0, show_default=True)
@click.option("--no-response-times", is_flag=True)
@click.option("--train-fraction", default=0.8, show_default=True)
@click.option("--report", default=None, type=click.Path(),
              help="write the full JSON report here")
@click.option("--table", default=None, type=click.Path(),
              help="append-style CSV metrics table")
def evaluate(data, topology, ratio, variant, seed, epochs, batch_size,
             learning_rate, window, threshold, no_response_times,
             train_fraction, report, table):
    """Train on normal data, score a labeled test mix, report metrics."""
    try:
        parse_ratio(ratio)
    except ValueError as exc:
        _fail(str(exc), 2)
    topology = topology or str(Path(data) / "topology.json")
    topo = _load_topology(topology)
    schema = FeatureSchema(services=tuple(topo.services),
                           include_response_times=not no_response_times)
    try:
        config = GalMadConfig(
            n_services=len(topo.services), n_features=schema.n_features,
            window_len=window, threshold=threshold, variant=variant,
            seed=seed, epochs=epochs, batch_size=batch_size,
            learning_rate=learning_rate,
        )
    except ValueError as exc:
        _fail(str(exc), 2)
    try:
        _, anomalous, faults, stream, grid, valid, cut, scaler = (
            _prepare_normal(data, topo, schema, train_fraction))
        scaled = apply_scaler(scaler, stream)
        normal_windows = make_windows(scaled, grid, window_len=window,
                                      valid=valid)
        anom_windows: dict[str, list] = {}
        for atype, corpus in anomalous.items():
            a_stream, a_grid, a_valid = telemetry_to_features(corpus, schema)
            a_scaled = apply_scaler(scaler, a_stream)
            type_faults = [f for f in faults if f.anomaly_type == atype]
            wins = make_windows(a_scaled, a_grid, type_faults,
                                window_len=window, valid=a_valid)
            flagged = [w for w in wins if w.is_anomalous]
            if flagged:
                anom_windows[atype] = flagged
        train_wins, test_wins = build_splits(
            normal_windows, anom_windows, ratio, seed=seed,
            train_fraction=train_fraction)
        result, params = run_experiment(config, train_wins, test_wins, topo,
                                        ratio=ratio, report_path=report)
    except GalmadError as exc:
        _fail(str(exc), 1)
    if table:
        write_metrics_table([result], table)
    click.echo(json.dumps({"counts": result["counts"],
                           "metrics": result["metrics"]}))


if __name__ == "__main__":
    main()
