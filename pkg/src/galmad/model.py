"""The full anomaly-detection autoencoder.

Encoder: two GAT layers per time slice, then a per-service Bi-LSTM that
compresses each service's embedding sequence to a d_z vector.  Decoder
mirrors it: a one-to-many LSTM expands each service embedding back into a
sequence, then two GAT layers map back to feature space (final layer uses an
identity activation so reconstructions span all reals).

Ablation variants swap components out while keeping the same
train/detect/checkpoint surface:

* ``gat-ae``    — LSTM removed; per-service linear maps over flattened time.
* ``lstm-ae``   — GAT layers removed; Bi-LSTM straight on raw features.
* ``linear-ae`` — both removed; per-service linear autoencoder.

All forward paths accept a single window (t, n, k) or a batch (B, t, n, k).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, mse, zero_grads
from .errors import DimensionError, DivergenceError, InsufficientDataError
from .graph import GatLayer, Topology, gat_forward
from .optim import Adam
from .temporal import BiLstm, OneToManyLstm, bilstm_encode, one_to_many_decode

__all__ = [
    "GalMadConfig",
    "ModelParams",
    "DetectionResult",
    "VARIANTS",
    "encode",
    "decode",
    "reconstruction_loss",
    "score",
    "train",
    "detect",
    "step_losses",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("gal-mad", "gat-ae", "lstm-ae", "linear-ae")
CHECKPOINT_VERSION = 1


@dataclass
class GalMadConfig:
    n_services: int
    n_features: int
    window_len: int = 24
    d1: int = 16
    d2: int = 8
    d_z: int = 1
    encoder_hidden: int = 32
    decoder_hidden: int = 32
    threshold: float = 2.0
    learning_rate: float = 0.001
    batch_size: int = 360
    lr_decay_per_epoch: float = 0.5
    epochs: int = 20
    seed: int = 0
    variant: str = "gal-mad"
    num_heads: int = 1
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")

    def fingerprint(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class _Linear:
    def __init__(self, in_dim, out_dim, rng):
        scale = np.sqrt(1.0 / max(in_dim, 1))
        self.w = Tensor(rng.normal(0.0, scale, size=(in_dim, out_dim)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ModelParams:
    """Learnable weights for one variant; built deterministically from the
    config seed."""

    def __init__(self, config: GalMadConfig, rng=None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        gat_kw = dict(num_heads=c.num_heads, negative_slope=c.negative_slope)
        t, k = c.window_len, c.n_features
        if c.variant in ("gal-mad", "gat-ae"):
            self.enc_gat1 = GatLayer(k, c.d1, rng, **gat_kw)
            self.enc_gat2 = GatLayer(c.d1, c.d2, rng, **gat_kw)
            self.dec_gat1 = GatLayer(c.d2, c.d1, rng, **gat_kw)
            self.dec_gat2 = GatLayer(c.d1, k, rng, activation="identity", **gat_kw)
        if c.variant == "gal-mad":
            self.enc_bilstm = BiLstm(c.d2, c.encoder_hidden, c.d_z, rng)
            self.dec_lstm = OneToManyLstm(c.d_z, c.decoder_hidden, c.d2, rng)
        elif c.variant == "gat-ae":
            self.enc_lin = _Linear(t * c.d2, c.d_z, rng)
            self.dec_lin = _Linear(c.d_z, t * c.d2, rng)
        elif c.variant == "lstm-ae":
            self.enc_bilstm = BiLstm(k, c.encoder_hidden, c.d_z, rng)
            self.dec_lstm = OneToManyLstm(c.d_z, c.decoder_hidden, k, rng)
        elif c.variant == "linear-ae":
            self.enc_lin = _Linear(t * k, c.d_z, rng)
            self.dec_lin = _Linear(c.d_z, t * k, rng)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("enc_gat1", "enc_gat2", "dec_gat1", "dec_gat2",
                     "enc_bilstm", "dec_lstm", "enc_lin", "dec_lin"):
            comp = getattr(self, name, None)
            if comp is not None:
                out.update(comp.params(name))
        return out


@dataclass
class DetectionResult:
    window_start: float
    window_end: float
    loss: float
    score: float
    is_anomaly: bool

    def to_json(self) -> str:
        return json.dumps({
            "window_start": self.window_start,
            "window_end": self.window_end,
            "loss": self.loss,
            "score": self.score,
            "is_anomaly": self.is_anomaly,
        })


def _check_window_shape(config: GalMadConfig, x: Tensor):
    t, n, k = x.shape[-3:]
    if (t, n, k) != (config.window_len, config.n_services, config.n_features):
        raise DimensionError(
            f"window shape {(t, n, k)} does not match config "
            f"({config.window_len}, {config.n_services}, {config.n_features})"
        )


def encode(params: ModelParams, x, topo: Topology) -> Tensor:
    """Map windows (t, n, k) / (B, t, n, k) to embeddings (n, d_z) / (B, n, d_z)."""
    c = params.config
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    _check_window_shape(c, x)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    b, t, n, k = x.shape

    if c.variant in ("gal-mad", "gat-ae"):
        h = gat_forward(params.enc_gat1, x, topo)
        h = gat_forward(params.enc_gat2, h, topo)  # (B, t, n, d2)
        d = c.d2
    else:
        h, d = x, k
    seq = h.swapaxes(1, 2).reshape(b * n, t, d)  # per-service sequences

    if c.variant in ("gal-mad", "lstm-ae"):
        z = bilstm_encode(params.enc_bilstm, seq)
    else:
        z = params.enc_lin(seq.reshape(b * n, t * d))
    z = z.reshape(b, n, c.d_z)
    return z.reshape(n, c.d_z) if single else z


def decode(params: ModelParams, z, topo: Topology, t: int) -> Tensor:
    """Expand embeddings (n, d_z) / (B, n, d_z) back to windows."""
    c = params.config
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    single = z.ndim == 2
    if single:
        z = z.reshape(1, *z.shape)
    b, n, dz = z.shape
    if n != c.n_services or dz != c.d_z:
        raise DimensionError(
            f"embedding shape {(n, dz)} does not match config "
            f"({c.n_services}, {c.d_z})"
        )
    flat = z.reshape(b * n, dz)

    if c.variant in ("gal-mad", "lstm-ae"):
        seq = one_to_many_decode(params.dec_lstm, flat, t)  # (B*n, t, d)
        d = params.dec_lstm.out_dim
    else:
        d = c.d2 if c.variant == "gat-ae" else c.n_features
        seq = params.dec_lin(flat).reshape(b * n, t, d)
    h = seq.reshape(b, n, t, d).swapaxes(1, 2)  # (B, t, n, d)

    if c.variant in ("gal-mad", "gat-ae"):
        h = gat_forward(params.dec_gat1, h, topo)
        h = gat_forward(params.dec_gat2, h, topo)
    out = h
    return out.reshape(t, c.n_services, c.n_features) if single else out


def reconstruction_loss(params: ModelParams, x, topo: Topology) -> Tensor:
    """MSE between a window (or batch) and its reconstruction."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    t = x.shape[-3]
    return mse(decode(params, encode(params, x, topo), topo, t), x)


def score(loss: float, c: float) -> tuple[float, bool]:
    """Anomaly score y = sigmoid(loss - c); anomalous iff loss strictly
    exceeds c (boundary classified normal)."""
    d = loss - c
    if d >= 0:
        y = 1.0 / (1.0 + math.exp(-d))
    else:
        e = math.exp(d)
        y = e / (1.0 + e)
    return y, y > 0.5


def train(config: GalMadConfig, normal_windows, topo: Topology,
          log_fn=None) -> tuple[ModelParams, list[dict]]:
    """Minibatch Adam on mean window MSE over normal data only.

    Returns trained parameters and a per-epoch log.  Fully deterministic
    under ``config.seed`` (init and shuffling share one generator).
    """
    windows = np.asarray(normal_windows, dtype=np.float64)
    if windows.ndim != 4 or windows.shape[0] == 0:
        raise InsufficientDataError(
            "training requires a non-empty array of (t, n, k) windows"
        )
    rng = np.random.default_rng(config.seed)
    params = ModelParams(config, rng)
    named = params.params()
    opt = Adam(named, learning_rate=config.learning_rate,
               epoch_decay_factor=config.lr_decay_per_epoch)
    n_windows = windows.shape[0]
    log: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_windows)
        epoch_losses = []
        for start in range(0, n_windows, config.batch_size):
            batch = windows[order[start:start + config.batch_size]]
            zero_grads(named.values())
            loss = reconstruction_loss(params, batch, topo)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            loss.backward()
            opt.step()
            epoch_losses.append(value)
        opt.end_epoch()
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)),
            "learning_rate": opt.effective_lr,
        }
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return params, log


def window_losses(params: ModelParams, windows, topo: Topology) -> np.ndarray:
    """Reconstruction MSE per window, computed without building gradients."""
    x = np.asarray(windows, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    recon = decode(params, encode(params, Tensor(x), topo), topo, x.shape[1]).data
    per = ((recon - x) ** 2).mean(axis=(1, 2, 3))
    return per[0] if single else per


def step_losses(params: ModelParams, window, topo: Topology) -> np.ndarray:
    """Per-time-step reconstruction MSE of one window, shape (t,)."""
    x = np.asarray(window, dtype=np.float64)
    recon = decode(params, encode(params, Tensor(x), topo), topo, x.shape[0]).data
    return ((recon - x) ** 2).mean(axis=(1, 2))


def detect(params: ModelParams, stream, config: GalMadConfig, topo: Topology,
           timestamps=None) -> list[DetectionResult]:
    """Slide non-overlapping windows of length t over a (T, n, k) stream and
    score each one."""
    x = np.asarray(stream, dtype=np.float64)
    t = config.window_len
    if x.ndim != 3 or x.shape[0] < t:
        raise InsufficientDataError(
            f"stream of {0 if x.ndim != 3 else x.shape[0]} steps is shorter "
            f"than one window ({t})"
        )
    if timestamps is None:
        timestamps = np.arange(x.shape[0], dtype=np.float64) * 5.0
    n_win = x.shape[0] // t
    batch = x[: n_win * t].reshape(n_win, t, *x.shape[1:])
    losses = window_losses(params, batch, topo)
    results = []
    for i in range(n_win):
        y, flag = score(float(losses[i]), config.threshold)
        results.append(DetectionResult(
            window_start=float(timestamps[i * t]),
            window_end=float(timestamps[i * t + t - 1]),
            loss=float(losses[i]),
            score=y,
            is_anomaly=flag,
        ))
    return results


# -- checkpointing ------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    arrays = {name: p.data for name, p in params.params().items()}
    meta = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
    })
    np.savez(path, __meta__=np.frombuffer(meta.encode("utf-8"), dtype=np.uint8),
             **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('version')!r}"
            )
        config = GalMadConfig(**meta["config"])
        params = ModelParams(config)
        for name, tensor in params.params().items():
            data = blob[name]
            if data.shape != tensor.data.shape:
                raise DimensionError(
                    f"checkpoint array {name} has shape {data.shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data[:] = data
    return params
