"""LSTM primitives: cell step, fused sequence recurrences, bidirectional
encoder, and a one-to-many decoder.

Two levels of API coexist:

* :func:`lstm_step` composes the gate equations from generic autodiff ops;
  it is the transparent reference used by tests.
* :func:`lstm_recurrence` and :func:`lstm_one_to_many` are fused primitives
  that run the whole unroll inside one graph node, dispatching the gate math
  to the compiled kernels.  These carry hand-written BPTT backward passes and
  are what the model uses in training.

Sequence inputs are batched as (rows, t, d): one row per independent
sequence (e.g. every service of every window in a minibatch).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import DimensionError, InsufficientDataError

__all__ = [
    "LstmCell",
    "BiLstm",
    "OneToManyLstm",
    "lstm_step",
    "lstm_recurrence",
    "lstm_one_to_many",
    "bilstm_encode",
    "one_to_many_decode",
]

_GATES = 4


class LstmCell:
    """Weights for one LSTM cell: wx (d_in, 4H), wh (H, 4H), bias (4H,),
    gate order [input, forget, candidate, output]."""

    def __init__(self, input_dim, hidden_size, rng):
        self.input_dim = input_dim
        self.hidden_size = hidden_size
        scale = np.sqrt(1.0 / max(input_dim + hidden_size, 1))
        self.wx = Tensor(
            rng.normal(0.0, scale, size=(input_dim, _GATES * hidden_size)),
            requires_grad=True,
        )
        self.wh = Tensor(
            rng.normal(0.0, scale, size=(hidden_size, _GATES * hidden_size)),
            requires_grad=True,
        )
        bias = np.zeros(_GATES * hidden_size)
        bias[hidden_size:2 * hidden_size] = 1.0  # forget-gate bias
        self.b = Tensor(bias, requires_grad=True)

    def params(self, prefix):
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}


def lstm_step(cell: LstmCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One canonical LSTM step built from generic autodiff ops.

    Accepts vectors (d,) or batches (rows, d); returns (h, c).
    """
    x_t, h_prev, c_prev = (t if isinstance(t, Tensor) else Tensor(t)
                           for t in (x_t, h_prev, c_prev))
    hs = cell.hidden_size
    if x_t.shape[-1] != cell.input_dim:
        raise DimensionError(
            f"input dim {x_t.shape[-1]} != cell input_dim {cell.input_dim}"
        )
    if h_prev.shape[-1] != hs or c_prev.shape[-1] != hs:
        raise DimensionError("hidden/cell state dims do not match hidden_size")
    pre = ad.matmul(x_t, cell.wx) + ad.matmul(h_prev, cell.wh) + cell.b
    i = ad.sigmoid(pre[..., :hs])
    f = ad.sigmoid(pre[..., hs:2 * hs])
    g = ad.tanh(pre[..., 2 * hs:3 * hs])
    o = ad.sigmoid(pre[..., 3 * hs:])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def lstm_recurrence(cell: LstmCell, seq: Tensor, reverse=False,
                    return_sequence=False) -> Tensor:
    """Run ``cell`` over (rows, t, d_in), zero initial state.

    Returns the final hidden state (rows, H), or the full hidden sequence
    (rows, t, H) indexed in original time order when ``return_sequence``.
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    if seq.ndim != 3:
        raise DimensionError(f"expected (rows, t, d_in) input, got {seq.shape}")
    rows, t, _ = seq.shape
    if t < 1:
        raise InsufficientDataError("empty sequence")
    hs = cell.hidden_size
    # Input projection for all steps at once; the primitive handles only the
    # sequential part of the graph.
    xw = ad.matmul(seq, cell.wx) + cell.b  # (rows, t, 4H)
    wh = cell.wh

    order = list(range(t))[::-1] if reverse else list(range(t))
    h = np.zeros((rows, hs))
    c = np.zeros((rows, hs))
    caches = []
    hseq = np.empty((rows, t, hs))
    for step in order:
        pre = xw.data[:, step] + h @ wh.data
        h_prev, c_prev = h, c
        h, c, gates, tanh_c = kernels.lstm_gates_forward(pre, c_prev)
        caches.append((step, h_prev, c_prev, gates, tanh_c))
        hseq[:, step] = h
    out_data = hseq if return_sequence else h

    def back(grad):
        dxw = np.zeros_like(xw.data)
        dwh = np.zeros_like(wh.data)
        dh = np.zeros((rows, hs))
        dc = np.zeros((rows, hs))
        for pos, (step, h_prev, c_prev, gates, tanh_c) in enumerate(reversed(caches)):
            if return_sequence:
                dh = dh + grad[:, step]
            elif pos == 0:
                dh = dh + grad
            dpre, dc = kernels.lstm_gates_backward(dh, dc, gates, tanh_c, c_prev)
            dxw[:, step] = dpre
            dwh += h_prev.T @ dpre
            dh = dpre @ wh.data.T
        xw._accumulate(dxw)
        wh._accumulate(dwh)

    return Tensor(out_data, _parents=(xw, wh), _backward=back)


def lstm_one_to_many(cell: LstmCell, x1: Tensor, h0: Tensor, c0: Tensor,
                     wout: Tensor, bout: Tensor, t: int) -> Tensor:
    """Self-feeding unroll: each step's projected output is the next input.

    x1 (rows, d_in) is the first input; outputs are (rows, t, d_out) with
    d_out == d_in so the feedback loop closes.
    """
    if t < 1:
        raise InsufficientDataError("decoder must produce at least one step")
    x1, h0, c0 = (v if isinstance(v, Tensor) else Tensor(v) for v in (x1, h0, c0))
    rows = x1.shape[0]
    hs = cell.hidden_size
    d_out = wout.shape[1]
    if x1.shape[1] != cell.input_dim or d_out != cell.input_dim:
        raise DimensionError("one-to-many requires d_in == d_out on the cell")

    x = x1.data
    h, c = h0.data, c0.data
    caches = []
    ys = np.empty((rows, t, d_out))
    for step in range(t):
        pre = x @ cell.wx.data + h @ cell.wh.data + cell.b.data
        h_prev, c_prev, x_cur = h, c, x
        h, c, gates, tanh_c = kernels.lstm_gates_forward(pre, c_prev)
        y = h @ wout.data + bout.data
        caches.append((x_cur, h_prev, c_prev, gates, tanh_c, h))
        ys[:, step] = y
        x = y

    def back(grad):
        dwx = np.zeros_like(cell.wx.data)
        dwh = np.zeros_like(cell.wh.data)
        db = np.zeros_like(cell.b.data)
        dwout = np.zeros_like(wout.data)
        dbout = np.zeros_like(bout.data)
        dh = np.zeros((rows, hs))
        dc = np.zeros((rows, hs))
        dx = np.zeros((rows, d_out))
        for step in range(t - 1, -1, -1):
            x_cur, h_prev, c_prev, gates, tanh_c, h_cur = caches[step]
            dy = grad[:, step] + dx  # dx: feedback into x_{step+1}
            dwout += h_cur.T @ dy
            dbout += dy.sum(axis=0)
            dh = dh + dy @ wout.data.T
            dpre, dc = kernels.lstm_gates_backward(dh, dc, gates, tanh_c, c_prev)
            dwx += x_cur.T @ dpre
            dwh += h_prev.T @ dpre
            db += dpre.sum(axis=0)
            dx = dpre @ cell.wx.data.T
            dh = dpre @ cell.wh.data.T
        x1._accumulate(dx)
        h0._accumulate(dh)
        c0._accumulate(dc)
        cell.wx._accumulate(dwx)
        cell.wh._accumulate(dwh)
        cell.b._accumulate(db)
        wout._accumulate(dwout)
        bout._accumulate(dbout)

    return Tensor(
        ys,
        _parents=(x1, h0, c0, cell.wx, cell.wh, cell.b, wout, bout),
        _backward=back,
    )


class BiLstm:
    """Bidirectional encoder: forward + backward cells over a sequence,
    final hidden states concatenated and projected to d_z."""

    def __init__(self, input_dim, hidden_size, out_dim, rng):
        self.forward_cell = LstmCell(input_dim, hidden_size, rng)
        self.backward_cell = LstmCell(input_dim, hidden_size, rng)
        scale = np.sqrt(1.0 / (2 * hidden_size))
        self.projection = Tensor(
            rng.normal(0.0, scale, size=(2 * hidden_size, out_dim)),
            requires_grad=True,
        )
        self.hidden_size = hidden_size
        self.out_dim = out_dim

    def params(self, prefix):
        out = {}
        out.update(self.forward_cell.params(f"{prefix}.fwd"))
        out.update(self.backward_cell.params(f"{prefix}.bwd"))
        out[f"{prefix}.projection"] = self.projection
        return out


def bilstm_encode(bi: BiLstm, seq: Tensor) -> Tensor:
    """Encode (t, d) or batched (rows, t, d) sequences to (d_z,) / (rows, d_z)."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    single = seq.ndim == 2
    if single:
        seq = seq.reshape(1, *seq.shape)
    if seq.shape[1] < 1:
        raise InsufficientDataError("cannot encode an empty sequence")
    hf = lstm_recurrence(bi.forward_cell, seq, reverse=False)
    hb = lstm_recurrence(bi.backward_cell, seq, reverse=True)
    z = ad.matmul(ad.concatenate([hf, hb], axis=-1), bi.projection)
    return z.reshape(bi.out_dim) if single else z


class OneToManyLstm:
    """Decoder recurrence seeded from a per-service embedding.

    The embedding z is linearly lifted to the first input and the initial
    (h0, c0); the cell then unrolls ``t`` steps feeding its own projected
    output back as the next input.
    """

    def __init__(self, embed_dim, hidden_size, out_dim, rng):
        self.cell = LstmCell(out_dim, hidden_size, rng)
        scale = np.sqrt(1.0 / max(embed_dim, 1))
        self.lift_x = Tensor(rng.normal(0.0, scale, size=(embed_dim, out_dim)),
                             requires_grad=True)
        self.lift_h = Tensor(rng.normal(0.0, scale, size=(embed_dim, hidden_size)),
                             requires_grad=True)
        self.lift_c = Tensor(rng.normal(0.0, scale, size=(embed_dim, hidden_size)),
                             requires_grad=True)
        oscale = np.sqrt(1.0 / hidden_size)
        self.wout = Tensor(rng.normal(0.0, oscale, size=(hidden_size, out_dim)),
                           requires_grad=True)
        self.bout = Tensor(np.zeros(out_dim), requires_grad=True)
        self.embed_dim = embed_dim
        self.out_dim = out_dim

    def params(self, prefix):
        out = self.cell.params(f"{prefix}.cell")
        out.update({
            f"{prefix}.lift_x": self.lift_x,
            f"{prefix}.lift_h": self.lift_h,
            f"{prefix}.lift_c": self.lift_c,
            f"{prefix}.wout": self.wout,
            f"{prefix}.bout": self.bout,
        })
        return out


def one_to_many_decode(dec: OneToManyLstm, z: Tensor, t: int) -> Tensor:
    """Expand embeddings z of shape (d_z,) or (rows, d_z) into sequences of
    shape (t, d_out) / (rows, t, d_out)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    if z.shape[1] != dec.embed_dim:
        raise DimensionError(
            f"embedding dim {z.shape[1]} != decoder embed_dim {dec.embed_dim}"
        )
    x1 = ad.matmul(z, dec.lift_x)
    h0 = ad.matmul(z, dec.lift_h)
    c0 = ad.matmul(z, dec.lift_c)
    out = lstm_one_to_many(dec.cell, x1, h0, c0, dec.wout, dec.bout, t)
    return out.reshape(t, dec.out_dim) if single else out
