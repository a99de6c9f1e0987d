"""Pure-NumPy reference implementations of the hot kernels.

Semantically identical to the compiled versions in ``_core.pyx``; used when
the extension is not built and as the correctness oracle in tests.

All functions take and return float64 C-contiguous arrays.  2-D inputs are
(rows, width); masks are uint8 with ``mask_rows`` broadcast cyclically over
the logit rows (row ``j`` uses mask row ``j % mask_rows``).
"""

import numpy as np

COMPILED = False


def leaky_relu_forward(x, slope):
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(x, dy, slope):
    return np.where(x >= 0.0, dy, slope * dy)


def masked_softmax_forward(logits, mask):
    rows, width = logits.shape
    mrows = mask.shape[0]
    if np.any(mask.sum(axis=1) == 0):
        raise ValueError("mask row selects no elements")
    full = np.broadcast_to(mask, (rows, width)) if mrows == rows else np.tile(
        mask, (rows // mrows + 1, 1))[:rows]
    m = full.astype(bool)
    shifted = np.where(m, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_backward(y, dy):
    # y is zero off-mask, so the off-mask entries of dx vanish automatically.
    dot = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def lstm_gates_forward(pre, c_prev):
    """Fused LSTM gate activation.

    pre: (rows, 4H) pre-activations ordered [input, forget, candidate, output].
    Returns (h, c, gates, tanh_c) where gates holds the activated gate values
    in the same layout as pre.
    """
    h4 = pre.shape[1]
    hidden = h4 // 4
    i = _sigmoid(pre[:, :hidden])
    f = _sigmoid(pre[:, hidden:2 * hidden])
    g = np.tanh(pre[:, 2 * hidden:3 * hidden])
    o = _sigmoid(pre[:, 3 * hidden:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    gates = np.concatenate([i, f, g, o], axis=1)
    return h, c, gates, tanh_c


def lstm_gates_backward(dh, dc, gates, tanh_c, c_prev):
    """Backward of lstm_gates_forward.

    dh, dc: gradients w.r.t. h and c (dc may be zeros).
    Returns (dpre, dc_prev).
    """
    hidden = dh.shape[1]
    i = gates[:, :hidden]
    f = gates[:, hidden:2 * hidden]
    g = gates[:, 2 * hidden:3 * hidden]
    o = gates[:, 3 * hidden:]
    do = dh * tanh_c
    dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dc_prev = dc_total * f
    dpre = np.concatenate(
        [
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    return dpre, dc_prev


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
