# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: masked softmax, leaky ReLU, fused LSTM gates.

Mirrors the contracts of ``_fallback`` exactly; see that module for the
documented semantics.  Single-threaded on purpose (bitwise determinism).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh, INFINITY

cnp.import_array()

COMPILED = True


cdef inline double _sig(double x) nogil:
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    cdef double e = exp(x)
    return e / (1.0 + e)


def leaky_relu_forward(object x, double slope):
    shape = np.asarray(x).shape
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        out[i] = xf[i] if xf[i] >= 0.0 else slope * xf[i]
    return np.asarray(out).reshape(shape)


def leaky_relu_backward(object x, object dy, double slope):
    shape = np.asarray(x).shape
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] df = np.ascontiguousarray(dy, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(xf)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        out[i] = df[i] if xf[i] >= 0.0 else slope * df[i]
    return np.asarray(out).reshape(shape)


def masked_softmax_forward(object logits, object mask):
    cdef cnp.ndarray[double, ndim=2] lg = np.ascontiguousarray(logits, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t rows = lg.shape[0], width = lg.shape[1], mrows = mk.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.zeros((rows, width))
    cdef Py_ssize_t j, k, mj
    cdef double mx, s
    cdef bint any_on
    for mj in range(mrows):
        any_on = False
        for k in range(width):
            if mk[mj, k]:
                any_on = True
                break
        if not any_on:
            raise ValueError("mask row selects no elements")
    for j in range(rows):
        mj = j % mrows
        mx = -INFINITY
        for k in range(width):
            if mk[mj, k] and lg[j, k] > mx:
                mx = lg[j, k]
        s = 0.0
        for k in range(width):
            if mk[mj, k]:
                out[j, k] = exp(lg[j, k] - mx)
                s += out[j, k]
        for k in range(width):
            if mk[mj, k]:
                out[j, k] /= s
    return out


def masked_softmax_backward(object y, object dy):
    cdef cnp.ndarray[double, ndim=2] yy = np.ascontiguousarray(y)
    cdef cnp.ndarray[double, ndim=2] dd = np.ascontiguousarray(dy)
    cdef Py_ssize_t rows = yy.shape[0], width = yy.shape[1]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((rows, width))
    cdef Py_ssize_t j, k
    cdef double dot
    for j in range(rows):
        dot = 0.0
        for k in range(width):
            dot += yy[j, k] * dd[j, k]
        for k in range(width):
            out[j, k] = yy[j, k] * (dd[j, k] - dot)
    return out


def lstm_gates_forward(object pre, object c_prev):
    cdef cnp.ndarray[double, ndim=2] p = np.ascontiguousarray(pre)
    cdef cnp.ndarray[double, ndim=2] cp = np.ascontiguousarray(c_prev)
    cdef Py_ssize_t rows = p.shape[0], hidden = p.shape[1] // 4
    cdef cnp.ndarray[double, ndim=2] h = np.empty((rows, hidden))
    cdef cnp.ndarray[double, ndim=2] c = np.empty((rows, hidden))
    cdef cnp.ndarray[double, ndim=2] gates = np.empty((rows, 4 * hidden))
    cdef cnp.ndarray[double, ndim=2] tc = np.empty((rows, hidden))
    cdef Py_ssize_t j, k
    cdef double gi, gf, gg, go, cv
    for j in range(rows):
        for k in range(hidden):
            gi = _sig(p[j, k])
            gf = _sig(p[j, hidden + k])
            gg = tanh(p[j, 2 * hidden + k])
            go = _sig(p[j, 3 * hidden + k])
            cv = gf * cp[j, k] + gi * gg
            gates[j, k] = gi
            gates[j, hidden + k] = gf
            gates[j, 2 * hidden + k] = gg
            gates[j, 3 * hidden + k] = go
            c[j, k] = cv
            tc[j, k] = tanh(cv)
            h[j, k] = go * tc[j, k]
    return h, c, gates, tc


def lstm_gates_backward(object dh, object dc,
                        object gates, object tanh_c,
                        object c_prev):
    cdef cnp.ndarray[double, ndim=2] dhh = np.ascontiguousarray(dh)
    cdef cnp.ndarray[double, ndim=2] dcc = np.ascontiguousarray(dc)
    cdef cnp.ndarray[double, ndim=2] g = np.ascontiguousarray(gates)
    cdef cnp.ndarray[double, ndim=2] tc = np.ascontiguousarray(tanh_c)
    cdef cnp.ndarray[double, ndim=2] cp = np.ascontiguousarray(c_prev)
    cdef Py_ssize_t rows = dhh.shape[0], hidden = dhh.shape[1]
    cdef cnp.ndarray[double, ndim=2] dpre = np.empty((rows, 4 * hidden))
    cdef cnp.ndarray[double, ndim=2] dcp = np.empty((rows, hidden))
    cdef Py_ssize_t j, k
    cdef double gi, gf, gg, go, dct, di, df, dg, do
    for j in range(rows):
        for k in range(hidden):
            gi = g[j, k]
            gf = g[j, hidden + k]
            gg = g[j, 2 * hidden + k]
            go = g[j, 3 * hidden + k]
            do = dhh[j, k] * tc[j, k]
            dct = dcc[j, k] + dhh[j, k] * go * (1.0 - tc[j, k] * tc[j, k])
            di = dct * gg
            df = dct * cp[j, k]
            dg = dct * gi
            dcp[j, k] = dct * gf
            dpre[j, k] = di * gi * (1.0 - gi)
            dpre[j, hidden + k] = df * gf * (1.0 - gf)
            dpre[j, 2 * hidden + k] = dg * (1.0 - gg * gg)
            dpre[j, 3 * hidden + k] = do * go * (1.0 - go)
    return dpre, dcp
