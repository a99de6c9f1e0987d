"""Timing comparison of the compiled kernels against the NumPy fallback.

Run with:  python3 benchmarks/bench_kernels.py
"""

import importlib
import time

import numpy as np

from galmad.kernels import _fallback

try:
    _core = importlib.import_module("galmad.kernels._core")
except ImportError:
    _core = None


def _time(fn, *args, repeats=20):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4096, 256))
    dy = rng.normal(size=(4096, 256))
    logits = rng.normal(size=(1024, 64))
    mask = (rng.random((64, 64)) < 0.4).astype(np.uint8)
    np.fill_diagonal(mask, 1)
    pre = rng.normal(size=(2048, 4 * 64))
    c_prev = rng.normal(size=(2048, 64))

    cases = [
        ("leaky_relu_forward", lambda m: m.leaky_relu_forward(x, 0.2)),
        ("leaky_relu_backward", lambda m: m.leaky_relu_backward(dy, x, 0.2)),
        ("masked_softmax_forward",
         lambda m: m.masked_softmax_forward(logits, mask)),
        ("lstm_gates_forward", lambda m: m.lstm_gates_forward(pre, c_prev)),
    ]
    sm_f = _fallback.masked_softmax_forward(logits, mask)
    cases.append(("masked_softmax_backward",
                  lambda m: m.masked_softmax_backward(
                      rng.normal(size=logits.shape), sm_f)))
    h, c, gates, tanh_c = _fallback.lstm_gates_forward(pre, c_prev)
    dh = rng.normal(size=h.shape)
    dc = rng.normal(size=c.shape)
    cases.append(("lstm_gates_backward",
                  lambda m: m.lstm_gates_backward(dh, dc, gates, tanh_c,
                                                  c_prev)))

    print(f"{'kernel':26s} {'fallback':>12s} {'compiled':>12s} {'speedup':>9s}")
    for name, call in cases:
        t_py = _time(call, _fallback)
        if _core is None:
            print(f"{name:26s} {t_py * 1e3:10.3f} ms {'n/a':>12s}")
            continue
        t_c = _time(call, _core)
        print(f"{name:26s} {t_py * 1e3:10.3f} ms {t_c * 1e3:10.3f} ms "
              f"{t_py / t_c:8.2f}x")
    if _core is None:
        print("compiled extension not available; fallback only")


if __name__ == "__main__":
    main()
