"""Hot numeric kernels with a compiled core and a NumPy fallback.

The Cython extension ``_core`` is preferred when it was built; otherwise the
pure-NumPy ``_fallback`` module provides identical semantics.  The selected
implementation is re-exported at package level; both modules stay importable
directly for tests and benchmarks.
"""

from . import _fallback

try:
    from . import _core as _impl  # type: ignore[attr-defined]
except ImportError:
    _impl = _fallback

COMPILED = _impl.COMPILED

leaky_relu_forward = _impl.leaky_relu_forward
leaky_relu_backward = _impl.leaky_relu_backward
masked_softmax_forward = _impl.masked_softmax_forward
masked_softmax_backward = _impl.masked_softmax_backward
lstm_gates_forward = _impl.lstm_gates_forward
lstm_gates_backward = _impl.lstm_gates_backward

__all__ = [
    "COMPILED",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "masked_softmax_forward",
    "masked_softmax_backward",
    "lstm_gates_forward",
    "lstm_gates_backward",
]
