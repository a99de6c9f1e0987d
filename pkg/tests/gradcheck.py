"""Central finite-difference gradient checking used across test modules."""

import numpy as np

from galmad.autodiff import zero_grads


def numeric_grad(loss_fn, param, h=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def assert_grads_match(loss_fn, params, rtol=1e-4, h=1e-5):
    """Check analytic vs numeric gradients for every tensor in ``params``.

    ``params`` is a dict name -> Tensor; relative error is measured against
    the larger of the two norms with an absolute floor.
    """
    zero_grads(params.values())
    loss = loss_fn()
    loss.backward()
    for name, p in params.items():
        assert p.grad is not None, f"no gradient reached {name}"
        num = numeric_grad(loss_fn, p, h=h)
        denom = max(np.abs(num).max(), np.abs(p.grad).max(), 1.0)
        err = np.abs(p.grad - num).max() / denom
        assert err < rtol, f"gradient mismatch for {name}: rel err {err:.2e}"
    zero_grads(params.values())
