"""Central finite-difference gradient checking against the analytic backward."""

import numpy as np

from .tensor import Tensor


def finite_difference_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    error per coordinate is |analytic - numeric| / max(1, |analytic|); the
    maximum over all coordinates is returned. Use float64 inputs for tight
    tolerances.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.isfinite(out.data).all():
        raise ValueError("function produced a non-finite value at the base point")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(flat.reshape(x.data.shape))).data
        flat[i] = orig - eps
        lo = f(Tensor(flat.reshape(x.data.shape))).data
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"function produced a non-finite value at coordinate {i}")
        numeric[i] = (float(hi) - float(lo)) / (2.0 * eps)

    numeric = numeric.reshape(analytic.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
