"""Finite-difference gradient checking against the autodiff tape."""
import numpy as np

from .tensor import NonFiniteError, Tensor, backward


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (float64 array)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(Tensor(x.copy())))
        flat[i] = orig - eps
        fm = _scalar(f(Tensor(x.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _scalar(out):
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
    if not np.isfinite(val):
        raise NonFiniteError("function under check returned a non-finite value")
    return val


def grad_check(f, x, eps=1e-5):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    relative error per element is |a - n| / max(|a|, |n|, 1e-12).
    """
    x = x.data if isinstance(x, Tensor) else x
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise TypeError("grad_check needs a float64 input")
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    _scalar(out)
    if out.requires_grad:
        analytic = backward(out)[xt].data
    else:  # f does not depend on x
        analytic = np.zeros_like(x)
    numeric = numeric_grad(f, x, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
