"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, arrays, index, h=1e-5):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``fn`` receives plain numpy arrays; the perturbed array is modified in
    place and restored afterwards.
    """
    x = arrays[index]
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        f_plus = float(fn(*arrays))
        flat[k] = saved - h
        f_minus = float(fn(*arrays))
        flat[k] = saved
        gflat[k] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(build, arrays, h=1e-5, floor=1e-6):
    """Compare reverse-mode and finite-difference gradients.

    ``build(*tensors)`` must return a scalar :class:`Tensor`.  Every array in
    ``arrays`` (float64 recommended) is wrapped as a leaf requiring grad.
    Returns the list of max relative errors, one per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()

    def scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).data

    errors = []
    for i, leaf in enumerate(leaves):
        numeric = numerical_gradient(scalar, arrays, i, h=h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        errors.append(relative_error(analytic, numeric, floor=floor))
    return errors
