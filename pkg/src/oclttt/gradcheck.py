"""Central finite-difference gradient checks."""
import numpy as np

from . import autodiff as ad


def _coords(tensors, coords):
    if coords is None:
        return [np.arange(t.size) for t in tensors]
    return [np.asarray(c, dtype=np.intp) for c in coords]


def numeric_grad(fn, tensors, eps=1e-5, coords=None):
    """Central differences of scalar ``fn()`` at the probed flat indices.

    Returns one 1-D array per tensor, aligned with ``coords`` (all entries
    when ``coords`` is None).
    """
    out = []
    with ad.no_grad():
        for t, idx in zip(tensors, _coords(tensors, coords)):
            flat = t.data.reshape(-1)
            g = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                g[k] = (fp - fm) / (2 * eps)
            out.append(g)
    return out


def analytic_grad(fn, tensors, coords=None):
    for t in tensors:
        t.grad = None
    ad.backward(fn())
    out = []
    for t, idx in zip(tensors, _coords(tensors, coords)):
        g = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        out.append(g[idx].copy())
        t.grad = None
    return out


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)`` over the concatenated entries."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn, tensors, eps=1e-5, coords=None):
    """Relative error between backprop and finite-difference gradients."""
    return relative_error(analytic_grad(fn, tensors, coords), numeric_grad(fn, tensors, eps, coords))
