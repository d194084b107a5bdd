"""Central finite differences, used as an independent gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError


def finite_diff_grad(loss_fn: Callable[[dict[str, np.ndarray]], float],
                     params: Mapping[str, np.ndarray], h: float = 1e-5,
                     wrt=None) -> dict[str, np.ndarray]:
    """Coordinate-wise (f(p + h e) - f(p - h e)) / 2h for every entry.

    ``loss_fn`` must be deterministic: reseed any randomness inside it.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name in (list(base) if wrt is None else wrt):
        arr = base[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(base))
            flat[i] = orig - h
            fm = float(loss_fn(base))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0
