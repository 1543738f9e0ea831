"""Central finite-difference checks for the hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

FD_STEP = 1e-6
REL_FLOOR = 1e-8


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_diff_scalar(f: Callable, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Elementwise central difference of a vectorised scalar function."""
    x = np.asarray(x, dtype=np.float64)
    return (np.asarray(f(x + h)) - np.asarray(f(x - h))) / (2.0 * h)


def sample_away_from_kink(n: int, seed: int, lo: float = -10.0, hi: float = 10.0,
                          band: float = 1e-4) -> np.ndarray:
    """``n`` uniform samples in [lo, hi] outside ``| |x| - 1 | < band``."""
    if n <= 0:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    out = np.empty(0)
    while out.size < n:
        x = rng.uniform(lo, hi, size=2 * n)
        out = np.concatenate([out, x[np.abs(np.abs(x) - 1.0) >= band]])
    return out[:n]


@dataclass(frozen=True)
class GradcheckReport:
    n: int
    worst_rel_err: float
    worst_x: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


def check_scalar_gradient(loss: Callable, grad: Callable, xs: np.ndarray,
                          tolerance: float, h: float = FD_STEP) -> GradcheckReport:
    if not tolerance > 0:
        raise ValueError("tolerance must be > 0")
    numeric = central_diff_scalar(loss, xs, h)
    err = rel_error(grad(xs), numeric)
    i = int(np.argmax(err))
    return GradcheckReport(len(xs), float(err[i]), float(xs[i]), tolerance)


def central_diff_params(f: Callable[[dict], float], params: Mapping[str, np.ndarray],
                        h: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central differences of ``f(params)`` with respect to every parameter entry."""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(work)
            flat[i] = orig - h
            fm = f(work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out
