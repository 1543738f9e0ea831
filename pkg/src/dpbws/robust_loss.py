"""Robust regression kernels: the Dense Points loss and Smooth-L1.

All kernels are vectorised over numpy arrays and return plain floats for
scalar input. Gradients are hand derived; ``tests/test_robust_loss.py``
checks them against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np

LN2_M1 = math.log(2.0) - 1.0


def as_residuals(x) -> np.ndarray:
    """Convert ``x`` to a float64 array, rejecting NaN and Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("residuals must be finite")
    return arr


def _check_omega(omega: float) -> float:
    omega = float(omega)
    if not (0.0 < omega <= 0.5):
        raise ValueError(f"omega must lie in (0, 0.5], got {omega!r}")
    return omega


def _out(arr: np.ndarray, like):
    return float(arr) if np.ndim(like) == 0 else arr


def dp_loss(x, omega: float):
    """Dense Points loss.

    ``omega * ln(1 + x**2)`` inside the unit interval and
    ``omega * (|x| + ln 2 - 1)`` outside. Both branches equal
    ``omega * ln 2`` at ``|x| = 1``.
    """
    omega = _check_omega(omega)
    r = as_residuals(x)
    a = np.abs(r)
    val = np.where(a < 1.0, omega * np.log1p(r * r), omega * (a + LN2_M1))
    return _out(val, x)


def dp_grad(x, omega: float):
    """Exact derivative of :func:`dp_loss`: ``2*omega*x/(1+x**2)`` or ``omega*sign(x)``."""
    omega = _check_omega(omega)
    r = as_residuals(x)
    val = np.where(np.abs(r) < 1.0, 2.0 * omega * r / (1.0 + r * r), omega * np.sign(r))
    return _out(val, x)


def dp_grad_printed(x, omega: float):
    """The gradient as commonly printed for the Dense Points loss.

    ``omega*|x|/(1+x**2)`` inside the unit interval, ``omega`` outside.
    This is *not* the derivative of :func:`dp_loss` (it lacks the factor 2
    and the sign, and jumps from omega/2 to omega at ``|x| = 1``). Kept only
    for comparison charts and the failing gradcheck mode; never train with it.
    """
    omega = _check_omega(omega)
    r = as_residuals(x)
    a = np.abs(r)
    val = np.where(a < 1.0, omega * a / (1.0 + r * r), omega + 0.0 * r)
    return _out(val, x)


def smooth_l1(x):
    """Smooth-L1 with the transition fixed at 1: ``0.5*x**2`` or ``|x| - 0.5``."""
    r = as_residuals(x)
    a = np.abs(r)
    val = np.where(a < 1.0, 0.5 * (r * r), a - 0.5)
    return _out(val, x)


def smooth_l1_grad(x):
    r = as_residuals(x)
    val = np.where(np.abs(r) < 1.0, r, np.sign(r))
    return _out(val, x)


def smooth_l1_grad_printed(x):
    """Magnitude-only Smooth-L1 gradient (``|x|`` or 1), for comparison only."""
    r = as_residuals(x)
    a = np.abs(r)
    val = np.where(a < 1.0, a, 1.0 + 0.0 * r)
    return _out(val, x)


@dataclass(frozen=True)
class DensePoint:
    """Dense Points loss variant; ``omega`` must lie in (0, 0.5]."""

    omega: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "omega", _check_omega(self.omega))

    @property
    def name(self) -> str:
        return f"dp(omega={self.omega:g})"

    def loss(self, x):
        return dp_loss(x, self.omega)

    def grad(self, x):
        return dp_grad(x, self.omega)

    def grad_printed(self, x):
        return dp_grad_printed(x, self.omega)

    def loss_and_grad(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unchecked fused kernel for hot loops; ``r`` must already be an array."""
        a = np.abs(r)
        inner = a < 1.0
        sq = r * r
        loss = np.where(inner, np.log1p(sq), a + LN2_M1)
        loss *= self.omega
        grad = np.where(inner, (2.0 * self.omega) * r / (1.0 + sq), self.omega * np.sign(r))
        return loss, grad


@dataclass(frozen=True)
class SmoothL1:
    """Smooth-L1 variant (transition point 1, no beta)."""

    @property
    def name(self) -> str:
        return "smoothl1"

    def loss(self, x):
        return smooth_l1(x)

    def grad(self, x):
        return smooth_l1_grad(x)

    def grad_printed(self, x):
        return smooth_l1_grad_printed(x)

    def loss_and_grad(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unchecked fused kernel for hot loops; ``r`` must already be an array."""
        c = np.clip(r, -1.0, 1.0)
        return c * (r - 0.5 * c), c


LossKind = Union[DensePoint, SmoothL1]


def parse_loss_kind(kind: str, omega: float | None = None) -> LossKind:
    """Build a loss kind from its CLI/config spelling (``dp`` or ``smoothl1``)."""
    key = kind.strip().lower().replace("-", "").replace("_", "")
    if key in ("dp", "densepoint", "densepoints"):
        return DensePoint(0.5 if omega is None else omega)
    if key in ("smoothl1", "sl1"):
        return SmoothL1()
    raise ValueError(f"unknown loss kind {kind!r}; expected 'dp' or 'smoothl1'")


@dataclass(frozen=True)
class BatchLossResult:
    value: float
    grads: np.ndarray


def batch_loss(
    residuals: Sequence[float] | np.ndarray,
    kind: LossKind,
    reduction: Literal["mean", "sum"] = "mean",
) -> BatchLossResult:
    """Reduce per-element losses and return matching per-element gradients.

    With ``reduction="mean"`` the gradients are divided by the element count,
    so ``grads`` is the gradient of ``value`` itself.
    """
    r = as_residuals(residuals).ravel()
    if r.size == 0:
        raise ValueError("batch_loss needs at least one residual")
    per = np.asarray(kind.loss(r))
    grads = np.asarray(kind.grad(r), dtype=np.float64)
    if reduction == "mean":
        return BatchLossResult(float(per.mean()), grads / r.size)
    if reduction == "sum":
        return BatchLossResult(float(per.sum()), grads)
    raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
