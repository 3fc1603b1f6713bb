"""Central finite-difference verification of analytic gradients.

The checker is deliberately independent of the reverse-mode path: the
numeric side only ever calls the forward function. Checks must run in
64-bit; finite differences are unusable at 32-bit noise floors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep over every element of x."""

    passed: bool
    max_rel_err: float
    max_abs_err: float
    n_elements: int
    worst_index: tuple = ()
    details: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  max_rel_err={self.max_rel_err:.3e}  "
                f"max_abs_err={self.max_abs_err:.3e}  n={self.n_elements}")


def finite_diff_check(f, x: Tensor, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic d f/dx against central differences, element by element.

    ``f`` maps a tensor to a scalar tensor and must be deterministic (verified
    by evaluating twice). An element passes on relative error <= tol when both
    gradient magnitudes exceed 1e-8, and on absolute error <= tol otherwise.
    """
    if x.dtype != np.float64:
        raise ValueError("finite_diff_check requires a float64 input tensor")

    probe = Tensor(x.data.copy(), requires_grad=False, dtype=np.float64)
    first = float(f(probe).data)
    second = float(f(Tensor(x.data.copy(), requires_grad=False, dtype=np.float64)).data)
    if first != second:
        raise RuntimeError(f"finite_diff_check: f is non-deterministic ({first} != {second})")

    xg = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(xg)
    if out.size != 1:
        raise ValueError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = xg.grad if xg.grad is not None else np.zeros_like(xg.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        work = x.data.copy().reshape(-1)
        work[i] = orig + h
        fp = float(f(Tensor(work.reshape(x.shape), dtype=np.float64)).data)
        work[i] = orig - h
        fm = float(f(Tensor(work.reshape(x.shape), dtype=np.float64)).data)
        num_flat[i] = (fp - fm) / (2.0 * h)

    abs_err = np.abs(analytic - numeric)
    both_large = (np.abs(analytic) > 1e-8) & (np.abs(numeric) > 1e-8)
    rel_err = np.zeros_like(abs_err)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_err[both_large] = abs_err[both_large] / denom[both_large]

    err = np.where(both_large, rel_err, abs_err)
    worst = int(np.argmax(err)) if err.size else 0
    passed = bool(np.all(err <= tol)) if err.size else True
    return GradCheckReport(
        passed=passed,
        max_rel_err=float(rel_err.max()) if rel_err.size else 0.0,
        max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
        n_elements=int(flat.size),
        worst_index=np.unravel_index(worst, x.shape) if err.size else (),
    )
