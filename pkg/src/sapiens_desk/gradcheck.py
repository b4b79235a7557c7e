"""Finite-difference gradient checking.

Compares backward-pass gradients against central differences computed by
re-running the forward function. The forward function must be pure: same
inputs, same output. Run checks in f64; central differences in f32 lose
too many digits to be a useful oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import NonFiniteError, NotScalarError

__all__ = ["GradCheckReport", "gradcheck"]


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int = -1
    worst_element: int = -1

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"gradcheck {state}: max rel error {self.max_rel_error:.3e} "
                f"(input {self.worst_input}, element {self.worst_element})")


def gradcheck(f: Callable[..., Tensor], point: Sequence[Tensor],
              step: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Check analytic gradients of a scalar-valued function at a point.

    Args:
        f: maps the point tensors to a scalar Tensor.
        point: leaf tensors; each gets requires_grad forced on.
        step: central-difference half step.
        tol: pass threshold on the elementwise relative error
            |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).

    Raises:
        NotScalarError: f does not return a single element.
        NonFiniteError: f returned NaN/Inf at the point or a probe.
    """
    leaves = [Tensor(p.data if isinstance(p, Tensor) else p,
                     requires_grad=True, dtype=np.float64) for p in point]
    out = f(*leaves)
    if out.size != 1:
        raise NotScalarError(f"gradcheck target has shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("gradcheck: non-finite function value at the point")
    out.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy()
                for l in leaves]

    def probe() -> float:
        with no_grad():
            v = f(*leaves)
        val = float(v.data.reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFiniteError("gradcheck: non-finite value while probing")
        return val

    worst = 0.0
    worst_input, worst_element = -1, -1
    for i, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            f_plus = probe()
            flat[j] = keep - step
            f_minus = probe()
            flat[j] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            if rel > worst:
                worst, worst_input, worst_element = rel, i, j
    return GradCheckReport(worst <= tol, worst, worst_input, worst_element)
