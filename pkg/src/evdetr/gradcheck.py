"""Central finite-difference verification of analytic gradients.

The checker is the package's master oracle: every differentiable op and
every composite block is audited against it. The loss callable must be
deterministic (dropout off, no RNG consumption between calls).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalAbort
from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class GradCheckFailure:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_err: float = 0.0
    failures: list[GradCheckFailure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.ok else f"{len(self.failures)} FAILED"
        return f"gradcheck: {self.checked} elements, max rel err {self.max_rel_err:.3e}, {status}"


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` with central differences.

    An element fails when ``|analytic - numeric| / max(1, |numeric|) > tol``.
    Parameter data is perturbed in place and restored exactly.
    """
    loss = f()
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise NumericalAbort(f"grad_check: loss is not a finite scalar (shape {loss.data.shape})")
    for p in params:
        p.grad = None
    backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.grad = None

    report = GradCheckReport()
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ga = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(f().data)
                flat[i] = orig - h
                lm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    raise NumericalAbort(f"grad_check: non-finite loss while perturbing {p.name}[{i}]")
                numeric = (lp - lm) / (2.0 * h)
                rel = abs(ga[i] - numeric) / max(1.0, abs(numeric))
                report.checked += 1
                report.max_rel_err = max(report.max_rel_err, rel)
                if rel > tol:
                    report.failures.append(
                        GradCheckFailure(p.name, np.unravel_index(i, p.data.shape), float(ga[i]), numeric, rel)
                    )
    return report
