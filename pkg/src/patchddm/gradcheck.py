"""Finite-difference verification of analytic gradients.

The check evaluates the operation under test in float64. At float32, a
central difference with step 1e-3 is dominated by round-off (the forward
error divided by the step easily exceeds the 1e-3 acceptance band), so the
float64 run is what makes the tolerance meaningful. The ops are
dtype-generic and run the exact same code paths; product tensors remain
float32 everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    entries_checked: int
    worst_input: int
    worst_index: int

    def __str__(self) -> str:
        return (
            f"grad check: max rel error {self.max_rel_error:.3e} over "
            f"{self.entries_checked} entries (worst: input {self.worst_input}, "
            f"flat index {self.worst_index})"
        )


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    max_entries_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of sum(fn(*inputs)) against central differences.

    Relative error is normalized by max(1, |analytic|, |numeric|) so that
    near-zero gradients are compared absolutely. Exceeding a tolerance is a
    test failure for the caller, not an error here.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    work = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = fn(*work)
    loss = out.sum()
    loss.backward()
    analytic = [np.zeros_like(w.data) if w.grad is None else w.grad.copy() for w in work]

    def evaluate() -> float:
        with no_grad():
            return float(fn(*work).data.sum())

    max_err = 0.0
    worst = (0, 0)
    checked = 0
    for i, w in enumerate(work):
        flat = w.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_input is not None and flat.size > max_entries_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(flat.size, size=max_entries_per_input, replace=False)
        for j in indices:
            orig = flat[j]
            flat[j] = orig + step
            f_plus = evaluate()
            flat[j] = orig - step
            f_minus = evaluate()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = _rel_error(float(analytic[i].reshape(-1)[j]), numeric)
            checked += 1
            if err > max_err:
                max_err = err
                worst = (i, int(j))
    return GradCheckReport(max_err, checked, worst[0], worst[1])
