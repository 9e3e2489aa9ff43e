"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, dtype_scope, no_grad


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    per_input: list[float] = field(default_factory=list)
    checked_coords: int = 0

    def __bool__(self) -> bool:
        return self.passed


def _as_f64(t: Tensor) -> Tensor:
    return Tensor(np.array(t.data, dtype=np.float64), requires_grad=True)


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    max_coords: int = 10_000,
    seed: int = 0,
) -> GradcheckReport:
    """Compare backward() against (f(x+h) - f(x-h)) / 2h coordinate by coordinate.

    Inputs are copied to float64 and ``f`` is evaluated in float64 scope on
    both routes. The error for one input is max|analytic - numeric| divided by
    max|numeric| (floored at 1e-12). Inputs with more than ``max_coords``
    elements are checked on a random coordinate sample.
    """
    rng = np.random.default_rng(seed)
    with dtype_scope(np.float64):
        xs = [_as_f64(t) for t in inputs]
        out = f(*xs)
        if out.data.size != 1:
            raise ValueError(f"gradcheck: f must be scalar-valued, got shape {out.shape}")
        backward(out)
        analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

        errors = []
        total = 0
        with no_grad():
            for x, ga in zip(xs, analytic):
                flat = x.data.reshape(-1)
                gflat = ga.reshape(-1)
                n = flat.size
                coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
                num = np.empty(coords.size, dtype=np.float64)
                for k, i in enumerate(coords):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(f(*xs).data)
                    flat[i] = orig - h
                    fm = float(f(*xs).data)
                    flat[i] = orig
                    num[k] = (fp - fm) / (2 * h)
                diff = np.abs(gflat[coords] - num).max(initial=0.0)
                scale = max(np.abs(num).max(initial=0.0), 1e-12)
                errors.append(float(diff / scale) if diff > 0 else 0.0)
                total += coords.size
    worst = max(errors, default=0.0)
    return GradcheckReport(max_rel_error=worst, passed=worst < tol, per_input=errors, checked_coords=total)
