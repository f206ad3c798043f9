"""Central finite differences for verifying hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_STEP = 1e-6


def central_diff(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array.

    Perturbs one entry at a time; f must not mutate its argument.
    """
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        flat[i] = (f(xp) - f(xm)) / (2.0 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Max-norm relative error, safe when both gradients are (near) zero."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


@dataclass
class GradReport:
    """Per-parameter relative errors for one randomized instance."""

    scope: str
    instance: int
    errors: dict[str, float]
    tol: float
    flagged: bool = False  # tie boundary hit; instance was resampled

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def worst(self) -> str:
        if not self.errors:
            return "-"
        return max(self.errors, key=self.errors.get)


def check_param_grads(loss_fn, params: dict[str, np.ndarray],
                      analytic: dict[str, np.ndarray],
                      step: float = DEFAULT_STEP) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    loss_fn takes the full params dict and returns a scalar; one entry of one
    parameter array is perturbed per evaluation.
    """
    errors = {}
    for name, value in params.items():
        def f(perturbed, _name=name):
            trial = dict(params)
            trial[_name] = perturbed
            return loss_fn(trial)

        numeric = central_diff(f, value, step=step)
        errors[name] = rel_error(analytic[name], numeric)
    return errors
