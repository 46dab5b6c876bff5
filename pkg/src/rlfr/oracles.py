"""Analytic ground truth for the linear-schedule Gaussian bridge.

For x0 ~ N(0, 1), x1 ~ N(0, sigma^2) independent and the linear
interpolation x_t = (1-t) x0 + t x1, the marginal at time t is
N(0, (1-t)^2 + t^2 sigma^2) and both the optimal velocity field
E[x1 - x0 | x_t = x] and the marginal score are available in closed
form. These are the oracles against which the learned flow field, the
score/velocity conversion, and the deviation/likelihood relation are
checked. Also hosts the generic central-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def _check_t(t: float) -> None:
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie strictly inside (0, 1), got {t}")


def marginal_variance(t: float, sigma: float) -> float:
    """Variance of x_t = (1-t) x0 + t x1 for independent Gaussian endpoints."""
    return (1.0 - t) ** 2 + t**2 * sigma**2


def gaussian_velocity(x, t: float, sigma: float = 1.0):
    """Conditional-expectation velocity E[x1 - x0 | x_t = x].

    Both endpoints are zero-mean Gaussians, so the conditional means are
    linear in x with weights Cov(x1, x_t)/Var(x_t) = t sigma^2 / V and
    Cov(x0, x_t)/Var(x_t) = (1-t)/V; the velocity coefficient is their
    difference. At sigma=1 this reduces to (2t-1)/((1-t)^2 + t^2).
    """
    _check_t(t)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = marginal_variance(t, sigma)
    coeff = (t * sigma**2 - (1.0 - t)) / v
    return coeff * x


def gaussian_score(x, t: float, sigma: float = 1.0):
    """Marginal score of x_t: -x / ((1-t)^2 + t^2 sigma^2)."""
    _check_t(t)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return -x / marginal_variance(t, sigma)


def gaussian_loglik(x, sigma: float = 1.0):
    """Log density of N(0, sigma^2) at x."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return -0.5 * (x / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianBridge:
    """Linear bridge (alpha_t = 1-t, beta_t = t) onto a N(0, sigma^2) target."""

    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def velocity(self, x, t: float):
        return gaussian_velocity(x, t, self.sigma)

    def score(self, x, t: float):
        return gaussian_score(x, t, self.sigma)

    def loglik(self, x):
        return gaussian_loglik(x, self.sigma)

    def marginal_variance(self, t: float) -> float:
        return marginal_variance(t, self.sigma)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    (f(p + h e_i) - f(p - h e_i)) / (2h) per coordinate; O(h^2) accurate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    flat = params.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(params))
        flat[i] = orig - h
        f_minus = float(f(params))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
