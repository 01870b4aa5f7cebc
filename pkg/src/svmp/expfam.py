"""Natural-parameter algebra for the univariate Gaussian.

A Gaussian ``q(x)`` is stored by its natural parameters
``(precision, mean_times_precision)`` with sufficient statistics
``phi(x) = (-x**2 / 2, x)``, so that ``lambda . phi(x)`` reproduces the
Gaussian exponent and ``(1, 0)`` is the standard normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianNatural:
    precision: float
    mean_times_precision: float

    def __post_init__(self):
        p, h = float(self.precision), float(self.mean_times_precision)
        if not (math.isfinite(p) and p > 0.0):
            raise ValueError(f"precision must be positive and finite, got {p!r}")
        if not math.isfinite(h):
            raise ValueError(f"mean_times_precision must be finite, got {h!r}")
        object.__setattr__(self, "precision", p)
        object.__setattr__(self, "mean_times_precision", h)

    def as_array(self) -> np.ndarray:
        return np.array([self.precision, self.mean_times_precision])

    @classmethod
    def from_array(cls, a) -> "GaussianNatural":
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class Moments:
    mean: float
    variance: float

    def __post_init__(self):
        m, v = float(self.mean), float(self.variance)
        if not (math.isfinite(v) and v > 0.0):
            raise ValueError(f"variance must be positive and finite, got {v!r}")
        if not math.isfinite(m):
            raise ValueError(f"mean must be finite, got {m!r}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", v)


def moments(lam: GaussianNatural) -> Moments:
    return Moments(lam.mean_times_precision / lam.precision, 1.0 / lam.precision)


def from_moments(m: Moments) -> GaussianNatural:
    precision = 1.0 / m.variance
    return GaussianNatural(precision, m.mean * precision)


def blend(old: GaussianNatural, temp: GaussianNatural, rho: float) -> GaussianNatural:
    """Step of length ``rho`` along the natural gradient ``temp - old``.

    ``rho = 1`` returns ``temp``; the result is a convex combination, so the
    precision stays positive.
    """
    if not (0.0 < rho <= 1.0):
        raise ValueError(f"step size must lie in (0, 1], got {rho!r}")
    a = 1.0 - rho
    return GaussianNatural(
        a * old.precision + rho * temp.precision,
        a * old.mean_times_precision + rho * temp.mean_times_precision,
    )


def kl_to_standard_normal(lam: GaussianNatural) -> float:
    """KL(q || N(0, 1)) in nats."""
    m = moments(lam)
    return 0.5 * (m.variance + m.mean * m.mean - 1.0 - math.log(m.variance))


def log_partition(lam: GaussianNatural) -> float:
    """Log normalizer ``log int exp(lambda . phi(x)) dx``.

    Its gradient is ``E[phi(x)] = (-(var + mean**2) / 2, mean)`` and its
    Hessian is :func:`fisher`.
    """
    p, h = lam.precision, lam.mean_times_precision
    return 0.5 * h * h / p - 0.5 * math.log(p) + HALF_LOG_2PI


def expected_stats(lam: GaussianNatural) -> np.ndarray:
    m = moments(lam)
    return np.array([-0.5 * (m.variance + m.mean * m.mean), m.mean])


def fisher(lam: GaussianNatural) -> np.ndarray:
    """Closed-form 2x2 Fisher matrix ``cov[phi(x)]``."""
    m = moments(lam)
    mu, s2 = m.mean, m.variance
    off = -mu * s2
    return np.array([[0.5 * s2 * s2 + mu * mu * s2, off], [off, s2]])


# Vectorized forms used by the training loops; precision arrays are not
# validated here.

def kl_to_standard_normal_array(precision: np.ndarray, mtp: np.ndarray) -> np.ndarray:
    var = 1.0 / precision
    mean = mtp * var
    return 0.5 * (var + mean * mean - 1.0 - np.log(var))
