"""Closed-form proximity operators and projections.

Every solver step and every network activation in this package is one of
the four maps below. The sparsity penalty is fixed to the l1 norm, so the
dual-side activation is the clamp onto the l-infinity ball (the prox of
the conjugate of ``nu * ||.||_1``), independent of any step-size scaling.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BoxConstraint",
    "BOX01",
    "project_box",
    "hardtanh",
    "soft_threshold",
    "prox_quadratic_box",
]


@dataclass(frozen=True)
class BoxConstraint:
    """Axis-aligned box [lo, hi]; infinite bounds disable the clamp."""

    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"box requires lo < hi, got [{self.lo}, {self.hi}]")

    def contains(self, x, slack=0.0):
        x = np.asarray(x)
        return bool(np.all(x >= self.lo - slack) and np.all(x <= self.hi + slack))


BOX01 = BoxConstraint(0.0, 1.0)


def project_box(x, box=BOX01):
    """Euclidean projection onto the box: entrywise clamp to [lo, hi]."""
    return np.clip(np.asarray(x, dtype=np.float64), box.lo, box.hi)


def hardtanh(u, nu):
    """Entrywise clamp to [-nu, nu].

    This is the projection onto the l-infinity ball of radius ``nu``, i.e.
    the prox of the conjugate of ``nu * ||.||_1`` at any positive step size.
    ``nu = inf`` is the no-clipping sentinel; ``nu = 0`` pins the output to 0.
    """
    if nu < 0:
        raise ValueError(f"hardtanh radius must be >= 0, got {nu}")
    u = np.asarray(u, dtype=np.float64)
    if np.isinf(nu):
        return u.copy()
    return np.clip(u, -nu, nu)


def soft_threshold(u, theta):
    """Entrywise ``sign(u) * max(|u| - theta, 0)``, the prox of ``theta*|.|``."""
    if theta < 0:
        raise ValueError(f"threshold must be >= 0, got {theta}")
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.maximum(np.abs(u) - theta, 0.0)


def prox_quadratic_box(v, mu, z, box=BOX01):
    """Prox of ``mu * (0.5*||x - z||^2 + i_box(x))`` at ``v``.

    Closed form ``P_box((v + mu*z) / (1 + mu))``; ``mu = inf`` degenerates to
    ``P_box(z)``.
    """
    if not mu > 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if v.shape != z.shape:
        raise ValueError(f"shape mismatch: v {v.shape} vs z {z.shape}")
    if np.isinf(mu):
        return project_box(z, box)
    return project_box((v + mu * z) / (1.0 + mu), box)
