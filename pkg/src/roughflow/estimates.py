"""Closed-form scalar machinery: power envelopes, the partition split factor,
comparison-function growth bounds, and conformal distance transforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .algebra import DomainError

QUAD_TOL = 1e-10


def max_power(m: int, n: int, lam: float, half_open: bool = False) -> float:
    """max(lam^m, lam^n) over integer exponents in [m, n] (or (m, n] when half_open).

    For lam >= 0 the max over the range is attained at an endpoint, so only the
    two endpoint powers matter.
    """
    if lam < 0:
        raise DomainError("negative base")
    if not (isinstance(m, (int, np.integer)) and isinstance(n, (int, np.integer))):
        raise DomainError("exponents must be integers")
    if not 0 <= m < n:
        raise DomainError("need 0 <= m < n")
    lo = m + 1 if half_open else m
    return max(lam ** lo, lam ** n)


def split_decay(epsilon: float, theta: float) -> float:
    """eps^theta + (1-eps)^theta, the contraction factor of a split at the
    middle window; strictly below 1 whenever theta > 1 and eps in (0, 1/2]."""
    if not theta > 1:
        raise DomainError(f"theta={theta} must exceed 1")
    if not 0 < epsilon <= 0.5:
        raise DomainError(f"epsilon={epsilon} outside (0, 1/2]")
    return epsilon ** theta + (1 - epsilon) ** theta


@dataclass
class GrowthProfile:
    """Positive comparison function rho with G(s) = int_0^s du/rho(u).

    G is strictly increasing; its numeric inverse is a bracketed root solve.
    Closed forms for G / G_inverse can be supplied to bypass quadrature.
    """

    rho: Callable[[float], float]
    name: str = "custom"
    closed_G: Callable[[float], float] | None = None
    closed_G_inverse: Callable[[float], float] | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rho(0.0) <= 0:
            raise DomainError("rho must be positive")

    def G(self, s: float) -> float:
        if s < 0:
            raise DomainError("G needs s >= 0")
        if self.closed_G is not None:
            return self.closed_G(s)
        val, _ = quad(lambda u: 1.0 / self.rho(u), 0.0, s, epsabs=QUAD_TOL, limit=200)
        return val

    def G_inverse(self, u: float) -> float:
        if self.closed_G_inverse is not None:
            return self.closed_G_inverse(u)
        if u <= 0:
            return 0.0
        hi = 1.0
        while self.G(hi) < u:
            hi *= 2.0
            if hi > 1e12:
                raise DomainError("G appears bounded; cannot invert at this value")
        root = brentq(lambda s: self.G(s) - u, 0.0, hi, xtol=1e-13, rtol=1e-13)
        # one Newton polish: G'(s) = 1/rho(s)
        root = root - (self.G(root) - u) * self.rho(root)
        return float(root)

    @classmethod
    def affine(cls, C: float = 1.0) -> "GrowthProfile":
        """rho(s) = C(1+s); G and its inverse are logarithm/exponential."""
        return cls(
            rho=lambda s: C * (1.0 + s),
            name="affine",
            closed_G=lambda s: math.log1p(s) / C,
            closed_G_inverse=lambda u: math.expm1(C * u),
            params={"C": C},
        )

    @classmethod
    def log_affine(cls, C: float = 1.0) -> "GrowthProfile":
        """rho(s) = C(1+s)(1+ln(1+s)); double-exponential comparison growth."""
        return cls(
            rho=lambda s: C * (1.0 + s) * (1.0 + math.log1p(s)),
            name="log_affine",
            closed_G=lambda s: math.log1p(math.log1p(s)) / C,
            closed_G_inverse=lambda u: math.expm1(math.expm1(C * u)),
            params={"C": C},
        )

    @classmethod
    def numeric_variant(cls, base: "GrowthProfile") -> "GrowthProfile":
        """Same rho, but G/G_inverse forced through quadrature + root finding."""
        return cls(rho=base.rho, name=base.name + "_numeric", params=dict(base.params))

    @classmethod
    def tabulated(cls, radii, values, name: str = "tabulated") -> "GrowthProfile":
        radii = np.asarray(radii, float)
        values = np.asarray(values, float)
        if np.any(values <= 0):
            raise DomainError("tabulated rho must be positive")

        def rho(s, radii=radii, values=values):
            return float(np.interp(s, radii, values))

        return cls(rho=rho, name=name)


def growth_bound(profile: GrowthProfile, d0: float, t: float) -> float:
    """G^{-1}(G(d0) + t): reachable-distance envelope after time t from radius d0."""
    if t < 0:
        raise DomainError("t must be >= 0")
    if d0 < 0:
        raise DomainError("d0 must be >= 0")
    return profile.G_inverse(profile.G(d0) + t)


def conformal_distance(rho_conf: Callable[[float], float], dist: float) -> float:
    """Length of a minimizing radial segment under the conformal factor rho_conf:
    int_0^dist rho_conf(u) du, by adaptive quadrature at 1e-10 absolute target."""
    if dist < 0:
        raise DomainError("distance must be >= 0")
    if dist == 0:
        return 0.0
    val, _ = quad(rho_conf, 0.0, dist, epsabs=QUAD_TOL, limit=200)
    return float(val)
