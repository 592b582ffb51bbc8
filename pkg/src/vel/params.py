"""Gas parameters, self-similar profile constants, and closed-form evaluation.

The compactly supported self-similar density of the porous-medium flow with
adiabatic exponent gamma > 1 is

    rho(t, x) = (1+t)^(-3/(3g-1)) * (A - B (1+t)^(-2/(3g-1)) |x|^2)_+^(1/(g-1))

with B = (g-1)/(2g(3g-1)) in closed form and A fixed by the total mass M
through a one-dimensional moment integral.  The support is the ball of
radius Rbar(t) = sqrt(A/B) (1+t)^(1/(3g-1)); the carrier velocity is
u(t, x) = x / ((3g-1)(1+t)).  This module derives the constants, evaluates
the profile, and checks it against the porous medium equation, the Darcy
momentum balance, and mass conservation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

__all__ = [
    "GasParams",
    "BarenblattConstants",
    "BarenblattEval",
    "OUTSIDE",
    "is_outside",
    "moment_integral",
    "derive_constants",
    "boundary_radius",
    "barenblatt_eval",
    "pme_darcy_residual",
    "mass_check",
    "sigma",
    "rho0_bar",
    "sound_speed_slope",
]

# Marker for weight evaluations outside the support; never a silent zero.
OUTSIDE = float("nan")


def is_outside(value):
    """True where a weight evaluation carries the outside-domain marker."""
    return np.isnan(value)


@dataclass(frozen=True)
class GasParams:
    """Adiabatic exponent and total mass of the gas."""

    gamma: float
    mass: float

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if not self.mass > 0.0:
            raise ValueError(f"mass must be positive, got {self.mass}")


@dataclass(frozen=True)
class BarenblattConstants:
    """Derived profile constants for one (gamma, mass) pair.

    a_bar, b_bar are the coefficients of the parabolic pressure profile
    sigma(y) = a_bar - b_bar |y|^2, iota = 1/(gamma-1), and r0 is the
    initial support radius sqrt(a_bar/b_bar).
    """

    a_bar: float
    b_bar: float
    iota: float
    r0: float


@dataclass(frozen=True)
class BarenblattEval:
    """Pointwise profile evaluation: density, velocity, sound speed squared."""

    density: float
    velocity: np.ndarray
    sound_speed_sq: float
    inside: bool


def moment_integral(iota, quad_tol=1e-13, max_order=256):
    """Integral of y^2 (1 - y^2)^iota over (0, 1) by Gauss-Jacobi quadrature.

    The Jacobi weight absorbs the (1-y)^iota endpoint factor, so the
    remaining integrand is analytic and the rule converges exponentially.
    Order is doubled until two successive values agree to quad_tol
    relative; raises RuntimeError with the achieved tolerance otherwise.
    """
    # substitute y = (1+x)/2:  integrand = (1-x)^iota (1+x)^2 (3+x)^iota / 2^(2 iota + 3)
    scale = 2.0 ** -(2.0 * iota + 3.0)
    prev = None
    order = 8
    while order <= max_order:
        x, w = roots_jacobi(order, iota, 0.0)
        val = scale * np.sum(w * (1.0 + x) ** 2 * (3.0 + x) ** iota)
        if prev is not None and abs(val - prev) <= quad_tol * abs(val):
            return val
        prev = val
        order *= 2
    achieved = abs(val - prev) / abs(val)
    raise RuntimeError(
        f"moment integral did not converge to {quad_tol:g}; achieved {achieved:g}"
    )


def derive_constants(params: GasParams, quad_tol=1e-13) -> BarenblattConstants:
    """Derive (a_bar, b_bar, iota, r0) from gamma and the total mass.

    b_bar has the closed form (g-1)/(2g(3g-1)).  a_bar solves

        u^((3g-1)/(2(g-1))) = M g^iota (g b_bar)^(3/2) / (4 pi I)

    in u = g * a_bar, where I is the moment integral.  The map u -> u^p is
    monotone for u > 0, so a bracketed bisection is safe; a Newton polish
    brings the root to machine precision.
    """
    g = params.gamma
    iota = 1.0 / (g - 1.0)
    b_bar = (g - 1.0) / (2.0 * g * (3.0 * g - 1.0))
    mom = moment_integral(iota, quad_tol=quad_tol)
    rhs = params.mass * g**iota * (g * b_bar) ** 1.5 / (4.0 * math.pi * mom)
    p = (3.0 * g - 1.0) / (2.0 * (g - 1.0))

    def phi(u):
        return u**p - rhs

    lo, hi = 0.0, 1.0
    while phi(hi) < 0.0:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if phi(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    u = 0.5 * (lo + hi)
    for _ in range(8):  # Newton polish
        u -= phi(u) / (p * u ** (p - 1.0))
    a_bar = u / g
    r0 = math.sqrt(a_bar / b_bar)
    return BarenblattConstants(a_bar=a_bar, b_bar=b_bar, iota=iota, r0=r0)


def boundary_radius(c: BarenblattConstants, gamma, t):
    """Support radius sqrt(a_bar/b_bar) (1+t)^(1/(3g-1))."""
    return c.r0 * (1.0 + t) ** (1.0 / (3.0 * gamma - 1.0))


def _density(c: BarenblattConstants, gamma, t, x):
    """Closed-form density, valid for any t > -1; 0 outside the support."""
    g = gamma
    profile = c.a_bar - c.b_bar * (1.0 + t) ** (-2.0 / (3.0 * g - 1.0)) * np.dot(x, x)
    if profile <= 0.0:
        return 0.0, False
    return (1.0 + t) ** (-3.0 / (3.0 * g - 1.0)) * profile**c.iota, True


def barenblatt_eval(c: BarenblattConstants, gamma, t, x) -> BarenblattEval:
    """Evaluate density, velocity, and sound speed squared at (t, x).

    Outside the support the density is exactly 0 with inside=False; the
    function is total so quadrature loops may cross the boundary.
    """
    if t < 0.0:
        raise ValueError(f"t must be nonnegative, got {t}")
    x = np.asarray(x, dtype=float)
    rho, inside = _density(c, gamma, t, x)
    if inside:
        vel = x / ((3.0 * gamma - 1.0) * (1.0 + t))
    else:
        vel = np.zeros(3)
    return BarenblattEval(
        density=rho,
        velocity=vel,
        sound_speed_sq=gamma * rho ** (gamma - 1.0) if inside else 0.0,
        inside=inside,
    )


def pme_darcy_residual(c: BarenblattConstants, gamma, t, x, h):
    """Centered-difference residuals of the porous medium and Darcy laws.

    Returns (|d_t rho - lap(rho^g)|, |grad(rho^g) + rho u|) at (t, x); both
    vanish at second order in h because the profile is an exact solution.
    The point must keep a radial distance of more than 3h to the support
    boundary so every stencil point stays inside.
    """
    x = np.asarray(x, dtype=float)
    rad = boundary_radius(c, gamma, t)
    if rad - np.linalg.norm(x) <= 3.0 * h:
        raise ValueError(
            f"evaluation point within 3h of the vacuum boundary: "
            f"|x|={np.linalg.norm(x):.6g}, boundary={rad:.6g}, h={h:g}"
        )

    def rho(tt, xx):
        return _density(c, gamma, tt, xx)[0]

    def pressure(xx):
        return rho(t, xx) ** gamma

    d_t = (rho(t + h, x) - rho(t - h, x)) / (2.0 * h)
    lap = 0.0
    grad_p = np.zeros(3)
    p0 = pressure(x)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        pp, pm = pressure(x + e), pressure(x - e)
        lap += (pp - 2.0 * p0 + pm) / h**2
        grad_p[i] = (pp - pm) / (2.0 * h)
    ev = barenblatt_eval(c, gamma, t, x)
    pme_res = abs(d_t - lap)
    darcy_res = float(np.linalg.norm(grad_p + ev.density * ev.velocity))
    return pme_res, darcy_res


def mass_check(c: BarenblattConstants, gamma, t, quad_order=64):
    """Total mass by radial Gauss-Legendre quadrature over the support.

    The radius is mapped as r = Rbar sin(pi u / 2), which flattens the
    (1 - r^2/Rbar^2)^iota endpoint factor so the rule converges fast for
    every gamma (plain nodes stall near the boundary for gamma > 2).
    """
    if quad_order < 4:
        raise ValueError(f"quad_order must be at least 4, got {quad_order}")
    rad = boundary_radius(c, gamma, t)
    u, w = roots_legendre(quad_order)
    u = 0.5 * (u + 1.0)  # map to (0, 1)
    w = 0.5 * w
    r = rad * np.sin(0.5 * math.pi * u)
    dr = rad * 0.5 * math.pi * np.cos(0.5 * math.pi * u)
    scale = (1.0 + t) ** (-2.0 / (3.0 * gamma - 1.0))
    profile = c.a_bar - c.b_bar * scale * r**2
    profile = np.maximum(profile, 0.0)
    rho = (1.0 + t) ** (-3.0 / (3.0 * gamma - 1.0)) * profile**c.iota
    return float(4.0 * math.pi * np.sum(w * rho * r**2 * dr))


def sigma(c: BarenblattConstants, y):
    """Degenerate boundary weight a_bar - b_bar |y|^2 on the reference ball.

    Outside the ball the value is the explicit OUTSIDE marker (NaN), never a
    silent zero; test with is_outside().
    """
    y = np.asarray(y, dtype=float)
    val = c.a_bar - c.b_bar * np.sum(y * y, axis=-1)
    return np.where(val >= 0.0, val, OUTSIDE)


def rho0_bar(c: BarenblattConstants, gamma, y):
    """Reference density sigma(y)^iota; carries the OUTSIDE marker along."""
    return sigma(c, y) ** c.iota


def sound_speed_slope(c: BarenblattConstants, gamma, t, h=1e-6):
    """One-sided radial slope of the sound speed squared at the boundary.

    The closed form is -2 g b_bar (1+t)^(-1) Rbar(t): finite and negative,
    so the sound speed is C^(1/2) across the interface (physical vacuum).
    Returned value is a one-sided finite difference just inside.
    """
    rad = boundary_radius(c, gamma, t)

    def csq(r):
        ev = _density(c, gamma, t, np.array([r, 0.0, 0.0]))
        return gamma * ev[0] ** (gamma - 1.0)

    # csq is linear in r^2, so the secant at rad-h has O(h) bias only
    return (csq(rad - h) - csq(rad - 2.0 * h)) / h
