"""Time scaling paths for the expanding-gas background.

Two related objects live here. First, the inflation factor theta(t) = nu + h,
where nu(t) = (1 + t)^{1/(3*gamma - 1)} is the self-similar power and h solves
a damped second-order correction law with h(0) = h_t(0) = 0; `integrate_h`
produces the path and `verify_decay` checks the two-sided power-law bounds on
theta and its derivatives. Second, the exact-solution coefficient system for
(a, b, e)(t), quadratic velocity/sound-speed profiles whose evolution reduces
to three coupled ODEs; `liu_rhs` evaluates the derived system, and
`liu_vs_barenblatt` measures its approach to the self-similar coefficients.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .params import BarenblattConstants, GasParams, derive_constants, moment_integral

__all__ = [
    "ThetaPath",
    "DecayReport",
    "LiuState",
    "LiuReport",
    "nu",
    "integrate_h",
    "verify_decay",
    "theta_derivative",
    "liu_rhs",
    "liu_mass",
    "barenblatt_path",
    "liu_integrate",
    "liu_vs_barenblatt",
    "write_csv",
]

# Margin below which a constant-1 bound still counts as holding (rounding slack).
BOUND_SLACK = 1e-10


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ThetaPath:
    """Sampled correction path on a monotone time grid.

    theta = nu + h pointwise; theta_tt is evaluated from the evolution law,
    not by differencing the samples. err_est is the integrator's accuracy
    scale at the final time (rtol * |theta| + atol).
    """

    gamma: float
    times: np.ndarray
    h: np.ndarray
    h_t: np.ndarray
    theta: np.ndarray
    theta_t: np.ndarray
    theta_tt: np.ndarray
    err_est: float

    def __post_init__(self) -> None:
        if not self.gamma > 1.0:
            raise ValueError("gamma must exceed 1")
        series = ("times", "h", "h_t", "theta", "theta_t", "theta_tt")
        n = None
        for name in series:
            arr = _as_readonly(getattr(self, name))
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or (n is not None and arr.size != n):
                raise ValueError("path series must be 1-d and equal length")
            n = arr.size
        if n < 2:
            raise ValueError("path needs at least two samples")
        if not np.all(np.diff(self.times) > 0.0) or self.times[0] != 0.0:
            raise ValueError("times must increase strictly from 0")
        if abs(self.h[0]) > 1e-12 or abs(self.h_t[0]) > 1e-12:
            raise ValueError("h and h_t must vanish at t = 0")


@dataclass(frozen=True)
class DecayReport:
    """Fitted decay constants and signed violations of the constant-1 bounds.

    max_violation maps bound name to its worst violation (positive = broken):
    'lower' is max(nu - theta), 'monotone' is max(-theta_t). K_fit is the
    smallest admissible upper-bound constant, Cn_fit[k] the smallest C with
    |d^k theta/dt^k| <= C (1+t)^{1/(3*gamma-1) - k}.
    """

    gamma: float
    K_fit: float
    Cn_fit: dict[int, float]
    max_violation: dict[str, float]
    passed: bool


@dataclass(frozen=True)
class LiuState:
    """Coefficients of the quadratic exact-solution ansatz.

    Velocity a(t)*y and squared sound speed e(t) - b(t)*|y|^2; b and e stay
    positive along admissible trajectories.
    """

    a: float
    b: float
    e: float

    def __post_init__(self) -> None:
        for name in ("a", "b", "e"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not (self.b > 0.0 and self.e > 0.0):
            raise ValueError("b and e must be positive")


@dataclass(frozen=True)
class LiuReport:
    """Deviation of the coefficient system from the self-similar path.

    deviation is max over the three components of |delta| (1+t)/log(2+t);
    slope is the log-log growth rate of that series over the last decade of
    time (non-positive up to slack means bounded), bound_fit its maximum over
    the same window, mass_drift the relative drift of the conserved mass.
    """

    gamma: float
    times: np.ndarray
    deviation: np.ndarray
    slope: float
    bound_fit: float
    mass_drift: float
    passed: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "times", _as_readonly(self.times))
        object.__setattr__(self, "deviation", _as_readonly(self.deviation))


def nu(gamma: float, t, order: int = 0):
    """Background power (1+t)^p with p = 1/(3*gamma - 1), or its derivative."""
    if not gamma > 1.0:
        raise ValueError("gamma must exceed 1")
    if order < 0:
        raise ValueError("order must be non-negative")
    ts = np.asarray(t, dtype=float)
    if np.any(ts < 0.0):
        raise ValueError("t must be non-negative")
    p = 1.0 / (3.0 * gamma - 1.0)
    coef = float(np.prod(p - np.arange(order)))
    out = coef * np.power(1.0 + ts, p - order)
    return float(out) if ts.ndim == 0 else out


def _default_forcing(gamma: float) -> Callable[[float], float]:
    c = 1.0 / (3.0 * gamma - 1.0)
    q = 2.0 - 3.0 * gamma

    def forcing(t: float) -> float:
        return c * nu(gamma, t) ** q - nu(gamma, t, 2) - nu(gamma, t, 1)

    return forcing


def integrate_h(
    gamma: float,
    t_end: float,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    num_samples: int = 2001,
    forcing: Callable[[float], float] | None = None,
) -> ThetaPath:
    """Integrate the correction law from rest and sample on a log grid.

    The law is written in the split form
        h_tt = -h_t + c [(nu+h)^{2-3g} - nu^{2-3g}] + F(t),
    with c = 1/(3g-1) and default forcing F = c nu^{2-3g} - nu_tt - nu_t,
    which reassembles theta_tt + theta_t = c theta^{2-3g} for theta = nu + h.
    Overriding F with zero must reproduce h == 0 (integrator sanity).
    """
    if not t_end > 0.0:
        raise ValueError("t_end must be positive")
    if num_samples < 2:
        raise ValueError("need at least two samples")
    c = 1.0 / (3.0 * gamma - 1.0)
    q = 2.0 - 3.0 * gamma
    force = _default_forcing(gamma) if forcing is None else forcing

    def rhs(t: float, y: np.ndarray):
        h, h_t = y
        base = nu(gamma, t)
        lifted = base + h
        # positivity enforced by the terminal event; clip only guards the power
        lifted = lifted if lifted > 0.0 else np.nan
        h_tt = -h_t + c * (lifted**q - base**q) + force(t)
        return (h_t, h_tt)

    def hit_zero(t: float, y: np.ndarray) -> float:
        return nu(gamma, t) + y[0]

    hit_zero.terminal = True  # type: ignore[attr-defined]
    hit_zero.direction = -1  # type: ignore[attr-defined]

    sol = solve_ivp(
        rhs,
        (0.0, float(t_end)),
        (0.0, 0.0),
        method="RK45",
        rtol=rtol,
        atol=atol,
        dense_output=True,
        events=hit_zero,
    )
    if sol.status == 1:
        t_hit = float(sol.t_events[0][0])
        raise RuntimeError(f"theta reached zero at t = {t_hit:.6g}")
    if sol.status != 0:
        raise RuntimeError(f"integration failed: {sol.message}")

    times = np.geomspace(1.0, 1.0 + float(t_end), num_samples) - 1.0
    times[0] = 0.0
    times[-1] = float(t_end)
    h, h_t = sol.sol(times)
    base = nu(gamma, times)
    theta = base + h
    if np.any(~np.isfinite(theta)) or np.any(theta <= 0.0):
        raise RuntimeError("theta left the positive cone on the sample grid")
    theta_t = nu(gamma, times, 1) + h_t
    forced = np.array([force(t) for t in times])
    h_tt = -h_t + c * (theta**q - base**q) + forced
    theta_tt = nu(gamma, times, 2) + h_tt
    err_est = rtol * float(np.max(np.abs(theta))) + atol
    return ThetaPath(
        gamma=gamma,
        times=times,
        h=h,
        h_t=h_t,
        theta=theta,
        theta_t=theta_t,
        theta_tt=theta_tt,
        err_est=err_est,
    )


def theta_derivative(path: ThetaPath, order: int) -> np.ndarray:
    """d^k theta / dt^k on the path grid, by substituting the evolution law.

    Orders 0..3 are supported; substitution avoids differencing noise. Order 3
    differentiates theta_tt = -theta_t + c theta^{2-3g} once more.
    """
    g = path.gamma
    c = 1.0 / (3.0 * g - 1.0)
    q = 2.0 - 3.0 * g
    if order == 0:
        return np.asarray(path.theta)
    if order == 1:
        return np.asarray(path.theta_t)
    if order == 2:
        return -path.theta_t + c * path.theta**q
    if order == 3:
        theta_tt = -path.theta_t + c * path.theta**q
        return -theta_tt + c * q * path.theta ** (q - 1.0) * path.theta_t
    raise ValueError("derivative order above 3 is not supported")


def verify_decay(path: ThetaPath, n: int = 2) -> DecayReport:
    """Fit the decay constants and check the constant-1 bounds on a path."""
    if n < 0 or n > 3:
        raise ValueError("n must be between 0 and 3")
    g = path.gamma
    p = 1.0 / (3.0 * g - 1.0)
    base = np.power(1.0 + path.times, p)
    lower_violation = float(np.max(base - path.theta))
    monotone_violation = float(np.max(-path.theta_t))
    K_fit = float(np.max(path.theta / base))
    Cn_fit: dict[int, float] = {}
    for k in range(1, n + 1):
        dk = theta_derivative(path, k)
        Cn_fit[k] = float(np.max(np.abs(dk) * np.power(1.0 + path.times, k - p)))
    violations = {"lower": lower_violation, "monotone": monotone_violation}
    fits_finite = np.isfinite(K_fit) and all(np.isfinite(v) for v in Cn_fit.values())
    passed = (
        lower_violation <= BOUND_SLACK
        and monotone_violation <= BOUND_SLACK
        and bool(fits_finite)
    )
    return DecayReport(
        gamma=g,
        K_fit=K_fit,
        Cn_fit=Cn_fit,
        max_violation=violations,
        passed=passed,
    )


def liu_rhs(gamma: float, state: LiuState) -> tuple[float, float, float]:
    """Time derivatives (a_t, b_t, e_t) of the coefficient system.

    Derived by substituting velocity a*y and squared sound speed e - b*|y|^2
    into the damped isentropic flow equations and matching powers of |y|:
        a_t = -a - a^2 + 2 b/(gamma-1),
        b_t = -(3*gamma - 1) a b,
        e_t = -3 (gamma-1) a e.
    """
    if not gamma > 1.0:
        raise ValueError("gamma must exceed 1")
    a, b, e = state.a, state.b, state.e
    a_t = -a - a * a + 2.0 * b / (gamma - 1.0)
    b_t = -(3.0 * gamma - 1.0) * a * b
    e_t = -3.0 * (gamma - 1.0) * a * e
    return (a_t, b_t, e_t)


def liu_mass(gamma: float, b, e) -> np.ndarray | float:
    """Conserved total mass of the quadratic ansatz with coefficients (b, e)."""
    iota = 1.0 / (gamma - 1.0)
    mom = moment_integral(iota)
    b = np.asarray(b, dtype=float)
    e = np.asarray(e, dtype=float)
    out = 4.0 * np.pi * gamma ** (-iota) * e ** (iota + 1.5) * b**-1.5 * mom
    return float(out) if out.ndim == 0 else out


def barenblatt_path(
    gamma: float, constants: BarenblattConstants, t
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Self-similar coefficient path (a, b, e)(t) for the given constants."""
    ts = np.asarray(t, dtype=float)
    a = 1.0 / ((3.0 * gamma - 1.0) * (1.0 + ts))
    b = gamma * constants.b_bar / (1.0 + ts)
    e = gamma * constants.a_bar * np.power(
        1.0 + ts, -3.0 * (gamma - 1.0) / (3.0 * gamma - 1.0)
    )
    return a, b, e


def liu_integrate(
    gamma: float,
    initial: LiuState,
    t_end: float,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    num_samples: int = 1001,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Integrate the coefficient system; returns (times, a, b, e) samples."""
    if not t_end > 0.0:
        raise ValueError("t_end must be positive")

    def rhs(t: float, y: np.ndarray):
        a, b, e = y
        return (
            -a - a * a + 2.0 * b / (gamma - 1.0),
            -(3.0 * gamma - 1.0) * a * b,
            -3.0 * (gamma - 1.0) * a * e,
        )

    times = np.geomspace(1.0, 1.0 + float(t_end), num_samples) - 1.0
    times[0] = 0.0
    times[-1] = float(t_end)
    sol = solve_ivp(
        rhs,
        (0.0, float(t_end)),
        (initial.a, initial.b, initial.e),
        method="RK45",
        rtol=rtol,
        atol=atol,
        t_eval=times,
    )
    if sol.status != 0:
        raise RuntimeError(f"integration failed: {sol.message}")
    a, b, e = sol.y
    if np.any(b <= 0.0) or np.any(e <= 0.0):
        raise RuntimeError("trajectory left the admissible cone b, e > 0")
    return times, a, b, e


def liu_vs_barenblatt(
    gamma: float,
    mass: float,
    t_end: float,
    initial: LiuState | None = None,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    num_samples: int = 1001,
    slope_slack: float = 0.05,
) -> LiuReport:
    """Compare an integrated coefficient trajectory to the self-similar path.

    The deviation series max_i |delta_i(t)| (1+t)/log(2+t) must show no growth
    trend over the last decade of time; its log-log slope there at or below
    slope_slack passes. Default initial data sits on the self-similar path at
    t = 0 for the requested mass.
    """
    constants = derive_constants(GasParams(gamma=gamma, mass=mass))
    if initial is None:
        a0, b0, e0 = barenblatt_path(gamma, constants, 0.0)
        initial = LiuState(a=float(a0), b=float(b0), e=float(e0))
    times, a, b, e = liu_integrate(
        gamma, initial, t_end, rtol=rtol, atol=atol, num_samples=num_samples
    )
    ab, bb, eb = barenblatt_path(gamma, constants, times)
    delta = np.max(
        np.abs(np.stack([a - ab, b - bb, e - eb], axis=0)), axis=0
    )
    deviation = delta * (1.0 + times) / np.log(2.0 + times)

    window = times >= times[-1] / 10.0
    dev_win = deviation[window]
    t_win = times[window]
    positive = dev_win > 0.0
    if np.count_nonzero(positive) >= 2:
        slope = float(
            np.polyfit(np.log(1.0 + t_win[positive]), np.log(dev_win[positive]), 1)[0]
        )
    else:
        slope = 0.0
    bound_fit = float(np.max(dev_win))

    masses = liu_mass(gamma, b, e)
    mass_drift = float(np.max(np.abs(masses - masses[0])) / abs(masses[0]))
    passed = bool(np.all(np.isfinite(deviation))) and slope <= slope_slack
    return LiuReport(
        gamma=gamma,
        times=times,
        deviation=deviation,
        slope=slope,
        bound_fit=bound_fit,
        mass_drift=mass_drift,
        passed=passed,
    )


def write_csv(path: ThetaPath, dest) -> None:
    """Write the path as CSV with columns t, h, h_t, theta, theta_t, theta_tt."""
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        fh.write("t,h,h_t,theta,theta_t,theta_tt\n")
        cols = (path.times, path.h, path.h_t, path.theta, path.theta_t, path.theta_tt)
        for row in zip(*cols):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    finally:
        if own:
            fh.close()


def _csv_text(path: ThetaPath) -> str:
    buf = io.StringIO()
    write_csv(path, buf)
    return buf.getvalue()
