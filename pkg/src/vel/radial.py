"""Spherically symmetric free-boundary solver in comoving coordinates.

The displacement ansatz omega(t, y) = f(t, s) y reduces the damped wave
system to a scalar second-order law for the profile f.  The scheme works
in the variable F = s f on a cell-midpoint grid extended oddly through
the center, so even symmetry of f holds by construction and no node sits
at s = 0.  The pressure force is the exact gradient of the discrete
internal energy built on a summation-by-parts derivative pair; together
with the vanishing sigma-weights at the outer rim this supplies the
natural vacuum boundary behavior without an imposed boundary condition,
and the semi-discrete energy balance holds to integrator order.  Time
stepping is explicit RK4 under a CFL cap, with the scaling factor theta
co-integrated by the same integrator; the damping term can optionally be
absorbed exactly with an exponential integrating factor.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linprog

from .geometry import BallGrid, VectorField, deformation
from .norms import Truncation, energy_functionals
from .params import GasParams, derive_constants

STOP_COMPLETED = "completed"
STOP_MONITOR_E = "monitor_E"
STOP_MONITOR_LOG = "monitor_logE"
STOP_DEGENERATE = "degenerate"
STOP_NONFINITE = "nonfinite"


class DegenerateProfileError(RuntimeError):
    """Raised when 1 + f or the radial Jacobian stops being positive."""


# ---------------------------------------------------------------------------
# summation-by-parts operator pair


def _endpoint_extrapolation(x: np.ndarray, target: float, m: int = 5) -> np.ndarray:
    """Lagrange weights extrapolating nodal values at x[:m] to target."""
    w = np.zeros(x.size)
    for i in range(m):
        li = 1.0
        for j in range(m):
            if j != i:
                li *= (target - x[j]) / (x[i] - x[j])
        w[i] = li
    return w


@lru_cache(maxsize=32)
def _build_sbp(n: int, h: float, nb: int = 6, wb: int = 12,
               bdeg: int = 2, qdeg: int = 3):
    """Reflection-symmetric derivative/weight pair on the midpoint grid.

    Returns (D, H, v0, vL) with diagonal H > 0, interior 4th order rows,
    nb boundary rows of width wb, and the exact summation-by-parts
    identity H D + D^T H = -v0 v0^T + vL vL^T where v0, vL extrapolate to
    the two interval ends.  Boundary derivative rows are exact to degree
    bdeg and the weights match moments to degree qdeg.
    """
    if n < 2 * wb:
        raise ValueError(f"need at least {2 * wb} cells, got {n}")
    s = (np.arange(n) + 0.5) * h
    length = n * h
    v0 = _endpoint_extrapolation(s, 0.0)
    vL = _endpoint_extrapolation(s[::-1], length)[::-1]
    E = -np.outer(v0, v0) + np.outer(vL, vL)

    D_int = np.zeros((n, n))
    for q in range(nb, n - nb):
        D_int[q, q - 2:q + 3] = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)

    n_grid = nb * wb
    n_unknown = n_grid + nb
    h_base = n_grid

    def gidx(r, c):
        return r * wb + c

    def gcoef(row, a, c, fac):
        # contribution of (H D)_{a, c}: unknown on the left block, the
        # mirrored negative on the right block, known in the interior
        if a < nb and c < wb:
            row[gidx(a, c)] += fac
            return 0.0
        if a >= n - nb and c >= n - wb:
            row[gidx(n - 1 - a, n - 1 - c)] -= fac
            return 0.0
        if nb <= a < n - nb:
            return fac * h * D_int[a, c]
        raise RuntimeError(f"unreachable stencil entry ({a}, {c})")

    pairs = set()
    for r in range(nb):
        for c in range(wb):
            pairs |= {(r, c), (c, r), (n - 1 - r, n - 1 - c), (n - 1 - c, n - 1 - r)}
    for p in range(nb, n - nb):
        for dq in (-2, -1, 0, 1, 2):
            pairs |= {(p, p + dq), (p + dq, p)}

    rows, rhs = [], []
    for p, q in sorted({(p, q) for (p, q) in pairs if p <= q}):
        row = np.zeros(n_unknown)
        b = E[p, q]
        b -= gcoef(row, p, q, 1.0)
        b -= gcoef(row, q, p, 1.0)
        rows.append(row)
        rhs.append(b)
    for r in range(nb):
        for k in range(bdeg + 1):
            row = np.zeros(n_unknown)
            for c in range(wb):
                row[gidx(r, c)] = s[c] ** k
            row[h_base + r] = -(k * s[r] ** (k - 1) if k else 0.0)
            rows.append(row)
            rhs.append(0.0)
    for k in range(qdeg + 1):
        row = np.zeros(n_unknown)
        b = length ** (k + 1) / (k + 1) - sum(h * s[p] ** k for p in range(nb, n - nb))
        for r in range(nb):
            row[h_base + r] = s[r] ** k + s[n - 1 - r] ** k
        rows.append(row)
        rhs.append(b)

    A = np.array(rows)
    bv = np.array(rhs)
    x0, *_ = np.linalg.lstsq(A, bv, rcond=None)
    _, sv, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int((sv > sv[0] * 1e-11).sum())
    null = Vt[rank:].T
    if null.shape[1]:
        # spend the null space pushing the boundary weights up, capped at
        # 3 h, then re-pin them and solve once more
        h_rows = np.arange(h_base, h_base + nb)
        a_ub = np.hstack([-null[h_rows], np.ones((nb, 1))])
        b_ub = x0[h_rows]
        cost = np.zeros(null.shape[1] + 1)
        cost[-1] = -1.0
        lp = linprog(cost, A_ub=a_ub, b_ub=b_ub,
                     bounds=[(None, None)] * null.shape[1] + [(None, 3.0 * h)],
                     method="highs")
        if not lp.success:
            raise RuntimeError("weight optimization failed")
        x1 = x0 + null @ lp.x[:-1]
        A2 = np.vstack([A, np.eye(n_unknown)[h_rows]])
        b2 = np.concatenate([bv, x1[h_rows]])
        x2, *_ = np.linalg.lstsq(A2, b2, rcond=None)
    else:
        x2 = x0
    if np.abs(A @ x2 - bv).max() > 1e-10:
        raise RuntimeError("derivative pair constraints not satisfied")

    H = np.full(n, h)
    H[:nb] = x2[h_base:h_base + nb]
    H[-nb:] = x2[h_base:h_base + nb][::-1]
    if H.min() <= 0.0:
        raise RuntimeError("quadrature weights must stay positive")
    D = D_int.copy()
    for r in range(nb):
        for c in range(wb):
            D[r, c] = x2[gidx(r, c)] / H[r]
            D[n - 1 - r, n - 1 - c] = -x2[gidx(r, c)] / H[n - 1 - r]
    sbp_defect = np.abs(np.diag(H) @ D + D.T @ np.diag(H) - E).max()
    if sbp_defect > 1e-10:
        raise RuntimeError("summation-by-parts identity violated")
    for arr in (D, H, v0, vL):
        arr.setflags(write=False)
    return D, H, v0, vL


# ---------------------------------------------------------------------------
# state and configuration


@dataclass(frozen=True)
class RadialState:
    """Profile snapshot: omega = f(t, s) y with velocity and theta context.

    The midpoint grid carries no node at s = 0 and the solver evaluates f
    only through its even extension, so even-extendability holds by
    construction.  Positivity of the radial Jacobian is checked by every
    solver operation that differentiates the profile.
    """

    time: float
    f: np.ndarray
    f_t: np.ndarray
    theta: float
    theta_t: float
    theta_tt: float

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        f_t = np.asarray(self.f_t, dtype=float)
        if f.ndim != 1 or f.shape != f_t.shape:
            raise ValueError("profile arrays must be matching 1-d arrays")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(f_t))):
            raise ValueError("profile arrays must be finite")
        if not math.isfinite(self.time):
            raise ValueError("time must be finite")
        if not (self.theta > 0.0 and math.isfinite(self.theta)):
            raise ValueError("theta must be positive and finite")
        if np.any(1.0 + f <= 0.0):
            idx = int(np.argmin(1.0 + f))
            raise DegenerateProfileError(
                f"1 + f nonpositive at node {idx} (value {f[idx]:.6g})")
        f = f.copy()
        f_t = f_t.copy()
        f.setflags(write=False)
        f_t.setflags(write=False)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "f_t", f_t)


FAMILIES = ("poly", "bump")


@dataclass(frozen=True)
class RunConfig:
    """Run parameters for the radial evolution.

    family 'poly' starts from psi(s) = (1 - (s/r0)^2)^q with
    q = family_exponent >= 2; 'bump' from a smooth centered bump.  The
    initial data is f = amplitude psi, f_t = velocity_amplitude psi.
    eps0 is the a-priori monitor threshold: the run halts once the
    truncated total energy exceeds eps0^2, or once
    (ln(1+t))^2 sup E exceeds eps0^2.
    """

    gamma: float
    mass: float = 1.0
    resolution: int = 64
    cfl: float = 0.3
    t_end: float = 100.0
    family: str = "poly"
    family_exponent: int = 2
    amplitude: float = 1e-3
    velocity_amplitude: float = 0.0
    records: int = 120
    record_t_min: float = 1e-2
    eps0: float = 0.1
    J_max: int = 2
    truncation: Truncation = Truncation()
    report_angles: tuple = (8, 8)
    integrating_factor: bool = False

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if not self.mass > 0.0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.resolution < 16:
            raise ValueError(f"resolution must be at least 16, got {self.resolution}")
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not self.t_end > 0.0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family_exponent < 2:
            raise ValueError("family_exponent must be at least 2")
        if self.amplitude < 0.0:
            raise ValueError("amplitude must be nonnegative")
        if self.records < 2:
            raise ValueError("need at least 2 records")
        if not self.eps0 > 0.0:
            raise ValueError("eps0 must be positive")
        if self.J_max < 0:
            raise ValueError("J_max must be nonnegative")


def profile_family(config: RunConfig, s: np.ndarray, r0: float) -> np.ndarray:
    """Initial profile shape psi(s) of the configured family."""
    x = s / r0
    if config.family == "poly":
        return (1.0 - x * x) ** config.family_exponent
    return np.exp(-(((x - 0.4) / 0.15) ** 2))


# ---------------------------------------------------------------------------
# the solver


def _theta_acceleration(gamma: float, th: float, tht: float) -> float:
    return -tht + th ** (2.0 - 3.0 * gamma) / (3.0 * gamma - 1.0)


class RadialSolver:
    """Discrete radial operators for one (gamma, mass, resolution)."""

    def __init__(self, gamma: float, mass: float = 1.0, resolution: int = 64,
                 constants=None):
        if resolution < 16:
            raise ValueError(f"resolution must be at least 16, got {resolution}")
        self.gamma = float(gamma)
        self.constants = constants or derive_constants(
            GasParams(gamma=gamma, mass=mass))
        c = self.constants
        self.n = int(resolution)
        self.h = c.r0 / self.n
        self.s = (np.arange(self.n) + 0.5) * self.h
        self.s_full = np.concatenate([-self.s[::-1], self.s])
        self.D, self.H, self._v0, self._vL = _build_sbp(2 * self.n, self.h)
        sig_full = c.a_bar - c.b_bar * self.s_full**2
        self.sigma = sig_full[self.n:]
        self._sig_full = sig_full
        self.w_u = self.H * 4.0 * np.pi * self.s_full**2 * sig_full ** (c.iota + 1.0)
        self.w_kin = self.H * 4.0 * np.pi * self.s_full**2 * sig_full**c.iota
        self._sound_speed0 = math.sqrt(self.gamma * c.a_bar)
        for arr in (self.s, self.s_full, self.sigma, self.w_u, self.w_kin):
            arr.setflags(write=False)

    # -- representation helpers

    def _expand_odd(self, F: np.ndarray) -> np.ndarray:
        return np.concatenate([-F[::-1], F])

    def _expand_even(self, f: np.ndarray) -> np.ndarray:
        return np.concatenate([f[::-1], f])

    def _fold(self, full: np.ndarray) -> np.ndarray:
        return full[self.n:]

    def boundary_value(self, f: np.ndarray) -> float:
        """Profile value extrapolated to the rim s = r0."""
        return float(np.dot(self._vL[-5:], np.asarray(f)[-5:]))

    # -- discrete energy and its gradient

    def _pq(self, Fe: np.ndarray):
        gp = 1.0 + Fe / self.s_full
        gq = 1.0 + self.D @ Fe
        jac = gp * gp * gq
        if np.any(jac <= 0.0) or np.any(gp <= 0.0):
            bad = np.where((jac <= 0.0) | (gp <= 0.0))[0]
            idx = int(bad[0])
            raise DegenerateProfileError(
                f"jacobian nonpositive at s = {abs(self.s_full[idx]):.6g} "
                f"(full node {idx}, J = {jac[idx]:.3e})")
        return gp, gq, jac

    def internal_energy(self, f: np.ndarray) -> float:
        """sigma^(iota+1)-weighted integral of the bulk term (physical)."""
        Fe = self._expand_odd(self.s * np.asarray(f))
        gp, gq, jac = self._pq(Fe)
        m0 = (np.expm1((1.0 - self.gamma) * np.log(jac)) / (self.gamma - 1.0)
              + 2.0 * (gp - 1.0) + (gq - 1.0))
        return 0.5 * float(np.dot(self.w_u, m0))

    def _force_gradient(self, Fe: np.ndarray) -> np.ndarray:
        # exact gradient of the internal energy with respect to F
        gp, gq, jac = self._pq(Fe)
        jg = jac ** (-self.gamma)
        m0_p = -jg * 2.0 * gp * gq + 2.0
        m0_q = -jg * gp * gp + 1.0
        return self.w_u * m0_p / self.s_full + self.D.T @ (self.w_u * m0_q)

    def _hess_apply(self, Fe: np.ndarray, Ve: np.ndarray) -> np.ndarray:
        # directional derivative of _force_gradient along Ve
        gp, gq, jac = self._pq(Fe)
        jg = jac ** (-self.gamma)
        jg1 = jac ** (-self.gamma - 1.0)
        pv = Ve / self.s_full
        qv = self.D @ Ve
        m0_pp = self.gamma * jg1 * (2.0 * gp * gq) ** 2 - 2.0 * jg * gq
        m0_pq = self.gamma * jg1 * (2.0 * gp * gq) * gp * gp - 2.0 * jg * gp
        m0_qq = self.gamma * jg1 * gp**4
        dmp = m0_pp * pv + m0_pq * qv
        dmq = m0_pq * pv + m0_qq * qv
        return self.w_u * dmp / self.s_full + self.D.T @ (self.w_u * dmq)

    def _accel_F(self, F: np.ndarray, Ft: np.ndarray, th: float,
                 tht: float) -> np.ndarray:
        g = self.gamma
        Fe = self._expand_odd(F)
        grad = self._fold(self._force_gradient(Fe) / self.w_kin)
        thp = th ** (1.0 - 3.0 * g)
        return (-(1.0 + 2.0 * tht / th) * Ft
                - thp * (F / (3.0 * g - 1.0) + grad))

    # -- public operations

    def make_state(self, time: float, f, f_t, theta: float | None = None,
                   theta_t: float | None = None) -> RadialState:
        """Validated state; theta defaults to the self-similar start at t=0."""
        f = np.asarray(f, dtype=float)
        f_t = np.asarray(f_t, dtype=float)
        if f.shape != (self.n,):
            raise ValueError(f"profile must have shape ({self.n},), got {f.shape}")
        if theta is None:
            if time != 0.0:
                raise ValueError("theta context required away from t = 0")
            theta = 1.0
            theta_t = 1.0 / (3.0 * self.gamma - 1.0)
        if theta_t is None:
            raise ValueError("theta_t must accompany theta")
        state = RadialState(
            time=float(time), f=f, f_t=f_t, theta=float(theta),
            theta_t=float(theta_t),
            theta_tt=_theta_acceleration(self.gamma, theta, theta_t),
        )
        self._pq(self._expand_odd(self.s * state.f))
        return state

    def zeroth_energy(self, state: RadialState):
        """(kinetic, potential) entries of the zeroth-order balance.

        kinetic is the sigma^iota weighted squared velocity integral,
        potential the displacement term plus twice the internal energy;
        the total energy is 0.5 (kinetic + theta^(1-3 gamma) potential).
        """
        g = self.gamma
        Fte = self._expand_odd(self.s * state.f_t)
        Fe = self._expand_odd(self.s * state.f)
        # the 0.5 folds the symmetric full-grid sums to the physical ball
        kinetic = 0.5 * float(np.dot(self.w_kin, Fte * Fte))
        i2 = 0.5 * float(np.dot(self.w_kin, Fe * Fe))
        potential = i2 / (3.0 * g - 1.0) + 2.0 * self.internal_energy(state.f)
        return kinetic, potential

    def mass(self, state: RadialState) -> float:
        """Physical mass recomputed through the deformed configuration."""
        c = self.constants
        Fe = self._expand_odd(self.s * state.f)
        _, _, jac = self._pq(Fe)
        scale = state.theta**3
        density = self._sig_full**c.iota / (scale * jac)
        return 0.5 * float(np.dot(self.H * 4.0 * np.pi * self.s_full**2,
                                  density * scale * jac))

    def time_derivatives(self, state: RadialState):
        """(f, f_t, f_tt, f_ttt) with the accelerations from the law."""
        g = self.gamma
        s = self.s
        F = s * state.f
        Ft = s * state.f_t
        th, tht, thtt = state.theta, state.theta_t, state.theta_tt
        Fe = self._expand_odd(F)
        Fte = self._expand_odd(Ft)
        grad = self._fold(self._force_gradient(Fe) / self.w_kin)
        dgrad = self._fold(self._hess_apply(Fe, Fte) / self.w_kin)
        thp = th ** (1.0 - 3.0 * g)
        thp_t = (1.0 - 3.0 * g) * th ** (-3.0 * g) * tht
        damp = 1.0 + 2.0 * tht / th
        damp_t = 2.0 * (thtt * th - tht * tht) / (th * th)
        force = F / (3.0 * g - 1.0) + grad
        Ftt = -damp * Ft - thp * force
        Fttt = (-damp * Ftt - damp_t * Ft - thp_t * force
                - thp * (Ft / (3.0 * g - 1.0) + dgrad))
        return state.f, state.f_t, Ftt / s, Fttt / s

    def step(self, state: RadialState, dt: float,
             integrating_factor: bool = False) -> RadialState:
        """One RK4 step of (f, f_t, theta, theta_t).

        With integrating_factor=True the damping term is absorbed exactly
        into the velocity variable via mu(tau) = e^tau (theta/theta_0)^2
        before the stage evaluations.
        """
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        cs = self._sound_speed0 * state.theta ** ((1.0 - 3.0 * self.gamma) / 2.0)
        if dt > self.h / cs * (1.0 + 1e-12):
            raise ValueError(
                f"dt = {dt:.3e} violates the CFL bound {self.h / cs:.3e}")
        g = self.gamma
        n = self.n
        F = self.s * state.f
        Ft = self.s * state.f_t
        th0 = state.theta

        if integrating_factor:
            def rhs(tau, y):
                F_, G_ = y[:n], y[n:2 * n]
                th, tht = y[2 * n], y[2 * n + 1]
                mu = math.exp(tau) * (th / th0) ** 2
                Fe = self._expand_odd(F_)
                grad = self._fold(self._force_gradient(Fe) / self.w_kin)
                thp = th ** (1.0 - 3.0 * g)
                dG = -mu * thp * (F_ / (3.0 * g - 1.0) + grad)
                return np.concatenate([G_ / mu, dG,
                                       [tht, _theta_acceleration(g, th, tht)]])

            y = np.concatenate([F, Ft, [state.theta, state.theta_t]])
            k1 = rhs(0.0, y)
            k2 = rhs(0.5 * dt, y + 0.5 * dt * k1)
            k3 = rhs(0.5 * dt, y + 0.5 * dt * k2)
            k4 = rhs(dt, y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            th_new = y[2 * n]
            mu_end = math.exp(dt) * (th_new / th0) ** 2
            f_new = y[:n] / self.s
            ft_new = y[n:2 * n] / mu_end / self.s
        else:
            def rhs(y):
                F_, Ft_ = y[:n], y[n:2 * n]
                th, tht = y[2 * n], y[2 * n + 1]
                return np.concatenate([
                    Ft_, self._accel_F(F_, Ft_, th, tht),
                    [tht, _theta_acceleration(g, th, tht)],
                ])

            y = np.concatenate([F, Ft, [state.theta, state.theta_t]])
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * dt * k1)
            k3 = rhs(y + 0.5 * dt * k2)
            k4 = rhs(y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            th_new = y[2 * n]
            f_new = y[:n] / self.s
            ft_new = y[n:2 * n] / self.s

        tht_new = y[2 * n + 1]
        if not (np.all(np.isfinite(y)) and th_new > 0.0):
            raise FloatingPointError("non-finite state after step")
        return RadialState(
            time=state.time + dt, f=f_new, f_t=ft_new, theta=float(th_new),
            theta_t=float(tht_new),
            theta_tt=_theta_acceleration(g, float(th_new), float(tht_new)),
        )

    def balance_series(self, state: RadialState, t_end: float, dt: float):
        """Uniform-dt sampling of the zeroth-balance ingredients.

        Returns (times, kinetic, potential, theta, theta_t) ready for the
        norms-module balance checker; kinetic here is the unhalved
        sigma^iota velocity integral the balance display uses.
        """
        steps = int(round((t_end - state.time) / dt))
        if steps < 4:
            raise ValueError("need at least 4 steps for the balance window")
        rows = []
        cur = state
        for _ in range(steps + 1):
            kin, pot = self.zeroth_energy(cur)
            rows.append((cur.time, kin, pot, cur.theta, cur.theta_t))
            cur = self.step(cur, dt)
        arr = np.array(rows)
        return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4]


def reduce_equation(solver: RadialSolver, state: RadialState) -> np.ndarray:
    """Acceleration profile demanded by the scalar evolution law.

    The residual of a candidate acceleration a is a minus this array.
    Assumes the state's theta context follows the self-similar balance,
    which the solver co-integrates.  Raises DegenerateProfileError with
    the node location if the radial Jacobian is nonpositive.
    """
    F = solver.s * state.f
    Ft = solver.s * state.f_t
    return solver._accel_F(F, Ft, state.theta, state.theta_t) / solver.s


# ---------------------------------------------------------------------------
# 3D oracle for the radial reduction


@dataclass(frozen=True)
class OracleReport:
    """Agreement of the embedded 3D force with the scalar reduction."""

    max_difference: float
    force_scale: float

    @property
    def relative(self) -> float:
        return self.max_difference / max(self.force_scale, 1e-300)


def embedded_flux_divergence(gamma: float, grid: BallGrid, f, fp) -> OracleReport:
    """Embed the radial profile f into a 3D displacement and compare the
    flux-divergence force computed with the full deformation algebra
    against the scalar radial reduction, both differentiated on the same
    grid.  f and fp are callables of the radius.
    """
    if not gamma > 1.0:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    c = grid.constants
    iota = c.iota
    prof = np.asarray(f(grid.s), dtype=float)
    dprof = np.asarray(fp(grid.s), dtype=float)
    omega = VectorField(grid, prof[:, None, None] * grid.y)
    st = deformation(omega)
    jpow = st.jacobian ** (1.0 - gamma)
    sig_w = grid.sigma ** (iota + 1.0)
    eye = np.eye(3)
    div_flux = np.zeros((3, *grid.shape))
    for k in range(3):
        flux_row = sig_w * (st.a_inv[k] * jpow - eye[k][:, None, None, None])
        for i in range(3):
            div_flux[i] += grid.partials(flux_row[i])[k]
    three_d = (grid.sigma**iota * omega.values / (3.0 * gamma - 1.0) + div_flux)

    # scalar reduction with the same radial differentiation
    gp_r = 1.0 + prof
    jac_r = gp_r**2 * (gp_r + grid.s * dprof)
    if np.any(jac_r <= 0.0):
        raise DegenerateProfileError("embedded profile is degenerate")
    j1 = jac_r ** (1.0 - gamma) / gp_r - 1.0
    j2 = -gp_r * dprof * jac_r ** (-gamma) / grid.s
    sig_r = grid.sigma_r ** (iota + 1.0)
    s_full = grid.s[:, None, None] * np.ones(grid.shape)

    def radial_ds(profile_r):
        full = profile_r[:, None, None] * np.ones(grid.shape)
        parts = grid.partials(full)
        return np.einsum("i...,i...->...", grid.y, parts) / s_full

    w1 = sig_r * j1
    w2 = sig_r * j2
    g_scalar = (radial_ds(w1) / s_full + s_full * radial_ds(w2)
                + 4.0 * (w2[:, None, None] * np.ones(grid.shape)))
    reduced = grid.y * (
        grid.sigma**iota * prof[:, None, None] / (3.0 * gamma - 1.0) + g_scalar
    )
    diff = float(np.abs(three_d - reduced).max())
    scale = float(np.abs(three_d).max())
    return OracleReport(max_difference=diff, force_scale=scale)


# ---------------------------------------------------------------------------
# trajectory adapter and run driver


@dataclass(frozen=True)
class _FrozenRadialTrajectory:
    """Energy-module adapter: profiles frozen at one time sample."""

    grid: BallGrid
    t: float
    profiles: tuple

    @property
    def max_time_order(self) -> int:
        return len(self.profiles) - 1

    def time_derivative(self, t: float, order: int) -> VectorField:
        if abs(t - self.t) > 1e-12 * max(1.0, abs(self.t)):
            raise ValueError(f"trajectory frozen at t = {self.t}, asked for {t}")
        if order < 0 or order > self.max_time_order:
            raise ValueError(f"time derivative order {order} not available")
        prof = self.profiles[order]
        return VectorField(self.grid, prof[:, None, None] * self.grid.y)


@dataclass(frozen=True)
class RunResult:
    """Trajectory record of one radial run."""

    config: RunConfig
    times: np.ndarray
    radii: np.ndarray
    reports: tuple
    mass_error: np.ndarray
    sup_energy: float
    stop_reason: str
    stop_time: float
    final_state: RadialState
    boundary_monotone: bool
    steps: int

    def energy_total(self) -> np.ndarray:
        return np.array([r.E_total for r in self.reports])

    def v_add(self) -> np.ndarray:
        return np.array([r.V_add for r in self.reports])


def run(config: RunConfig) -> RunResult:
    """Evolve the configured initial data, recording energy reports and
    the boundary radius at geometric cadence, and enforcing the a-priori
    energy monitors.  Returns a result with a labeled stop reason."""
    solver = RadialSolver(config.gamma, config.mass, config.resolution)
    grid = BallGrid(solver.constants, n_r=config.resolution,
                    n_mu=config.report_angles[0], n_psi=config.report_angles[1],
                    radial_scheme="midpoint")
    psi = profile_family(config, solver.s, solver.constants.r0)
    state = solver.make_state(0.0, config.amplitude * psi,
                              config.velocity_amplitude * psi)

    rec_times = np.geomspace(min(config.record_t_min, config.t_end / config.records),
                             config.t_end, config.records)
    times, radii, reports, mass_err = [], [], [], []
    sup_energy = 0.0
    stop_reason = None
    total_mass = config.mass

    def record(st: RadialState):
        nonlocal sup_energy
        profiles = solver.time_derivatives(st)
        traj = _FrozenRadialTrajectory(grid, st.time, profiles)
        rep = energy_functionals(traj, st.time, config.gamma,
                                 J_max=config.J_max,
                                 truncation=config.truncation)
        radius = st.theta * (1.0 + solver.boundary_value(st.f)) * solver.constants.r0
        times.append(st.time)
        radii.append(radius)
        reports.append(rep)
        mass_err.append(abs(solver.mass(st) - total_mass) / total_mass)
        sup_energy = max(sup_energy, rep.E_total)
        if rep.E_total > config.eps0**2:
            return STOP_MONITOR_E
        if math.log1p(st.time) ** 2 * sup_energy > config.eps0**2:
            return STOP_MONITOR_LOG
        return None

    stop_reason = record(state)
    next_rec = 0
    steps = 0
    while stop_reason is None:
        if state.time >= config.t_end - 1e-12 * config.t_end:
            stop_reason = STOP_COMPLETED
            break
        while next_rec < rec_times.size and rec_times[next_rec] <= state.time + 1e-15:
            next_rec += 1
        target = rec_times[next_rec] if next_rec < rec_times.size else config.t_end
        target = min(target, config.t_end)
        cs = solver._sound_speed0 * state.theta ** ((1.0 - 3.0 * config.gamma) / 2.0)
        dt = min(config.cfl * solver.h / cs, target - state.time)
        try:
            new_state = solver.step(state, dt,
                                    integrating_factor=config.integrating_factor)
        except DegenerateProfileError:
            stop_reason = STOP_DEGENERATE
            break
        except FloatingPointError:
            stop_reason = STOP_NONFINITE
            break
        state = new_state
        steps += 1
        if state.time >= target - 1e-15 and target < config.t_end:
            stop_reason = record(state)
        elif state.time >= config.t_end - 1e-12 * config.t_end:
            stop_reason = record(state) or STOP_COMPLETED

    t_arr = np.array(times)
    r_arr = np.array(radii)
    monotone = bool(np.all(np.diff(r_arr) >= -1e-12 * max(r_arr.max(), 1.0))) \
        if r_arr.size > 1 else True
    return RunResult(
        config=config, times=t_arr, radii=r_arr, reports=tuple(reports),
        mass_error=np.array(mass_err), sup_energy=float(sup_energy),
        stop_reason=stop_reason, stop_time=float(state.time),
        final_state=state, boundary_monotone=monotone, steps=steps,
    )


# ---------------------------------------------------------------------------
# growth-rate fit and serialization


@dataclass(frozen=True)
class GrowthFit:
    """Least-squares boundary growth exponent over the final decade."""

    exponent: float
    stderr: float
    window: tuple
    n_points: int


def fit_growth(times, radii, window_decades: float = 1.0) -> GrowthFit:
    """Slope of log R against log(1+t) over the trailing window.

    The series must span at least one decade in 1+t; the window keeps
    the samples with 1+t within window_decades decades of the end.
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(radii, dtype=float)
    if t.size != r.size or t.size < 3:
        raise ValueError("need matching series with at least 3 samples")
    if np.any(r <= 0.0):
        raise ValueError("radii must be positive")
    span = (1.0 + t.max()) / (1.0 + t.min())
    if span < 10.0:
        raise ValueError(
            f"series spans {span:.2f}x in 1+t, need at least a decade")
    cut = (1.0 + t.max()) / 10.0**window_decades
    mask = 1.0 + t >= cut
    if mask.sum() < 3:
        raise ValueError("fewer than 3 samples in the fit window")
    x = np.log(1.0 + t[mask])
    y = np.log(r[mask])
    A = np.vstack([x, np.ones_like(x)]).T
    coef, residual, *_ = np.linalg.lstsq(A, y, rcond=None)
    m = int(mask.sum())
    if m > 2 and residual.size:
        var = residual[0] / (m - 2)
        cov00 = var * np.linalg.inv(A.T @ A)[0, 0]
        stderr = float(np.sqrt(cov00))
    else:
        stderr = 0.0
    return GrowthFit(exponent=float(coef[0]), stderr=stderr,
                     window=(float(cut - 1.0), float(t.max())), n_points=m)


def result_to_csv(result: RunResult, dest) -> None:
    """One row per record: t, R, the retained energies, the additional
    curl norm, and the stop reason."""
    j_max = result.config.J_max
    cols = ["t", "R"] + [f"E_{j}" for j in range(j_max + 1)] + ["V_add",
                                                                "stop_reason"]
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        fh.write(",".join(cols) + "\n")
        for t, radius, rep in zip(result.times, result.radii, result.reports):
            row = [repr(float(t)), repr(float(radius))]
            row += [repr(float(e)) for e in rep.E_j]
            row.append(repr(float(rep.V_add)))
            row.append(result.stop_reason)
            fh.write(",".join(row) + "\n")
    finally:
        if own:
            fh.close()
