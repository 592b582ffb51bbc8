"""Discrete Lagrangian field calculus on the reference ball.

The grid is tensor-product: radial nodes strictly inside (0, r0) (Gauss nodes
by default, midpoint cells with 4th-order differences as an option), Gauss
nodes in mu = cos(phi), uniform nodes in the azimuth psi. Scalar and vector
fields live on the nodes; the module provides Cartesian gradients, angular
derivatives, the deformation quantities of a displacement field (gradient,
adjugate, Jacobian, inverse transpose contractions), flow-map differential
operators, and numerical verification of the algebraic identities that the
energy estimates lean on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import BarenblattConstants

__all__ = [
    "REGIME_THRESHOLD",
    "DegenerateDeformationError",
    "BallGrid",
    "ScalarField",
    "VectorField",
    "DeformationState",
    "CommutatorReport",
    "gradient",
    "spatial_derivative",
    "angular_derivative",
    "deformation",
    "flow_ops",
    "piola_residual",
    "identity_nabt_nab",
    "commutator_defect",
    "save_field",
    "load_field",
    "field_to_csv",
]

# Frobenius size of the displacement gradient below which the small-strain
# bounds (Jacobian pinned in [1/2, 2], gradient equivalences) are claimed.
REGIME_THRESHOLD = 0.1

_EPS = np.zeros((3, 3, 3))
_EPS[0, 1, 2] = _EPS[1, 2, 0] = _EPS[2, 0, 1] = 1.0
_EPS[0, 2, 1] = _EPS[2, 1, 0] = _EPS[1, 0, 2] = -1.0

_MAGIC = b"VELF"
_VERSION = 1


class DegenerateDeformationError(RuntimeError):
    """Raised when a displacement field folds the ball (J <= 0 somewhere)."""


def _barycentric_diffmat(x: np.ndarray) -> np.ndarray:
    """Collocation first-derivative matrix on arbitrary distinct nodes."""
    n = len(x)
    span = x[:, None] - x[None, :]
    np.fill_diagonal(span, 1.0)
    logw = -np.sum(np.log(np.abs(span)), axis=1)
    sign = np.prod(np.sign(span), axis=1)
    w = sign * np.exp(logw - logw.max())
    D = (w[None, :] / w[:, None]) / span
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def _one_sided_rows(n: int, h: float) -> np.ndarray:
    """Boundary closure for the midpoint scheme: 5-node interpolatory rows."""
    rows = np.zeros((2, 5))
    idx = np.arange(n - 5, n)
    x = (idx + 0.5) * h
    for pos, q in enumerate((n - 2, n - 1)):
        xq = (q + 0.5) * h
        V = np.vander(x - xq, 5, increasing=True).T
        rhs = np.zeros(5)
        rhs[1] = 1.0
        rows[pos] = np.linalg.solve(V, rhs)
    return rows


def _gregory_midpoint_weights(n: int, h: float) -> np.ndarray:
    """Midpoint-rule weights with end corrections matching moments 0..4."""
    w = np.full(n, h)
    m = 5
    s = (np.arange(n) + 0.5) * h
    length = n * h
    A = np.zeros((5, 2 * m))
    rhs = np.zeros(5)
    for k in range(5):
        rhs[k] = length ** (k + 1) / (k + 1) - np.dot(w, s**k)
        A[k, :m] = s[:m] ** k
        A[k, m:] = s[-m:] ** k
    delta = np.linalg.lstsq(A, rhs, rcond=None)[0]
    w[:m] += delta[:m]
    w[-m:] += delta[m:]
    return w


class BallGrid:
    """Tensor-product node set on the ball of radius r0 with quadrature.

    radial_scheme 'gauss' places Gauss-Legendre nodes in radius and
    differentiates by global collocation; 'midpoint' places cell midpoints
    and differentiates with 4th-order finite differences, closing the center
    end with antipodal ghost values and the outer end with one-sided rows.
    Angular derivatives are collocation in mu and Fourier in psi either way.
    All nodes stay strictly inside (0, r0), so sigma > 0 and s > 0 everywhere.
    """

    def __init__(
        self,
        constants: BarenblattConstants,
        n_r: int = 16,
        n_mu: int = 12,
        n_psi: int = 16,
        radial_scheme: str = "gauss",
    ) -> None:
        if radial_scheme not in ("gauss", "midpoint"):
            raise ValueError("radial_scheme must be 'gauss' or 'midpoint'")
        min_r = 4 if radial_scheme == "gauss" else 8
        if n_r < min_r or n_mu < 4 or n_psi < 4 or n_psi % 2:
            raise ValueError(
                "grid too coarse for the differentiation stencils: need "
                f"n_r >= {min_r}, n_mu >= 4, n_psi >= 4 and even"
            )
        self.constants = constants
        self.scheme = radial_scheme
        self.r0 = constants.r0
        if radial_scheme == "gauss":
            xr, wr = np.polynomial.legendre.leggauss(n_r)
            self.s = 0.5 * self.r0 * (xr + 1.0)
            self.w_s = 0.5 * self.r0 * wr
            self._Ds = _barycentric_diffmat(self.s)
            self._h = None
            self._side_rows = None
        else:
            h = self.r0 / n_r
            self.s = (np.arange(n_r) + 0.5) * h
            self.w_s = _gregory_midpoint_weights(n_r, h)
            self._Ds = None
            self._h = h
            self._side_rows = _one_sided_rows(n_r, h)

        xm, wm = np.polynomial.legendre.leggauss(n_mu)
        self.mu, self.w_mu = xm, wm
        self._Dmu = _barycentric_diffmat(self.mu)
        self.psi = 2.0 * np.pi * np.arange(n_psi) / n_psi
        self.w_psi = 2.0 * np.pi / n_psi
        self.shape = (n_r, n_mu, n_psi)

        sphi = np.sqrt(1.0 - self.mu**2)
        self._sphi = sphi
        cpsi, spsi = np.cos(self.psi), np.sin(self.psi)
        ones_psi = np.ones(n_psi)
        self._yhat = np.array(
            [np.outer(sphi, cpsi), np.outer(sphi, spsi), np.outer(self.mu, ones_psi)]
        )
        self._that_phi = np.array(
            [np.outer(self.mu, cpsi), np.outer(self.mu, spsi), np.outer(-sphi, ones_psi)]
        )
        self._that_psi = np.array(
            [np.outer(np.ones(n_mu), -spsi), np.outer(np.ones(n_mu), cpsi),
             np.zeros((n_mu, n_psi))]
        )
        self.y = self.s[:, None, None] * self._yhat[:, None, :, :]
        self._modes = np.fft.rfftfreq(n_psi, d=1.0 / n_psi)

        sigma_r = constants.a_bar - constants.b_bar * self.s**2
        self.sigma_r = sigma_r
        self.sigma = np.broadcast_to(
            sigma_r[:, None, None], self.shape
        ).copy()
        if np.any(sigma_r <= 0.0) or np.any(self.s <= 0.0):
            raise RuntimeError("grid nodes touched s = 0 or sigma = 0")

        self.weights = (
            (self.w_s * self.s**2)[:, None, None]
            * self.w_mu[None, :, None]
            * self.w_psi
        ) * np.ones((1, 1, n_psi))
        if np.any(self.weights <= 0.0):
            raise RuntimeError("quadrature weights must be positive")
        volume = 4.0 / 3.0 * np.pi * self.r0**3
        if abs(self.weights.sum() - volume) > 1e-10 * volume:
            raise RuntimeError("quadrature weights do not sum to the ball volume")

        for name in ("s", "w_s", "mu", "w_mu", "psi", "y", "sigma_r", "sigma",
                     "weights"):
            getattr(self, name).setflags(write=False)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.shape))

    def integrate(self, values: np.ndarray) -> float:
        """Volume integral of per-node values."""
        if values.shape != self.shape:
            raise ValueError("values do not conform to the grid")
        return float(np.sum(self.weights * values))

    def _antipode(self, vals: np.ndarray) -> np.ndarray:
        # value at the antipodal node: mu -> -mu (Gauss nodes are symmetric),
        # psi -> psi + pi (half-period roll along the uniform circle)
        return np.roll(vals[..., ::-1, :], -(self.shape[2] // 2), axis=-1)

    def _ds(self, vals: np.ndarray) -> np.ndarray:
        n_r = self.shape[0]
        if self.scheme == "gauss":
            return (self._Ds @ vals.reshape(n_r, -1)).reshape(vals.shape)
        h = self._h
        ext = np.concatenate(
            [self._antipode(vals[1])[None], self._antipode(vals[0])[None], vals],
            axis=0,
        )
        out = np.empty_like(vals)
        out[: n_r - 2] = (
            ext[0:n_r - 2] - 8.0 * ext[1:n_r - 1] + 8.0 * ext[3:n_r + 1]
            - ext[4:n_r + 2]
        ) / (12.0 * h)
        for pos, q in enumerate((n_r - 2, n_r - 1)):
            out[q] = np.tensordot(self._side_rows[pos], vals[n_r - 5:], axes=(0, 0))
        return out

    def _dpsi(self, vals: np.ndarray) -> np.ndarray:
        F = np.fft.rfft(vals, axis=-1)
        return np.fft.irfft(1j * self._modes * F, n=self.shape[2], axis=-1)

    def _dphi(self, vals: np.ndarray) -> np.ndarray:
        # per azimuthal mode, even modes are polynomials in mu while odd modes
        # carry one factor of sin(phi); differentiate each shape exactly
        F = np.fft.rfft(vals, axis=-1)
        even = self._modes.astype(int) % 2 == 0
        out = np.empty_like(F)
        mu = self.mu[:, None]
        sphi = self._sphi[:, None]
        Fe = F[..., :, even]
        out[..., :, even] = -sphi * np.einsum(
            "ij,...jm->...im", self._Dmu, Fe, optimize=True
        )
        Fo = F[..., :, ~even]
        P = Fo / sphi
        out[..., :, ~even] = mu * P - (1.0 - mu**2) * np.einsum(
            "ij,...jm->...im", self._Dmu, P, optimize=True
        )
        return np.fft.irfft(out, n=self.shape[2], axis=-1)

    def partials(self, vals: np.ndarray) -> np.ndarray:
        """Cartesian partial derivatives of scalar node values, shape (3, *grid)."""
        if vals.shape != self.shape:
            raise ValueError("values do not conform to the grid")
        fs = self._ds(vals)
        fphi = self._dphi(vals)
        fpsi = self._dpsi(vals)
        s = self.s[:, None, None]
        inv_s_sphi = 1.0 / (s * self._sphi[None, :, None])
        return (
            self._yhat[:, None] * fs[None]
            + self._that_phi[:, None] * (fphi / s)[None]
            + self._that_psi[:, None] * (fpsi * inv_s_sphi)[None]
        )


def _conforming(values: np.ndarray, grid: BallGrid, ncomp: int | None) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    want = grid.shape if ncomp is None else (ncomp,) + grid.shape
    if arr.shape != want:
        raise ValueError(f"field values must have shape {want}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: BallGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _conforming(self.values, self.grid, None))

    @classmethod
    def sample(cls, grid: BallGrid, fn) -> "ScalarField":
        return cls(grid, np.asarray(fn(grid.y), dtype=float))


@dataclass(frozen=True)
class VectorField:
    grid: BallGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _conforming(self.values, self.grid, 3))

    @classmethod
    def sample(cls, grid: BallGrid, fn) -> "VectorField":
        return cls(grid, np.asarray(fn(grid.y), dtype=float))


@dataclass(frozen=True)
class DeformationState:
    """Deformation quantities of a displacement field omega.

    grad_omega[i, j] = d_j omega^i; adjugate is the adjugate of grad_omega
    (rows are pairwise cross products of the d_j omega columns); jacobian is
    det(Id + grad_omega); a_inv[k, i] is the inverse matrix (Id + grad_omega)
    ^{-1} entering flow-map derivatives as sum_k a_inv[k, i] d_k. in_regime
    flags nodes whose |grad_omega| stays at or below REGIME_THRESHOLD. The
    three defects record the construction self-checks: the determinant
    against its adjugate-based reconstruction, the quartic determinant
    expansion, and max |(Id + grad_omega) a_inv - Id| over nodes with J >=
    1/2.
    """

    omega: VectorField
    grad_omega: np.ndarray
    adjugate: np.ndarray
    jacobian: np.ndarray
    a_inv: np.ndarray
    in_regime: np.ndarray
    det_defect: float
    expansion_defect: float
    inverse_defect: float

    @property
    def grid(self) -> BallGrid:
        return self.omega.grid

    @property
    def regime_ok(self) -> bool:
        return bool(np.all(self.in_regime))


@dataclass(frozen=True)
class CommutatorReport:
    """Pointwise bound check for the mixed-derivative commutator.

    C_fit is the smallest constant with |[dbar^beta, d^alpha] f| <= C *
    (sum of |d^{|alpha|} dbar^j f| over j < |beta|) at every node where the
    majorant is nonzero; ceiling, when given, turns the fit into a pass/fail.
    """

    alpha: tuple[int, int, int]
    beta: tuple[int, int, int]
    max_commutator: float
    C_fit: float
    ceiling: float | None
    passed: bool


def _field_partials(field) -> np.ndarray:
    grid = field.grid
    if isinstance(field, ScalarField):
        return grid.partials(field.values)
    return np.stack([grid.partials(field.values[i]) for i in range(3)])


def gradient(field) -> np.ndarray:
    """Per-node derivative tensor: (3, *grid) for scalars with entry k equal
    to d_k f, or (3, 3, *grid) for vectors with entry [i, j] = d_j F^i."""
    return _field_partials(field)


def spatial_derivative(field, axis: int):
    """Single Cartesian partial d_axis applied to a field, same field type."""
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1, or 2")
    grid = field.grid
    if isinstance(field, ScalarField):
        return ScalarField(grid, grid.partials(field.values)[axis])
    return VectorField(
        grid, np.stack([grid.partials(field.values[i])[axis] for i in range(3)])
    )


def angular_derivative(field, direction: int):
    """Angular derivative dbar_i f = eps^{ijk} y_j d_k f, same field type."""
    if direction not in (0, 1, 2):
        raise ValueError("direction must be 0, 1, or 2")
    grid = field.grid
    y = grid.y
    j, k = (direction + 1) % 3, (direction + 2) % 3

    def apply(vals: np.ndarray) -> np.ndarray:
        parts = grid.partials(vals)
        return y[j] * parts[k] - y[k] * parts[j]

    if isinstance(field, ScalarField):
        return ScalarField(grid, apply(field.values))
    return VectorField(grid, np.stack([apply(field.values[i]) for i in range(3)]))


def _cross(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    )


def _adjugate_rows(X: np.ndarray) -> np.ndarray:
    # rows are cross products of the column vectors d_j omega, arranged so
    # that adj(X) X = det(X) Id
    c0, c1, c2 = X[:, 0], X[:, 1], X[:, 2]
    return np.stack([_cross(c1, c2), _cross(c2, c0), _cross(c0, c1)])


def _identity_like(X: np.ndarray) -> np.ndarray:
    eye = np.zeros_like(X)
    for i in range(3):
        eye[i, i] = 1.0
    return eye


def deformation(omega: VectorField) -> DeformationState:
    """Deformation state of a displacement field, with self-verification.

    Computes the displacement gradient, its adjugate, the adjugate of the
    full map gradient Id + d omega via (1 + div) Id - (d omega)^T + adj, the
    Jacobian determinant, and the inverse matrix. Verifies the determinant
    expansion J = 1 + div + (div^2 + |curl|^2 - |d omega|^2)/2 + det(d omega)
    and the adjugate reconstruction of J to rounding. Raises
    DegenerateDeformationError if J <= 0 anywhere.
    """
    X = _field_partials(omega)
    div = X[0, 0] + X[1, 1] + X[2, 2]
    curl = np.einsum("ijk,kj...->i...", _EPS, X)
    adjX = _adjugate_rows(X)
    detX = np.einsum("i...,i...->...", X[:, 0], adjX[0])

    eye = _identity_like(X)
    M = eye + X
    # Cayley-Hamilton: adj(Id + X) = (1 + tr X) Id - X + adj X
    adjM = (1.0 + div) * eye - X + adjX
    J = np.linalg.det(np.moveaxis(M, (0, 1), (-2, -1)))
    if np.any(~np.isfinite(J)) or np.any(J <= 0.0):
        raise DegenerateDeformationError(
            "deformation is degenerate: Jacobian not positive everywhere"
        )
    J_rec = np.einsum("k...,k...->...", adjM[0], M[:, 0])
    det_defect = float(np.max(np.abs(J - J_rec)))

    norm2 = np.einsum("ij...,ij...->...", X, X)
    curl2 = np.einsum("i...,i...->...", curl, curl)
    expansion = 1.0 + div + 0.5 * (div**2 + curl2 - norm2) + detX
    expansion_defect = float(np.max(np.abs(J - expansion)))

    A = adjM / J
    prod = np.einsum("ik...,kj...->ij...", M, A, optimize=True)
    gap = np.abs(prod - eye).max(axis=(0, 1))
    half = J >= 0.5
    inverse_defect = float(gap[half].max()) if np.any(half) else 0.0

    frob = np.sqrt(norm2)
    in_regime = frob <= REGIME_THRESHOLD
    return DeformationState(
        omega=omega,
        grad_omega=X,
        adjugate=adjX,
        jacobian=J,
        a_inv=A,
        in_regime=in_regime,
        det_defect=det_defect,
        expansion_defect=expansion_defect,
        inverse_defect=inverse_defect,
    )


def flow_ops(
    state: DeformationState, F: VectorField
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flow-map gradient, divergence, and curl of a vector field.

    grad[i, r] = sum_k a_inv[k, r] d_k F^i, div = trace, curl_i = eps_{ijk}
    grad[k, j].
    """
    dF = _field_partials(F)
    G = np.einsum("kr...,ik...->ir...", state.a_inv, dF, optimize=True)
    div = G[0, 0] + G[1, 1] + G[2, 2]
    curl = np.einsum("ijk,kj...->i...", _EPS, G)
    return G, div, curl


def piola_residual(state: DeformationState) -> ScalarField:
    """Row divergence of J A, max over rows per node; an exact identity, so
    the values measure only differentiation error."""
    grid = state.grid
    X = state.grad_omega
    div = X[0, 0] + X[1, 1] + X[2, 2]
    JA = (1.0 + div) * _identity_like(X) - X + state.adjugate
    worst = np.zeros(grid.shape)
    for i in range(3):
        acc = np.zeros(grid.shape)
        for k in range(3):
            acc += grid.partials(JA[k, i])[k]
        worst = np.maximum(worst, np.abs(acc))
    return ScalarField(grid, worst)


def identity_nabt_nab(
    grid: BallGrid,
    omega,
    omega_t,
    F,
    F_t,
    t: float,
    dt: float | None = None,
) -> tuple[float, float]:
    """Max-norm defects of the two contraction identities for flow gradients.

    omega, omega_t, F, F_t are callables (t, y) -> (3, *grid) giving a
    displacement family, a test family, and their exact time derivatives.
    The first identity equates the contraction of the flow gradient of F
    with the flow gradient of F_t against the time derivative of
    (|grad_eta F|^2 - |curl_eta F|^2)/2 plus a cubic transport term; the
    second is its time-independent analogue. With dt given, the composite
    time derivative is taken by centered differencing of states at t +- dt
    instead of the exact product rule.
    """
    y = grid.y

    def make_state(tau: float) -> DeformationState:
        return deformation(VectorField(grid, np.asarray(omega(tau, y), dtype=float)))

    state = make_state(t)
    Fv = VectorField(grid, np.asarray(F(t, y), dtype=float))
    Ftv = VectorField(grid, np.asarray(F_t(t, y), dtype=float))
    wt = VectorField(grid, np.asarray(omega_t(t, y), dtype=float))

    A = state.a_inv
    G, _, curlF = flow_ops(state, Fv)
    # raw advected gradient of the time derivative (no d_t A part)
    dFt = _field_partials(Ftv)
    Gt_raw = np.einsum("kr...,ik...->ir...", A, dFt, optimize=True)
    lhs = np.einsum("ri...,ir...->...", G, Gt_raw, optimize=True)

    W = np.einsum(
        "kr...,sk...->sr...", A, _field_partials(wt), optimize=True
    )
    transport = np.einsum("ri...,sr...,is...->...", G, W, G, optimize=True)

    if dt is None:
        # d_t A = -A (d omega_t) A, then the product rule on G and curl
        Xdot = _field_partials(wt)
        A_t = -np.einsum(
            "ka...,ab...,bi...->ki...", A, Xdot, A, optimize=True
        )
        dF = _field_partials(Fv)
        G_t = Gt_raw + np.einsum("kr...,ik...->ir...", A_t, dF, optimize=True)
        curlF_t = np.einsum("ijk,kj...->i...", _EPS, G_t)
        dcomposite = 2.0 * (
            np.einsum("ir...,ir...->...", G, G_t, optimize=True)
            - np.einsum("i...,i...->...", curlF, curlF_t)
        )
    else:
        vals = []
        for tau in (t - dt, t + dt):
            st = make_state(tau)
            Gq, _, curlq = flow_ops(
                st, VectorField(grid, np.asarray(F(tau, y), dtype=float))
            )
            vals.append(
                np.einsum("ir...,ir...->...", Gq, Gq, optimize=True)
                - np.einsum("i...,i...->...", curlq, curlq)
            )
        dcomposite = (vals[1] - vals[0]) / (2.0 * dt)

    nabt_defect = float(np.max(np.abs(lhs - 0.5 * dcomposite - transport)))

    lhs2 = np.einsum("ri...,ir...->...", G, G, optimize=True)
    rhs2 = np.einsum("ir...,ir...->...", G, G, optimize=True) - np.einsum(
        "i...,i...->...", curlF, curlF
    )
    nab_defect = float(np.max(np.abs(lhs2 - rhs2)))
    return nabt_defect, nab_defect


def _multi_indices(order: int):
    for i in range(order + 1):
        for j in range(order + 1 - i):
            yield (i, j, order - i - j)


def _apply_multi(field, index: tuple[int, int, int], op):
    out = field
    for axis in range(3):
        for _ in range(index[axis]):
            out = op(out, axis)
    return out


def commutator_defect(
    f: ScalarField,
    alpha: tuple[int, int, int],
    beta: tuple[int, int, int],
    ceiling: float | None = None,
) -> CommutatorReport:
    """Evaluate [dbar^beta, d^alpha] f and fit the majorant constant.

    The commutator is formed by composing the discrete operators in the two
    orders; the majorant sums |d^{alpha'} dbar^{beta'} f| over all canonical
    multi-indices with |alpha'| = |alpha| and |beta'| < |beta|. Total order
    is capped at 4 (differentiation is reliable only to that depth on desk
    grids).
    """
    alpha = tuple(int(a) for a in alpha)
    beta = tuple(int(b) for b in beta)
    if len(alpha) != 3 or len(beta) != 3 or min(alpha) < 0 or min(beta) < 0:
        raise ValueError("alpha and beta must be length-3 non-negative tuples")
    na, nb = sum(alpha), sum(beta)
    if na + nb > 4:
        raise ValueError("total derivative order is capped at 4")

    if nb == 0:
        return CommutatorReport(
            alpha=alpha, beta=beta, max_commutator=0.0, C_fit=0.0,
            ceiling=ceiling, passed=True,
        )

    d_first = _apply_multi(f, alpha, spatial_derivative)
    left = _apply_multi(d_first, beta, angular_derivative)
    bar_first = _apply_multi(f, beta, angular_derivative)
    right = _apply_multi(bar_first, alpha, spatial_derivative)
    comm = left.values - right.values
    max_comm = float(np.max(np.abs(comm)))

    majorant = np.zeros(f.grid.shape)
    for j in range(nb):
        for bidx in _multi_indices(j):
            base = _apply_multi(f, bidx, angular_derivative)
            for aidx in _multi_indices(na):
                term = _apply_multi(base, aidx, spatial_derivative)
                majorant += np.abs(term.values)

    floor = 1e-13 * float(np.max(majorant)) if np.max(majorant) > 0 else 0.0
    live = majorant > floor
    if np.any(live):
        C_fit = float(np.max(np.abs(comm)[live] / majorant[live]))
        if np.any(~live) and float(np.max(np.abs(comm)[~live])) > 1e-10 * max(
            max_comm, 1.0
        ):
            C_fit = float("inf")
    else:
        C_fit = 0.0 if max_comm == 0.0 else float("inf")
    passed = np.isfinite(C_fit) and (ceiling is None or C_fit <= ceiling)
    return CommutatorReport(
        alpha=alpha, beta=beta, max_commutator=max_comm, C_fit=C_fit,
        ceiling=ceiling, passed=bool(passed),
    )


def save_field(field, dest) -> None:
    """Serialize a field snapshot: magic, version, dims, node-major values."""
    vals = field.values
    if isinstance(field, ScalarField):
        ncomp = 1
        node_major = vals[..., None]
    else:
        ncomp = 3
        node_major = np.moveaxis(vals, 0, -1)
    n_r, n_mu, n_psi = field.grid.shape
    header = np.array([n_r, n_mu, n_psi, ncomp], dtype="<i4")
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "wb") if own else dest
    try:
        fh.write(_MAGIC)
        fh.write(np.array([_VERSION], dtype="<i4").tobytes())
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(node_major, dtype="<f8").tobytes())
    finally:
        if own:
            fh.close()


def load_field(src, grid: BallGrid):
    """Load a snapshot written by save_field onto a conforming grid."""
    own = isinstance(src, (str, bytes)) or hasattr(src, "__fspath__")
    fh = open(src, "rb") if own else src
    try:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError("not a field snapshot (bad magic)")
        version = int(np.frombuffer(fh.read(4), dtype="<i4")[0])
        if version != _VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        dims = np.frombuffer(fh.read(16), dtype="<i4")
        n_r, n_mu, n_psi, ncomp = (int(d) for d in dims)
        if (n_r, n_mu, n_psi) != grid.shape:
            raise ValueError("snapshot dims do not match the grid")
        if ncomp not in (1, 3):
            raise ValueError("snapshot must hold 1 or 3 components")
        count = n_r * n_mu * n_psi * ncomp
        data = np.frombuffer(fh.read(count * 8), dtype="<f8")
        if data.size != count:
            raise ValueError("snapshot truncated")
        node_major = data.reshape(n_r, n_mu, n_psi, ncomp)
    finally:
        if own:
            fh.close()
    if ncomp == 1:
        return ScalarField(grid, node_major[..., 0])
    return VectorField(grid, np.moveaxis(node_major, -1, 0))


def field_to_csv(field, dest) -> None:
    """Write a small-grid snapshot as CSV rows of indices and values."""
    grid = field.grid
    scalar = isinstance(field, ScalarField)
    cols = "v" if scalar else "v1,v2,v3"
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        fh.write(f"i_r,i_mu,i_psi,{cols}\n")
        n_r, n_mu, n_psi = grid.shape
        for ir in range(n_r):
            for im in range(n_mu):
                for ip in range(n_psi):
                    if scalar:
                        tail = repr(float(field.values[ir, im, ip]))
                    else:
                        tail = ",".join(
                            repr(float(field.values[c, ir, im, ip]))
                            for c in range(3)
                        )
                    fh.write(f"{ir},{im},{ip},{tail}\n")
    finally:
        if own:
            fh.close()
