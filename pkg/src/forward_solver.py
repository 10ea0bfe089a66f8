"""
Time integration of the decoupled state system on the reference domain.

pbar solves the linear strongly damped wave equation driven by the Neumann
control g on Gamma_N; (ptil, wtil) solve the Westervelt equation coupled to a
hinged plate driven by h. Both use the average-acceleration Newmark scheme
(trapezoidal rule on the first-order system) with the equations collocated at
the new time level. Boundary nodes carry algebraic rows, so every step solves
for the nodal accelerations only.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .config import Config, PhysicsConfig
from .exceptions import (
    NewtonDiverged, NonDegeneracyViolated, ShapeMismatch, SingularSystem, StepTooLarge, ValidationError,
)
from .geometry import BoundaryProfile, ReferenceDomain, coefficient_derivative, transform_coefficients
from .operators import (
    AcousticOperators, assemble_acoustic_operators, assemble_plate_bilaplacian, boundary_selection,
    hinged_fractional_power,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhysicalParams:
    c: float = 1.0
    b: float = 0.05
    k: float = 0.1
    rho: float = 1.0
    delta: float = 0.01
    kappa: float = 0.5
    beta_a: float = 1.0
    gamma_a: float = 0.0
    beta_pl: float = 0.0
    gamma_pl: float = 0.0

    def __post_init__(self):
        errors = []
        if self.c <= 0 or self.b <= 0:
            errors.append(f"c and b must be positive (c={self.c}, b={self.b})")
        for name in ("k", "rho", "delta", "kappa", "beta_a", "gamma_a", "beta_pl", "gamma_pl"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative, got {getattr(self, name)}")
        if errors:
            raise ValidationError("; ".join(errors))

    @classmethod
    def from_config(cls, physics: PhysicsConfig) -> "PhysicalParams":
        return cls(**{name: getattr(physics, name) for name in cls.__dataclass_fields__})

    @property
    def plate_scale(self) -> float:
        """rho/kappa, the weight of the plate rows in the duality pairing"""
        if self.rho > 0 and self.kappa > 0:
            return self.rho / self.kappa
        return 1.0


@dataclass(frozen=True, eq=False)
class InitialData:
    """Initial ptil, ptil_t on the grid and wtil, wtil_t on Gamma_pl; pbar always starts at rest"""
    p0: np.ndarray
    p1: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    p2: Optional[np.ndarray] = None
    w2: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, dom: ReferenceDomain) -> "InitialData":
        return cls(
            p0=np.zeros(dom.shape), p1=np.zeros(dom.shape),
            w0=np.zeros(dom.Nx), w1=np.zeros(dom.Nx),
            p2=np.zeros(dom.shape), w2=np.zeros(dom.Nx),
        )

    def check_shapes(self, dom: ReferenceDomain):
        for name in ("p0", "p1", "p2"):
            value = getattr(self, name)
            if value is not None and np.shape(value) != dom.shape:
                raise ShapeMismatch(f"Initial {name} has shape {np.shape(value)}, grid is {dom.shape}")
        for name in ("w0", "w1", "w2"):
            value = getattr(self, name)
            if value is not None and np.shape(value) != (dom.Nx,):
                raise ShapeMismatch(f"Initial {name} has shape {np.shape(value)}, plate grid is ({dom.Nx},)")

    def derive(self, system: "MappedSystem", h0: np.ndarray = None) -> "InitialData":
        """Fill p2 = ptil_tt(0) and w2 = wtil_tt(0) from the equations at t = 0"""
        self.check_shapes(system.dom)
        pr = system.params
        L = system.ops.laplacian
        p0, p1 = self.p0.ravel(), self.p1.ravel()
        interior = system.interior > 0
        p2 = np.zeros(system.n)
        lead = 1.0 - 2.0 * pr.k * p0
        if np.min(lead) <= 0:
            raise NonDegeneracyViolated(float(np.min(lead)), 0.0, step=0)
        p2[interior] = ((pr.c**2 * L.dot(p0) + pr.b * L.dot(p1) + 2.0 * pr.k * p1**2) / lead)[interior]

        w2 = np.zeros(system.dom.Nx)
        if pr.rho > 0:
            h0 = np.zeros(system.dom.Nx) if h0 is None else np.asarray(h0, dtype=float)
            force = -pr.delta * system.D4.dot(self.w0) + pr.kappa * system.E.T.dot(p1) + h0
            if system.K is not None:
                force = force - pr.beta_pl * system.K.dot(self.w1)
            w2 = system.plate_interior * force / pr.rho
        return InitialData(
            p0=self.p0, p1=self.p1, w0=self.w0, w1=self.w1,
            p2=p2.reshape(system.dom.shape), w2=w2,
        )


def compatibility_residuals(init: InitialData, system: "MappedSystem") -> dict:
    """Max-norm defects of the corner compatibility conditions at t = 0"""
    pr = system.params
    if init.p2 is None or init.w2 is None:
        init = init.derive(system)
    N = system.ops.boundary
    side = system.side > 0
    top = system.top > 0
    bottom = system.bottom > 0
    p0, p1, p2 = init.p0.ravel(), init.p1.ravel(), init.p2.ravel()

    def worst(values, mask):
        return float(np.max(np.abs(values[mask]))) if mask.any() else 0.0

    return {
        "absorbing_p0": worst(N.dot(p0) + pr.beta_a * p1 + pr.gamma_a * p0, side),
        "absorbing_p1": worst(N.dot(p1) + pr.beta_a * p2 + pr.gamma_a * p1, side),
        "neumann_p0": worst(N.dot(p0), top),
        "plate_p0": worst(N.dot(p0) + pr.rho * system.E.dot(init.w1), bottom),
        "plate_p1": worst(N.dot(p1) + pr.rho * system.E.dot(init.w2), bottom),
    }


def _apply(A, X):
    """A applied to a vector or to every row of a (levels x n) array"""
    return A.dot(np.asarray(X).T).T


def _factorize(K, what: str):
    try:
        return splu(sp.csc_matrix(K))
    except RuntimeError as e:
        raise SingularSystem(f"{what}: {e}") from e


class MappedSystem:
    """
    Residual rows, Jacobians and partial derivatives of one time level.

    Acoustic state per level is (p, v, a) on the flat grid; the plate state is
    (w, z, aw) with z = wtil_t. Rows are multiplied by their quadrature weights
    so that pairing a row with a multiplier is a quadrature of the weak form.
    """

    def __init__(self, params: PhysicalParams, dom: ReferenceDomain, ell: BoundaryProfile, dt: float):
        if dt <= 0:
            raise ValidationError(f"Time step must be positive, got {dt}")
        self.params = params
        self.dom = dom
        self.ell = ell
        self.dt = dt
        self.beta2 = 0.25 * dt * dt
        self.gamma1 = 0.5 * dt
        self.n = dom.n_nodes

        self.coeffs = transform_coefficients(ell, dom)
        self.ops = assemble_acoustic_operators(self.coeffs, dom)
        masks = dom.node_masks()
        self.interior = masks["interior"].astype(float)
        self.side = masks["side"].astype(float)
        self.top = masks["top"].astype(float)
        self.bottom = masks["bottom"].astype(float)

        self.plate_interior = np.zeros(dom.Nx)
        self.plate_interior[1:-1] = 1.0
        self.plate_ends = 1.0 - self.plate_interior
        self.plate_weights = params.plate_scale * dom.x_weights()
        self.D4 = assemble_plate_bilaplacian(dom)
        self.K = hinged_fractional_power(dom.Nx, dom.dx, params.gamma_pl) if params.beta_pl > 0 else None
        self.E = boundary_selection(dom, "bottom")
        self.G = boundary_selection(dom, "top")
        self._pbar_cache = None

    # Newmark
    def predict(self, p, v, a):
        return p + self.dt * v + self.beta2 * a, v + self.gamma1 * a

    def correct(self, p_star, v_star, a):
        return p_star + self.beta2 * a, v_star + self.gamma1 * a

    # pbar rows
    def pbar_rows(self, p, v, a, g, ops: AcousticOperators = None):
        """Unweighted pbar residual rows; with derivative operators only the operator parts are applied"""
        pr = self.params
        if ops is None:
            ops = self.ops
            rows = self.interior * a + self.side * (pr.beta_a * v + pr.gamma_a * p)
        else:
            rows = 0.0
        rows = rows - pr.c**2 * _apply(ops.laplacian, p) - pr.b * _apply(ops.laplacian, v)
        rows = rows + _apply(ops.boundary, p) - ops.neumann_weight * _apply(self.G, g)
        return rows

    def pbar_residual(self, p, v, a, g):
        return self.ops.row_weights * self.pbar_rows(p, v, a, g)

    def pbar_partials(self) -> dict:
        if self._pbar_cache is None:
            pr = self.params
            W = sp.diags(self.ops.row_weights)
            L, N = self.ops.laplacian, self.ops.boundary
            Fp = (W @ (-pr.c**2 * L + N + pr.gamma_a * sp.diags(self.side))).tocsr()
            Fv = (W @ (-pr.b * L + pr.beta_a * sp.diags(self.side))).tocsr()
            Fa = (W @ sp.diags(self.interior)).tocsr()
            Fg = (-W @ sp.diags(self.ops.neumann_weight) @ self.G).tocsr()
            K = (self.beta2 * Fp + self.gamma1 * Fv + Fa).tocsc()
            self._pbar_cache = {"p": Fp, "v": Fv, "a": Fa, "g": Fg, "K": K}
        return self._pbar_cache

    def pbar_factor(self):
        if "lu" not in self.pbar_partials():
            self._pbar_cache["lu"] = _factorize(self._pbar_cache["K"], "pbar step matrix")
        return self._pbar_cache["lu"]

    # ptil + plate rows
    def ptil_rows(self, ubar, ut, ops: AcousticOperators = None):
        """Unweighted acoustic ptil rows"""
        pr = self.params
        pb, vb, ab = ubar
        p, v, a, w, z, aw = ut
        use = self.ops if ops is None else ops
        rows = -pr.c**2 * _apply(use.laplacian, p) - pr.b * _apply(use.laplacian, v) + _apply(use.boundary, p)
        if ops is None:
            P, A, V = pb + p, ab + a, vb + v
            rows = rows + self.interior * (a - 2.0 * pr.k * P * A - 2.0 * pr.k * V**2)
            rows = rows + self.side * (pr.beta_a * v + pr.gamma_a * p) + pr.rho * _apply(self.E, z)
        return rows

    def plate_rows(self, ubar, ut, h):
        pr = self.params
        _, vb, _ = ubar
        p, v, a, w, z, aw = ut
        force = pr.rho * aw + pr.delta * _apply(self.D4, w) - pr.kappa * _apply(self.E.T, v + vb) - h
        if self.K is not None:
            force = force + pr.beta_pl * _apply(self.K, z)
        return self.plate_interior * force + self.plate_ends * aw

    def ptil_residual(self, ubar, ut, h):
        return np.concatenate([
            self.ops.row_weights * self.ptil_rows(ubar, ut),
            self.plate_weights * self.plate_rows(ubar, ut, h),
        ])

    def ptil_partials(self, ubar, ut) -> dict:
        """Partials of the stacked (acoustic, plate) rows w.r.t. every state component at this level"""
        pr = self.params
        pb, vb, ab = ubar
        p, v, a, _, _, _ = ut
        P, A, V = pb + p, ab + a, vb + v
        n, m = self.n, self.dom.Nx
        W = sp.diags(self.ops.row_weights)
        Wp = sp.diags(self.plate_weights * self.plate_interior)
        L, N = self.ops.laplacian, self.ops.boundary
        I = self.interior
        zero_an, zero_am = sp.csr_matrix((n, m)), sp.csr_matrix((m, n))
        coupling = -pr.kappa * (Wp @ self.E.T)

        def stack(top, bottom):
            return sp.vstack([top, bottom], format="csr")

        d_p = sp.diags(I * (-2.0 * pr.k * A))
        d_v = sp.diags(I * (-4.0 * pr.k * V))
        d_a = sp.diags(I * (-2.0 * pr.k * P))
        plate_z = pr.beta_pl * (Wp @ self.K) if self.K is not None else sp.csr_matrix((m, m))
        return {
            "p": stack(W @ (d_p - pr.c**2 * L + N + pr.gamma_a * sp.diags(self.side)), zero_am),
            "v": stack(W @ (d_v - pr.b * L + pr.beta_a * sp.diags(self.side)), coupling),
            "a": stack(W @ (sp.diags(I) + d_a), zero_am),
            "w": stack(zero_an, pr.delta * (Wp @ self.D4)),
            "z": stack(pr.rho * (W @ self.E), plate_z),
            "aw": stack(zero_an, sp.diags(self.plate_weights * (pr.rho * self.plate_interior + self.plate_ends))),
            "pbar": stack(W @ d_p, zero_am),
            "vbar": stack(W @ d_v, coupling),
            "abar": stack(W @ d_a, zero_am),
            "h": stack(zero_an, -Wp),
        }

    def ptil_jacobian(self, F: dict) -> sp.csc_matrix:
        acoustic = self.beta2 * F["p"] + self.gamma1 * F["v"] + F["a"]
        plate = self.beta2 * F["w"] + self.gamma1 * F["z"] + F["aw"]
        return sp.hstack([acoustic, plate], format="csc")

    def margin(self, pbar, ptil) -> float:
        return float(np.min(1.0 - 2.0 * self.params.k * (pbar + ptil)))

    # shape derivative
    def derivative_operators(self, dell) -> AcousticOperators:
        return assemble_acoustic_operators(coefficient_derivative(self.ell, dell, self.dom), self.dom)

    def shape_derivative_rows(self, dops: AcousticOperators, ubar_levels, ut_levels, g_levels):
        """Weighted ell-derivatives of the pbar and ptil rows at every supplied level"""
        W, dW = self.ops.row_weights, dops.row_weights
        pb, vb, ab = ubar_levels
        rows_bar = self.pbar_rows(pb, vb, ab, g_levels)
        drows_bar = self.pbar_rows(pb, vb, ab, g_levels, ops=dops)
        rows_til = self.ptil_rows(ubar_levels, ut_levels)
        drows_til = self.ptil_rows(ubar_levels, ut_levels, ops=dops)
        return dW * rows_bar + W * drows_bar, dW * rows_til + W * drows_til


@dataclass(eq=False)
class FieldTrajectory:
    """Flat (levels x nodes) Newmark history of one acoustic field"""
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def level(self, n: int):
        return self.p[n], self.v[n], self.a[n]


@dataclass(eq=False)
class PlateTrajectory:
    w: np.ndarray
    z: np.ndarray
    a: np.ndarray

    def level(self, n: int):
        return self.w[n], self.z[n], self.a[n]


@dataclass(eq=False)
class CoupledTrajectory:
    ptil: FieldTrajectory
    plate: PlateTrajectory
    margin: float
    newton_iterations: int = 0


@dataclass(eq=False)
class StateTrajectory:
    """Space-time state; acoustic arrays are (Nt+1, Nx, Nz), plate arrays (Nt+1, Nx)"""
    pbar: np.ndarray
    pbar_t: np.ndarray
    pbar_tt: np.ndarray
    ptil: np.ndarray
    ptil_t: np.ndarray
    ptil_tt: np.ndarray
    wtil: np.ndarray
    wtil_t: np.ndarray
    wtil_tt: np.ndarray
    dt: float
    T: float
    margin: float
    ell: BoundaryProfile
    dom: ReferenceDomain
    g: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None

    @property
    def Nt(self) -> int:
        return self.pbar.shape[0] - 1

    @property
    def pressure(self) -> np.ndarray:
        return self.pbar + self.ptil

    def flat(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        return value.reshape(value.shape[0], -1)

    def ubar(self):
        return self.flat("pbar"), self.flat("pbar_t"), self.flat("pbar_tt")

    def ut(self):
        return (self.flat("ptil"), self.flat("ptil_t"), self.flat("ptil_tt"),
                self.wtil, self.wtil_t, self.wtil_tt)

    def vector(self) -> np.ndarray:
        """All state values concatenated, for trajectory norms"""
        return np.concatenate([self.pbar.ravel(), self.ptil.ravel(), self.wtil.ravel()])

    @classmethod
    def from_parts(cls, pbar: FieldTrajectory, coupled: CoupledTrajectory, system: MappedSystem, T: float,
                   g: np.ndarray = None, h: np.ndarray = None):
        shape = (-1,) + system.dom.shape
        return cls(
            pbar=pbar.p.reshape(shape), pbar_t=pbar.v.reshape(shape), pbar_tt=pbar.a.reshape(shape),
            ptil=coupled.ptil.p.reshape(shape), ptil_t=coupled.ptil.v.reshape(shape),
            ptil_tt=coupled.ptil.a.reshape(shape),
            wtil=coupled.plate.w, wtil_t=coupled.plate.z, wtil_tt=coupled.plate.a,
            dt=system.dt, T=T, margin=coupled.margin, ell=system.ell, dom=system.dom, g=g, h=h,
        )


@dataclass(eq=False)
class LinearizedTrajectory(StateTrajectory):
    residual: float = 0.0


def time_levels(dt: float, T: float) -> int:
    Nt = int(round(T / dt))
    if Nt < 1 or abs(Nt * dt - T) > 1e-9 * max(T, 1.0):
        raise ShapeMismatch(f"T = {T} is not an integer multiple of dt = {dt}")
    return Nt


def _check_edge_control(name: str, values, Nt: int, dom: ReferenceDomain) -> np.ndarray:
    if values is None:
        return np.zeros((Nt + 1, dom.Nx))
    values = np.asarray(values, dtype=float)
    if values.shape != (Nt + 1, dom.Nx):
        raise ShapeMismatch(f"Control {name} has shape {values.shape}, expected {(Nt + 1, dom.Nx)}")
    return values


def _warn_step_residual(residual: float, step: int, what: str):
    if residual > Config.STEP_RESIDUAL_TOL:
        warnings.warn(
            f"{what} step {step}: relative residual {residual:.3g} above {Config.STEP_RESIDUAL_TOL:.1g}",
            StepTooLarge,
        )


def _relative(residual: np.ndarray, rhs: np.ndarray) -> float:
    scale = np.linalg.norm(rhs)
    return float(np.linalg.norm(residual) / scale) if scale > 0 else float(np.linalg.norm(residual))


def boundary_accelerations(a: np.ndarray, v: np.ndarray, interior: np.ndarray, dt: float) -> np.ndarray:
    """
    Replace the accelerations of massless boundary nodes by centered time
    differences of their velocities.

    Boundary rows constrain (p, v) only, so the scheme fixes a_n + a_(n+1)
    there and leaves an alternating component that (p, v) never see.
    """
    a = np.array(a, dtype=float)
    boundary = np.asarray(interior) == 0
    if a.shape[0] >= 2 and boundary.any():
        edge_order = 2 if a.shape[0] >= 3 else 1
        a[:, boundary] = np.gradient(np.asarray(v)[:, boundary], dt, axis=0, edge_order=edge_order)
    return a


def solve_pbar(params: PhysicalParams, g, ell: BoundaryProfile, dom: ReferenceDomain, dt: float, T: float,
               system: MappedSystem = None) -> FieldTrajectory:
    """Linear pbar problem with zero initial data; one sparse solve per step with a single factorization"""
    Nt = time_levels(dt, T)
    g = _check_edge_control("g", g, Nt, dom)
    system = system or MappedSystem(params, dom, ell, dt)
    n = system.n
    p, v, a = np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n))
    lu = system.pbar_factor()
    K = system.pbar_partials()["K"]
    zero = np.zeros(n)

    for step in range(Nt):
        p_star, v_star = system.predict(p[step], v[step], a[step])
        rhs = -system.pbar_residual(p_star, v_star, zero, g[step + 1])
        a[step + 1] = lu.solve(rhs)
        if not np.all(np.isfinite(a[step + 1])):
            raise SingularSystem(f"pbar step {step + 1} produced non-finite values")
        _warn_step_residual(_relative(K.dot(a[step + 1]) - rhs, rhs), step + 1, "pbar")
        p[step + 1], v[step + 1] = system.correct(p_star, v_star, a[step + 1])

    logger.debug(f"pbar: {Nt} steps, max |pbar| = {np.max(np.abs(p)):.3e}")
    return FieldTrajectory(p=p, v=v, a=boundary_accelerations(a, v, system.interior, dt))


def solve_ptil_plate(params: PhysicalParams, pbar: FieldTrajectory, h, ell: BoundaryProfile,
                     dom: ReferenceDomain, init: InitialData, dt: float, T: float,
                     system: MappedSystem = None) -> CoupledTrajectory:
    """Monolithic Westervelt-plate step resolved by Newton's method with the analytic Jacobian"""
    Nt = time_levels(dt, T)
    h = _check_edge_control("h", h, Nt, dom)
    system = system or MappedSystem(params, dom, ell, dt)
    init = init or InitialData.zeros(dom)
    if init.p2 is None or init.w2 is None:
        init = init.derive(system, h[0])
    init.check_shapes(dom)
    if pbar.p.shape != (Nt + 1, system.n):
        raise ShapeMismatch(f"pbar trajectory has shape {pbar.p.shape}, expected {(Nt + 1, system.n)}")

    n, m = system.n, dom.Nx
    guard = Config.DEGENERACY_GUARD
    tol = Config.NEWTON_TOL
    max_iter = Config.NEWTON_MAX_ITER

    p, v, a = np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n))
    w, z, aw = np.zeros((Nt + 1, m)), np.zeros((Nt + 1, m)), np.zeros((Nt + 1, m))
    p[0], v[0], a[0] = init.p0.ravel(), init.p1.ravel(), init.p2.ravel()
    w[0], z[0], aw[0] = init.w0, init.w1, init.w2

    margin = system.margin(pbar.p[0], p[0])
    if margin <= guard:
        raise NonDegeneracyViolated(margin, guard, step=0)

    total_iterations = 0
    for step in range(Nt):
        ubar = pbar.level(step + 1)
        p_star, v_star = system.predict(p[step], v[step], a[step])
        w_star, z_star = system.predict(w[step], z[step], aw[step])
        y = np.concatenate([a[step], aw[step]])
        res0 = None
        step_norm = np.inf

        for iteration in range(max_iter + 1):
            pa, pv = system.correct(p_star, v_star, y[:n])
            wa, wz = system.correct(w_star, z_star, y[n:])
            ut = (pa, pv, y[:n], wa, wz, y[n:])
            level_margin = system.margin(ubar[0], pa)
            if level_margin <= guard:
                raise NonDegeneracyViolated(level_margin, guard, step=step + 1)

            R = system.ptil_residual(ubar, ut, h[step + 1])
            res = float(np.linalg.norm(R))
            if res0 is None:
                res0 = res
            if res <= tol * res0 or step_norm <= tol * max(float(np.linalg.norm(y)), 1e-300):
                break
            if iteration == max_iter:
                raise NewtonDiverged(
                    f"Newton did not converge at step {step + 1} after {max_iter} iterations "
                    f"(residual {res:.3e}, initial {res0:.3e})"
                )
            J = system.ptil_jacobian(system.ptil_partials(ubar, ut))
            delta = _factorize(J, f"ptil step {step + 1} Jacobian").solve(-R)
            if not np.all(np.isfinite(delta)):
                raise SingularSystem(f"ptil step {step + 1} Newton update is not finite")
            y = y + delta
            step_norm = float(np.linalg.norm(delta))
            total_iterations += 1

        margin = min(margin, level_margin)
        p[step + 1], v[step + 1], a[step + 1] = pa, pv, y[:n]
        w[step + 1], z[step + 1], aw[step + 1] = wa, wz, y[n:]

    logger.debug(f"ptil/plate: {Nt} steps, {total_iterations} Newton iterations, margin {margin:.4f}")
    return CoupledTrajectory(
        ptil=FieldTrajectory(p=p, v=v, a=boundary_accelerations(a, v, system.interior, dt)),
        plate=PlateTrajectory(w=w, z=z, a=aw),
        margin=margin, newton_iterations=total_iterations,
    )


def solve_forward(params: PhysicalParams, g, h, ell: BoundaryProfile, dom: ReferenceDomain, dt: float, T: float,
                  init: InitialData = None) -> StateTrajectory:
    system = MappedSystem(params, dom, ell, dt)
    pbar = solve_pbar(params, g, ell, dom, dt, T, system=system)
    coupled = solve_ptil_plate(params, pbar, h, ell, dom, init, dt, T, system=system)
    Nt = time_levels(dt, T)
    return StateTrajectory.from_parts(
        pbar, coupled, system, T,
        g=_check_edge_control("g", g, Nt, dom), h=_check_edge_control("h", h, Nt, dom),
    )


def step_weights(Nt: int, dt: float) -> np.ndarray:
    """Time weights of the collocated rows: level 0 carries no row, the last level half a step"""
    tau = np.full(Nt + 1, dt)
    tau[0] = 0.0
    tau[-1] = 0.5 * dt
    return tau


def pairing_vectors(tests, dom: ReferenceDomain):
    """
    Flat test functions for the pbar and ptil rows.

    qbar pairs with the interior, side and bottom pbar rows and mu_N with the
    Gamma_N rows; qtil pairs with the ptil rows except on Gamma_pl, where mu_pl
    takes over.
    """
    qbar = np.array(tests.qbar, dtype=float).reshape(tests.qbar.shape[0], -1)
    qtil = np.array(tests.qtil, dtype=float).reshape(tests.qtil.shape[0], -1)
    qbar[:, dom.top_nodes] = np.asarray(tests.mu_N)[:, 1:-1]
    qtil[:, dom.bottom_nodes] = np.asarray(tests.mu_pl)[:, 1:-1]
    return qbar, qtil


def residual_APDE(controls, states: StateTrajectory, tests, params: PhysicalParams, dom: ReferenceDomain) -> float:
    """
    Discrete duality pairing of the state residual with a test tuple.

    tests provides qbar, qtil (Nt+1, Nx, Nz), vtil, mu_N, mu_pl (Nt+1, Nx).
    """
    Nt = states.Nt
    for name in ("qbar", "qtil"):
        if np.shape(getattr(tests, name)) != (Nt + 1,) + dom.shape:
            raise ShapeMismatch(f"Test field {name} has shape {np.shape(getattr(tests, name))}")
    for name in ("vtil", "mu_N", "mu_pl"):
        if np.shape(getattr(tests, name)) != (Nt + 1, dom.Nx):
            raise ShapeMismatch(f"Test field {name} has shape {np.shape(getattr(tests, name))}")
    if states.pbar.shape != (Nt + 1,) + dom.shape:
        raise ShapeMismatch(f"State grid {states.pbar.shape[1:]} differs from {dom.shape}")

    system = MappedSystem(params, dom, controls.ell, states.dt)
    g = _check_edge_control("g", controls.g, Nt, dom)
    h = _check_edge_control("h", controls.h, Nt, dom)
    ubar, ut = states.ubar(), states.ut()
    R_bar = system.pbar_residual(*ubar, g)
    R_til = system.ops.row_weights * system.ptil_rows(ubar, ut)
    R_w = system.plate_weights * system.plate_rows(ubar, ut, h)

    qbar, qtil = pairing_vectors(tests, dom)
    tau = step_weights(Nt, states.dt)
    pairing = np.sum(qbar * R_bar, axis=1) + np.sum(qtil * R_til, axis=1) + np.sum(tests.vtil * R_w, axis=1)
    return float(np.dot(tau, pairing))


@dataclass(eq=False)
class LinearizedRHS:
    """Sources of the linearized system; any entry may be None (zero)"""
    f_pbar: Optional[np.ndarray] = None
    f_ptil: Optional[np.ndarray] = None
    f_wtil: Optional[np.ndarray] = None
    f_N: Optional[np.ndarray] = None
    f_pl: Optional[np.ndarray] = None


def _field_source(values, Nt: int, dom: ReferenceDomain, name: str) -> np.ndarray:
    if values is None:
        return np.zeros((Nt + 1, dom.n_nodes))
    values = np.asarray(values, dtype=float)
    if values.shape != (Nt + 1,) + dom.shape:
        raise ShapeMismatch(f"Source {name} has shape {values.shape}, expected {(Nt + 1,) + dom.shape}")
    return values.reshape(Nt + 1, -1)


def solve_linearized(params: PhysicalParams, base: StateTrajectory, rhs: LinearizedRHS, dcontrols,
                     ell: BoundaryProfile, dom: ReferenceDomain, dt: float, T: float,
                     dell=None) -> LinearizedTrajectory:
    """
    Tangent-linear system around base with homogeneous initial data.

    dcontrols = (dg, dh); dell is an optional shape direction. The returned
    residual is the largest relative defect of any step solve.
    """
    Nt = time_levels(dt, T)
    if base.Nt != Nt:
        raise ShapeMismatch(f"Base trajectory has {base.Nt} steps, expected {Nt}")
    rhs = rhs or LinearizedRHS()
    dg, dh = dcontrols if dcontrols is not None else (None, None)
    dg = _check_edge_control("dg", dg, Nt, dom)
    dh = _check_edge_control("dh", dh, Nt, dom)
    f_bar = _field_source(rhs.f_pbar, Nt, dom, "f_pbar")
    f_til = _field_source(rhs.f_ptil, Nt, dom, "f_ptil")
    f_w = _check_edge_control("f_wtil", rhs.f_wtil, Nt, dom)
    f_N = _check_edge_control("f_N", rhs.f_N, Nt, dom)
    f_pl = _check_edge_control("f_pl", rhs.f_pl, Nt, dom)

    system = MappedSystem(params, dom, ell, dt)
    n, m = system.n, dom.Nx
    W = system.ops.row_weights
    ubar_levels, ut_levels = base.ubar(), base.ut()
    if base.margin <= Config.DEGENERACY_GUARD:
        raise NonDegeneracyViolated(base.margin, Config.DEGENERACY_GUARD)

    shape_bar = np.zeros((Nt + 1, n))
    shape_til = np.zeros((Nt + 1, n))
    if dell is not None:
        dops = system.derivative_operators(dell)
        base_g = _check_edge_control("g", base.g, Nt, dom)
        shape_bar, shape_til = system.shape_derivative_rows(dops, ubar_levels, ut_levels, base_g)

    worst = 0.0
    Fb = system.pbar_partials()
    lu = system.pbar_factor()
    pb, vb, ab = np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n))
    for step in range(Nt):
        k = step + 1
        p_star, v_star = system.predict(pb[step], vb[step], ab[step])
        source = W * (system.interior * f_bar[k] + system.ops.neumann_weight * system.G.dot(f_N[k]))
        b_rhs = source - Fb["p"].dot(p_star) - Fb["v"].dot(v_star) - Fb["g"].dot(dg[k]) - shape_bar[k]
        ab[k] = lu.solve(b_rhs)
        worst = max(worst, _relative(Fb["K"].dot(ab[k]) - b_rhs, b_rhs))
        pb[k], vb[k] = system.correct(p_star, v_star, ab[k])

    pt, vt, at = np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n))
    wt, zt, awt = np.zeros((Nt + 1, m)), np.zeros((Nt + 1, m)), np.zeros((Nt + 1, m))
    for step in range(Nt):
        k = step + 1
        base_bar = tuple(x[k] for x in ubar_levels)
        base_til = tuple(x[k] for x in ut_levels)
        F = system.ptil_partials(base_bar, base_til)
        J = system.ptil_jacobian(F)
        p_star, v_star = system.predict(pt[step], vt[step], at[step])
        w_star, z_star = system.predict(wt[step], zt[step], awt[step])
        source = np.concatenate([
            W * (system.interior * f_til[k] + system.E.dot(f_pl[k])),
            system.plate_weights * system.plate_interior * f_w[k],
        ])
        source[:n] -= shape_til[k]
        t_rhs = (source - F["p"].dot(p_star) - F["v"].dot(v_star) - F["w"].dot(w_star) - F["z"].dot(z_star)
                 - F["pbar"].dot(pb[k]) - F["vbar"].dot(vb[k]) - F["abar"].dot(ab[k]) - F["h"].dot(dh[k]))
        y = _factorize(J, f"linearized step {k}").solve(t_rhs)
        if not np.all(np.isfinite(y)):
            raise SingularSystem(f"Linearized step {k} produced non-finite values")
        worst = max(worst, _relative(J.dot(y) - t_rhs, t_rhs))
        at[k], awt[k] = y[:n], y[n:]
        pt[k], vt[k] = system.correct(p_star, v_star, at[k])
        wt[k], zt[k] = system.correct(w_star, z_star, awt[k])

    ab = boundary_accelerations(ab, vb, system.interior, dt)
    at = boundary_accelerations(at, vt, system.interior, dt)
    shape = (Nt + 1,) + dom.shape
    return LinearizedTrajectory(
        pbar=pb.reshape(shape), pbar_t=vb.reshape(shape), pbar_tt=ab.reshape(shape),
        ptil=pt.reshape(shape), ptil_t=vt.reshape(shape), ptil_tt=at.reshape(shape),
        wtil=wt, wtil_t=zt, wtil_tt=awt,
        dt=dt, T=T, margin=base.margin, ell=ell, dom=dom, residual=worst,
    )
