"""
Tracking objective, regularizers and the reduced gradients.

Gradients are returned in the quadrature-weighted L2 representation: for
every admissible direction d, dJ[d] = inner(gradient, d) with the trapezoidal
weights in time and along B. The adjoint enters through duck-typed fields
(qbar, qtil, vtil, mu_N), so this module never imports the adjoint solver.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np

from .exceptions import ShapeMismatch, ValidationError
from .forward_solver import MappedSystem, PhysicalParams, StateTrajectory, step_weights
from .geometry import BoundaryProfile, ReferenceDomain, boundary_geometry, transform_coefficients
from .operators import FractionalSpec, edge_trace, fractional_neumann_apply
from .utils import time_derivative, trapezoid_weights

logger = logging.getLogger(__name__)

G_FROZEN_LAYERS = 2
H_FROZEN_LAYERS = 1
ELL_CLAMPED = (0, 1, -2, -1)


@dataclass(frozen=True)
class ObjectiveSettings:
    theta: float = 1e-6
    s_g: float = 0.5
    s_ell: float = 3.0
    roi: Tuple[float, float, float, float] = (0.25, 0.75, -0.25, 0.0)

    def __post_init__(self):
        if self.theta < 0:
            raise ValidationError(f"theta must be non-negative, got {self.theta}")
        if len(self.roi) != 4 or self.roi[0] >= self.roi[1] or self.roi[2] >= self.roi[3]:
            raise ValidationError(f"ROI must be (x0, x1, z0, z1) with x0 < x1 and z0 < z1, got {self.roi}")


@dataclass(eq=False)
class Targets:
    p_d: np.ndarray
    w_d: np.ndarray

    @classmethod
    def zeros(cls, dom: ReferenceDomain, Nt: int) -> "Targets":
        return cls(p_d=np.zeros((Nt + 1,) + dom.shape), w_d=np.zeros((Nt + 1, dom.Nx)))

    @classmethod
    def from_states(cls, states: StateTrajectory) -> "Targets":
        return cls(p_d=states.pressure.copy(), w_d=states.wtil.copy())


@dataclass(eq=False)
class ControlDirection:
    """A perturbation or gradient of (g, h, ell); ell entries are deviations on B"""
    dg: np.ndarray
    dh: np.ndarray
    dell: np.ndarray

    def scaled(self, factor: float) -> "ControlDirection":
        return ControlDirection(dg=factor * self.dg, dh=factor * self.dh, dell=factor * self.dell)

    def __add__(self, other: "ControlDirection") -> "ControlDirection":
        return ControlDirection(dg=self.dg + other.dg, dh=self.dh + other.dh, dell=self.dell + other.dell)

    def __sub__(self, other: "ControlDirection") -> "ControlDirection":
        return self + other.scaled(-1.0)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.dg.ravel(), self.dh.ravel(), self.dell.ravel()])

    def unpack_like(self, vector: np.ndarray) -> "ControlDirection":
        a, b = self.dg.size, self.dh.size
        return ControlDirection(
            dg=vector[:a].reshape(self.dg.shape),
            dh=vector[a:a + b].reshape(self.dh.shape),
            dell=vector[a + b:].reshape(self.dell.shape),
        )

    @classmethod
    def zeros_like(cls, controls: "ControlVector") -> "ControlDirection":
        return cls(dg=np.zeros_like(controls.g), dh=np.zeros_like(controls.h), dell=np.zeros_like(controls.ell.ell))


@dataclass(eq=False)
class ControlVector:
    g: np.ndarray
    h: np.ndarray
    ell: BoundaryProfile
    g0: np.ndarray
    h0: np.ndarray
    ell_prior: BoundaryProfile
    dt: float

    @property
    def Nt(self) -> int:
        return self.g.shape[0] - 1

    def check(self, dom: ReferenceDomain):
        shape = (self.Nt + 1, dom.Nx)
        for name in ("g", "h", "g0", "h0"):
            if np.shape(getattr(self, name)) != shape:
                raise ShapeMismatch(f"Control {name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for name in ("ell", "ell_prior"):
            if np.shape(getattr(self, name).ell) != (dom.Nx,):
                raise ShapeMismatch(f"Profile {name} has {np.size(getattr(self, name).ell)} nodes, B has {dom.Nx}")

    def with_values(self, g=None, h=None, ell=None) -> "ControlVector":
        return replace(
            self,
            g=self.g if g is None else np.asarray(g, dtype=float),
            h=self.h if h is None else np.asarray(h, dtype=float),
            ell=self.ell if ell is None else (ell if isinstance(ell, BoundaryProfile) else self.ell.with_values(ell)),
        )

    def moved(self, direction: ControlDirection, step: float = 1.0) -> "ControlVector":
        return self.with_values(
            g=self.g + step * direction.dg,
            h=self.h + step * direction.dh,
            ell=self.ell.ell + step * direction.dell,
        )

    def difference(self, other: "ControlVector") -> ControlDirection:
        return ControlDirection(dg=self.g - other.g, dh=self.h - other.h, dell=self.ell.ell - other.ell.ell)

    def deviation(self) -> ControlDirection:
        """Distance to the priors"""
        return ControlDirection(dg=self.g - self.g0, dh=self.h - self.h0, dell=self.ell.ell - self.ell_prior.ell)


def control_inner(a: ControlDirection, b: ControlDirection, dom: ReferenceDomain, dt: float) -> float:
    """Trapezoidal L2 inner product on (Gamma_N x time) x (Gamma_pl x time) x B"""
    wx = dom.x_weights()
    wt = trapezoid_weights(a.dg.shape[0], dt)
    return float(
        np.einsum("t,x,tx,tx->", wt, wx, a.dg, b.dg)
        + np.einsum("t,x,tx,tx->", wt, wx, a.dh, b.dh)
        + np.sum(wx * a.dell * b.dell)
    )


def control_norm(a: ControlDirection, dom: ReferenceDomain, dt: float) -> float:
    return float(np.sqrt(max(control_inner(a, a, dom, dt), 0.0)))


def project_tangent(direction: ControlDirection) -> ControlDirection:
    """Zero the frozen initial control layers and the clamped ends of B"""
    dg = np.array(direction.dg, dtype=float)
    dh = np.array(direction.dh, dtype=float)
    dell = np.array(direction.dell, dtype=float)
    dg[:G_FROZEN_LAYERS] = 0.0
    dh[:H_FROZEN_LAYERS] = 0.0
    dell[list(ELL_CLAMPED)] = 0.0
    return ControlDirection(dg=dg, dh=dh, dell=dell)


def _index_block(coords: np.ndarray, lo: float, hi: float, h: float) -> np.ndarray:
    tol = 1e-9 * h
    return np.flatnonzero((coords >= lo - tol) & (coords <= hi + tol))


def _block_weights(n: int, idx: np.ndarray, h: float) -> np.ndarray:
    w = np.zeros(n)
    if idx.size >= 2:
        w[idx] = trapezoid_weights(idx.size, h)
    return w


def _roi_blocks(dom: ReferenceDomain, roi):
    x0, x1, z0, z1 = roi
    ix = _index_block(dom.x, x0, x1, dom.dx)
    jz = _index_block(dom.z, z0, z1, dom.dz)
    if ix.size < 2 or jz.size < 2:
        raise ValidationError(f"ROI {roi} covers fewer than 2 grid nodes in some direction")
    wx = _block_weights(dom.Nx, ix, dom.dx)
    if dom.has_fix:
        wz_fix = _block_weights(dom.Nz, jz[jz <= dom.j0], dom.dz)
        wz_var = _block_weights(dom.Nz, jz[jz >= dom.j0], dom.dz)
    else:
        wz_fix, wz_var = np.zeros(dom.Nz), _block_weights(dom.Nz, jz, dom.dz)
    return wx, wz_fix, wz_var


def roi_weights(dom: ReferenceDomain, ell: BoundaryProfile, roi) -> np.ndarray:
    """Mapped quadrature weights of the ROI (reference-coordinate rectangle), zero outside"""
    wx, wz_fix, wz_var = _roi_blocks(dom, roi)
    r = np.asarray(ell.ell, dtype=float) / dom.ell0
    return wx[:, None] * (wz_fix[None, :] + r[:, None] * wz_var[None, :])


def roi_weights_derivative(dom: ReferenceDomain, dell: np.ndarray, roi) -> np.ndarray:
    wx, _, wz_var = _roi_blocks(dom, roi)
    return wx[:, None] * ((np.asarray(dell, dtype=float) / dom.ell0)[:, None] * wz_var[None, :])


@dataclass(eq=False)
class ObjectiveBreakdown:
    tracking_p: float
    tracking_w: float
    reg_g_time: float
    reg_g_space: float
    reg_h: float
    reg_ell: float
    theta: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.tracking_p + self.tracking_w + 0.5 * self.theta * (
            self.reg_g_time + self.reg_g_space + self.reg_h + self.reg_ell
        )

    def as_row(self) -> dict:
        return {
            "tracking_p": self.tracking_p, "tracking_w": self.tracking_w,
            "reg_g_time": self.reg_g_time, "reg_g_space": self.reg_g_space,
            "reg_h": self.reg_h, "reg_ell": self.reg_ell, "total": self.total,
        }


def _space_spec(settings: ObjectiveSettings, dom: ReferenceDomain) -> FractionalSpec:
    return FractionalSpec(s=settings.s_g, domain_tag="gamma_N", length=dom.Lx)


def _ell_spec(settings: ObjectiveSettings, dom: ReferenceDomain) -> FractionalSpec:
    return FractionalSpec(s=0.5 * settings.s_ell, domain_tag="B", length=dom.Lx)


def _second_time_difference(e: np.ndarray, dt: float) -> np.ndarray:
    return (e[2:] - 2.0 * e[1:-1] + e[:-2]) / dt**2


def _second_time_difference_T(y: np.ndarray, n_levels: int, dt: float) -> np.ndarray:
    out = np.zeros((n_levels,) + y.shape[1:])
    out[2:] += y
    out[1:-1] -= 2.0 * y
    out[:-2] += y
    return out / dt**2


def _first_time_difference_T(y: np.ndarray, n_levels: int, dt: float) -> np.ndarray:
    out = np.zeros((n_levels,) + y.shape[1:])
    out[1:] += y
    out[:-1] -= y
    return out / dt


def regularization_terms(controls: ControlVector, settings: ObjectiveSettings, dom: ReferenceDomain) -> dict:
    dt = controls.dt
    wx = dom.x_weights()
    wt = trapezoid_weights(controls.Nt + 1, dt)
    dev = controls.deviation()

    reg_g_time = 0.0
    if controls.Nt >= 2:
        reg_g_time = float(dt * np.sum(wx * _second_time_difference(dev.dg, dt) ** 2))
    A_g = fractional_neumann_apply(dev.dg, _space_spec(settings, dom))
    reg_g_space = float(np.einsum("t,x,tx->", wt, wx, A_g**2))
    reg_h = float(dt * np.sum(wx * (np.diff(dev.dh, axis=0) / dt) ** 2))
    A_ell = fractional_neumann_apply(dev.dell, _ell_spec(settings, dom))
    reg_ell = float(np.sum(wx * A_ell**2))
    return {"reg_g_time": reg_g_time, "reg_g_space": reg_g_space, "reg_h": reg_h, "reg_ell": reg_ell}


def tracking_terms(states: StateTrajectory, targets: Targets, ell: BoundaryProfile, roi) -> dict:
    dom = states.dom
    if targets.p_d.shape != states.pbar.shape or targets.w_d.shape != states.wtil.shape:
        raise ShapeMismatch(
            f"Targets {targets.p_d.shape}/{targets.w_d.shape} do not match states {states.pbar.shape}/{states.wtil.shape}"
        )
    wt = trapezoid_weights(states.Nt + 1, states.dt)
    W = roi_weights(dom, ell, roi)
    misfit_p = states.pressure - targets.p_d
    misfit_w = states.wtil - targets.w_d
    return {
        "tracking_p": 0.5 * float(np.einsum("t,xz,txz->", wt, W, misfit_p**2)),
        "tracking_w": 0.5 * float(np.einsum("t,x,tx->", wt, dom.x_weights(), misfit_w**2)),
    }


def eval_objective(controls: ControlVector, states: StateTrajectory, targets: Targets,
                   settings: ObjectiveSettings) -> ObjectiveBreakdown:
    dom = states.dom
    controls.check(dom)
    if controls.Nt != states.Nt:
        raise ShapeMismatch(f"Controls have {controls.Nt} steps, states {states.Nt}")
    return ObjectiveBreakdown(
        theta=settings.theta,
        **tracking_terms(states, targets, controls.ell, settings.roi),
        **regularization_terms(controls, settings, dom),
    )


def gradient_g(controls: ControlVector, mu_N: np.ndarray, settings: ObjectiveSettings, dom: ReferenceDomain,
               omega1: np.ndarray = None) -> np.ndarray:
    """theta (A_t* A_t + A_s* A_s)(g - g0) - omega1 mu_N, frozen layers projected out"""
    dt = controls.dt
    n_levels = controls.Nt + 1
    wt = trapezoid_weights(n_levels, dt)
    e = controls.g - controls.g0
    reg = fractional_neumann_apply(e, _space_spec(settings, dom).scaled(2.0))
    if n_levels >= 3:
        reg = reg + (dt / wt)[:, None] * _second_time_difference_T(_second_time_difference(e, dt), n_levels, dt)
    weight = np.ones(dom.Nx) if omega1 is None else np.asarray(omega1, dtype=float)
    grad = settings.theta * reg - weight[None, :] * np.asarray(mu_N, dtype=float)
    grad[:G_FROZEN_LAYERS] = 0.0
    return grad


def gradient_h(controls: ControlVector, vtil: np.ndarray, settings: ObjectiveSettings,
               params: PhysicalParams) -> np.ndarray:
    """theta A_h* A_h (h - h0) - (rho/kappa) vtil, first layer projected out"""
    dt = controls.dt
    n_levels = controls.Nt + 1
    wt = trapezoid_weights(n_levels, dt)
    e = controls.h - controls.h0
    reg = (dt / wt)[:, None] * _first_time_difference_T(np.diff(e, axis=0) / dt, n_levels, dt)
    grad = settings.theta * reg - params.plate_scale * np.asarray(vtil, dtype=float)
    grad[:H_FROZEN_LAYERS] = 0.0
    return grad


def _apply_levels(A, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return A.dot(values.reshape(values.shape[0], -1).T).T


def _pattern_pairing(A, U: np.ndarray, X: np.ndarray) -> float:
    """sum_k U[k] . (A X[k]) evaluated on the nonzeros of the sparse A"""
    coo = A.tocoo()
    if coo.nnz == 0:
        return 0.0
    return float(np.dot(coo.data, np.einsum("kj,kj->j", U[:, coo.row], X[:, coo.col])))


def gradient_ell(controls: ControlVector, states: StateTrajectory, adj, settings: ObjectiveSettings,
                 params: PhysicalParams, targets: Targets) -> np.ndarray:
    """
    Mapped shape gradient on B.

    The residual rows depend linearly on the operator derivatives, so one pass
    over the time levels collects the weighted products of multipliers and
    states; each free node of B then contributes through the sparse
    derivatives of the row weights, D2_ell, omega1 and M_ell alone. The ROI
    weight derivative adds the explicit part.
    """
    dom = states.dom
    Nt, dt = states.Nt, states.dt
    system = MappedSystem(params, dom, controls.ell, dt)
    tau = step_weights(Nt, dt)
    wt = trapezoid_weights(Nt + 1, dt)
    pb, vb, ab = states.ubar()
    pt, vt = states.flat("ptil"), states.flat("ptil_t")
    m_bar, m_til = adj.row_multipliers(params, system.interior)

    rows = tau[:, None] * (m_bar * system.pbar_rows(pb, vb, ab, controls.g)
                           + m_til * system.ptil_rows(states.ubar(), states.ut()))
    row_sum = rows.sum(axis=0)
    U_bar = tau[:, None] * system.ops.row_weights[None, :] * m_bar
    U_til = tau[:, None] * system.ops.row_weights[None, :] * m_til
    X_bar = -params.c**2 * pb - params.b * vb
    X_til = -params.c**2 * pt - params.b * vt
    neumann_sum = np.sum(U_bar * _apply_levels(system.G, controls.g), axis=0)
    misfit2 = np.einsum("t,txz->xz", wt, (states.pressure - targets.p_d) ** 2)

    raw = np.zeros(dom.Nx)
    for i in range(2, dom.Nx - 2):
        dell = np.zeros(dom.Nx)
        dell[i] = 1.0
        dops = system.derivative_operators(dell)
        raw[i] = (
            float(np.dot(dops.row_weights, row_sum))
            + _pattern_pairing(dops.laplacian, U_bar, X_bar) + _pattern_pairing(dops.laplacian, U_til, X_til)
            + _pattern_pairing(dops.boundary, U_bar, pb) + _pattern_pairing(dops.boundary, U_til, pt)
            - float(np.dot(dops.neumann_weight, neumann_sum))
            + 0.5 * float(np.sum(roi_weights_derivative(dom, dell, settings.roi) * misfit2))
        )

    dev = controls.ell.ell - controls.ell_prior.ell
    grad = raw / dom.x_weights() + settings.theta * fractional_neumann_apply(
        dev, _ell_spec(settings, dom).scaled(2.0)
    )
    grad[list(ELL_CLAMPED)] = 0.0
    return grad


def assemble_gradient(controls: ControlVector, states: StateTrajectory, adj, settings: ObjectiveSettings,
                      params: PhysicalParams, targets: Targets) -> ControlDirection:
    dom = states.dom
    coeffs = transform_coefficients(controls.ell, dom)
    return ControlDirection(
        dg=gradient_g(controls, adj.mu_N, settings, dom, omega1=coeffs.omega1),
        dh=gradient_h(controls, adj.vtil, settings, params),
        dell=gradient_ell(controls, states, adj, settings, params, targets),
    )


@dataclass(eq=False)
class BoundaryFormTerms:
    """Pieces of the boundary-integral shape derivative on B"""
    residual: np.ndarray
    regularization: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.residual + self.regularization + self.normal + self.curvature


def _top_conormal_rows(p: np.ndarray, system: MappedSystem, offset: int) -> np.ndarray:
    """Conormal stencil of the top edge evaluated `offset` rows below it; shape (levels, Nx)"""
    dom = system.dom
    j = dom.Nz - 1 - offset
    px = np.gradient(p[..., j], dom.dx, axis=-1, edge_order=2)
    pz = (3.0 * p[..., j] - 4.0 * p[..., j - 1] + p[..., j - 2]) / (2.0 * dom.dz)
    c = system.coeffs
    return (c.top_dx * px + c.top_dz * pz) / c.omega1


def shape_gradient_boundary_form(states: StateTrajectory, adj, controls: ControlVector,
                                 settings: ObjectiveSettings, params: PhysicalParams) -> BoundaryFormTerms:
    """
    Boundary-integral form of the ell-derivative, reported for comparison with gradient_ell.

    phi = int (d_nu pbar - g) mu_N dt is extended off Gamma_N by evaluating the
    conormal stencil on the rows below the top with g and mu_N held constant.
    """
    if states.dom.Nz < 5:
        raise ValidationError(f"Boundary form needs at least 5 z-nodes, grid has {states.dom.Nz}")
    dom = states.dom
    Nt, dt = states.Nt, states.dt
    system = MappedSystem(params, dom, controls.ell, dt)
    wt = trapezoid_weights(Nt + 1, dt)
    mu_N = np.asarray(adj.mu_N, dtype=float)

    phi_rows = [
        np.einsum("t,tx->x", wt, (_top_conormal_rows(states.pbar, system, k) - controls.g) * mu_N)
        for k in range(3)
    ]
    c = system.coeffs
    dphi_x = np.gradient(phi_rows[0], dom.dx, edge_order=2)
    dphi_z = (3.0 * phi_rows[0] - 4.0 * phi_rows[1] + phi_rows[2]) / (2.0 * dom.dz)
    normal = (c.top_dx * dphi_x + c.top_dz * dphi_z) / c.omega1
    curvature = phi_rows[0] * boundary_geometry(controls.ell).curvature

    shape = (Nt + 1,) + dom.shape
    ubar, ut = states.ubar(), states.ut()
    interior = system.interior
    res_bar = (interior * system.pbar_rows(*ubar, controls.g)).reshape(shape)
    res_til = (interior * system.ptil_rows(ubar, ut)).reshape(shape)
    residual = np.einsum(
        "t,tx->x", wt,
        edge_trace(res_bar, dom, "top") * edge_trace(adj.qbar, dom, "top")
        + edge_trace(res_til, dom, "top") * edge_trace(adj.qtil, dom, "top"),
    )
    dev = controls.ell.ell - controls.ell_prior.ell
    regularization = settings.theta * fractional_neumann_apply(dev, _ell_spec(settings, dom).scaled(2.0))

    terms = BoundaryFormTerms(residual=residual, regularization=regularization, normal=normal, curvature=curvature)
    for name in ("residual", "regularization", "normal", "curvature"):
        getattr(terms, name)[list(ELL_CLAMPED)] = 0.0
    return terms


@dataclass(eq=False)
class AgmonCheck:
    sup_norm: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.sup_norm <= self.bound * (1.0 + 1e-12)


def agmon_check(controls: ControlVector, settings: ObjectiveSettings, dom: ReferenceDomain) -> AgmonCheck:
    """sup_t |(g-g0)_t|^2_{H^s_g} against int |A_s (g-g0)_t|^2 + |(g-g0)_tt|^2 dt"""
    dt = controls.dt
    wx = dom.x_weights()
    wt = trapezoid_weights(controls.Nt + 1, dt)
    e_t = time_derivative(controls.g - controls.g0, dt)
    e_tt = time_derivative(e_t, dt)
    spec = _space_spec(settings, dom)
    half = fractional_neumann_apply(e_t, spec.scaled(0.5))
    full = fractional_neumann_apply(e_t, spec)
    sup_norm = float(np.max(np.sum(wx * half**2, axis=1)))
    bound = float(np.einsum("t,x,tx->", wt, wx, full**2 + e_tt**2))
    return AgmonCheck(sup_norm=sup_norm, bound=bound)
