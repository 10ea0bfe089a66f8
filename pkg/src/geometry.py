"""
Variable-top-boundary domain and method-of-mapping coefficients.

The physical domain is Omega(ell) = Omega_fix U Omega_var(ell) with
Omega_fix = (0, Lx) x (-H_fix, 0) and Omega_var(ell) = {(x, z): 0 < z < ell(x)}.
It is pulled back to the reference rectangle (0, Lx) x (-H_fix, ell0) through
z = (ell(x) / ell0) * zhat on Omega_var and the identity on Omega_fix.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .exceptions import GridTooCoarse, InadmissibleProfile, TraceViolation, ValidationError
from .utils import trapezoid_weights

logger = logging.getLogger(__name__)

TRACE_TOL = 1e-12


@dataclass(frozen=True)
class ReferenceDomain:
    """Tensor grid on B x [-H_fix, ell0]; nodes are shared across the z = 0 interface"""
    Lx: float
    H_fix: float
    ell0: float
    Nx: int
    Nz_fix: int
    Nz_var: int

    def __post_init__(self):
        if self.Lx <= 0 or self.ell0 <= 0 or self.H_fix < 0:
            raise ValidationError(
                f"Invalid reference domain: Lx={self.Lx}, ell0={self.ell0}, H_fix={self.H_fix}"
            )
        if self.Nx < 5:
            raise GridTooCoarse(f"Nx = {self.Nx} < 5 (the plate operator needs 5 nodes)")
        if self.Nz_var < 3:
            raise GridTooCoarse(f"Nz_var = {self.Nz_var} < 3")
        if self.H_fix > 0 and self.Nz_fix < 3:
            raise GridTooCoarse(f"Nz_fix = {self.Nz_fix} < 3 with H_fix = {self.H_fix}")
        if self.H_fix == 0 and self.Nz_fix != 1:
            raise ValidationError("H_fix = 0 requires Nz_fix = 1 (no fixed block)")
        if self.H_fix > 0:
            dz_fix = self.H_fix / (self.Nz_fix - 1)
            dz_var = self.ell0 / (self.Nz_var - 1)
            if abs(dz_fix - dz_var) > 1e-9 * dz_var:
                raise ValidationError(
                    f"Fixed and variable blocks need equal spacing (dz_fix={dz_fix:.6g}, dz_var={dz_var:.6g})"
                )

    @classmethod
    def from_total(cls, Lx: float, H_fix: float, ell0: float, Nx: int, Nz: int) -> "ReferenceDomain":
        """Split Nz total z-nodes between the two blocks so that the spacing is uniform"""
        if Nz < 3:
            raise GridTooCoarse(f"Nz = {Nz} < 3")
        dz = (H_fix + ell0) / (Nz - 1)
        cells_fix = H_fix / dz
        if abs(cells_fix - round(cells_fix)) > 1e-9 * max(1.0, cells_fix):
            raise ValidationError(
                f"Nz = {Nz} does not place a node on z = 0 (H_fix / dz = {cells_fix:.6g})"
            )
        Nz_fix = int(round(cells_fix)) + 1
        return cls(Lx=Lx, H_fix=H_fix, ell0=ell0, Nx=Nx, Nz_fix=Nz_fix, Nz_var=Nz - Nz_fix + 1)

    @property
    def has_fix(self) -> bool:
        return self.Nz_fix > 1

    @property
    def Nz(self) -> int:
        return self.Nz_fix + self.Nz_var - 1

    @property
    def shape(self):
        return (self.Nx, self.Nz)

    @property
    def n_nodes(self) -> int:
        return self.Nx * self.Nz

    @property
    def dx(self) -> float:
        return self.Lx / (self.Nx - 1)

    @property
    def dz(self) -> float:
        return self.ell0 / (self.Nz_var - 1)

    @property
    def j0(self) -> int:
        """z-index of the z = 0 interface"""
        return self.Nz_fix - 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.Lx, self.Nx)

    @property
    def z(self) -> np.ndarray:
        var = np.linspace(0.0, self.ell0, self.Nz_var)
        if not self.has_fix:
            return var
        fix = np.linspace(-self.H_fix, 0.0, self.Nz_fix)
        return np.concatenate([fix[:-1], var])

    @property
    def var_mask(self) -> np.ndarray:
        """Nodes carrying the Omega_var transformation (interface nodes belong to Omega_fix)"""
        j = np.arange(self.Nz)
        rows = j > self.j0 if self.has_fix else j >= 0
        return np.broadcast_to(rows[None, :], self.shape).copy()

    def z_weights(self):
        """Trapezoidal z-weights of the fixed and the variable block (zero outside each block)"""
        wz_fix = np.zeros(self.Nz)
        wz_var = np.zeros(self.Nz)
        if self.has_fix:
            wz_fix[: self.Nz_fix] = trapezoid_weights(self.Nz_fix, self.dz)
        wz_var[self.j0:] = trapezoid_weights(self.Nz_var, self.dz)
        return wz_fix, wz_var

    def x_weights(self) -> np.ndarray:
        return trapezoid_weights(self.Nx, self.dx)

    def index(self, i, j):
        """Flat node index in row-major (x, z) order"""
        return np.asarray(i) * self.Nz + np.asarray(j)

    @property
    def top_nodes(self) -> np.ndarray:
        i = np.arange(1, self.Nx - 1)
        return self.index(i, self.Nz - 1)

    @property
    def bottom_nodes(self) -> np.ndarray:
        i = np.arange(1, self.Nx - 1)
        return self.index(i, 0)

    @property
    def left_nodes(self) -> np.ndarray:
        return self.index(0, np.arange(self.Nz))

    @property
    def right_nodes(self) -> np.ndarray:
        return self.index(self.Nx - 1, np.arange(self.Nz))

    def node_masks(self) -> dict:
        """Flat boolean masks: interior, top (Gamma_N), bottom (Gamma_pl), side (Gamma_a incl. corners)"""
        n = self.n_nodes
        masks = {name: np.zeros(n, dtype=bool) for name in ("interior", "top", "bottom", "side")}
        masks["top"][self.top_nodes] = True
        masks["bottom"][self.bottom_nodes] = True
        masks["side"][self.left_nodes] = True
        masks["side"][self.right_nodes] = True
        masks["interior"] = ~(masks["top"] | masks["bottom"] | masks["side"])
        return masks

    def reference_profile(self) -> "BoundaryProfile":
        return BoundaryProfile(x=self.x, ell=np.full(self.Nx, self.ell0), ell0_ref=self.ell0)


@dataclass(frozen=True, eq=False)
class BoundaryProfile:
    x: np.ndarray
    ell: np.ndarray
    ell0_ref: float

    @property
    def deviation(self) -> np.ndarray:
        return self.ell - self.ell0_ref

    def with_values(self, ell) -> "BoundaryProfile":
        return BoundaryProfile(x=self.x, ell=np.asarray(ell, dtype=float), ell0_ref=self.ell0_ref)


@dataclass
class AdmissibilityReport:
    positivity: bool = True
    closeness: bool = True
    traces: bool = True
    max_deviation: float = 0.0
    bound: float = 0.0
    violations: List[str] = field(default_factory=list)

    @property
    def admissible(self) -> bool:
        return not self.violations

    @property
    def mappable(self) -> bool:
        """Positivity and closeness hold, so the transformation is a diffeomorphism"""
        return self.positivity and self.closeness


def validate_profile(ell: BoundaryProfile, dom: ReferenceDomain) -> AdmissibilityReport:
    """Check positivity, closeness to ell0 and the endpoint traces of ell - ell0"""
    values = np.asarray(ell.ell, dtype=float)
    report = AdmissibilityReport()
    if values.shape != (dom.Nx,):
        report.positivity = report.closeness = report.traces = False
        report.violations.append(f"shape: profile has {values.shape}, grid needs ({dom.Nx},)")
        return report

    deviation = values - dom.ell0
    report.max_deviation = float(np.max(np.abs(deviation)))
    report.bound = 0.5 * dom.ell0

    if np.min(values) <= 0:
        report.positivity = False
        report.violations.append(f"positivity: min(ell) = {np.min(values):.6g} <= 0")
    if report.max_deviation > report.bound * (1.0 + TRACE_TOL):
        report.closeness = False
        report.violations.append(
            f"closeness: ||ell - ell0||_inf = {report.max_deviation:.6g} > {report.bound:.6g}"
        )
    scale = TRACE_TOL * dom.ell0
    end_values = max(abs(deviation[0]), abs(deviation[-1]))
    end_slopes = max(abs(deviation[1] - deviation[0]), abs(deviation[-1] - deviation[-2]))
    if end_values > scale or end_slopes > scale:
        report.traces = False
        report.violations.append(
            f"endpoint traces: |ell - ell0| = {end_values:.3g}, |first difference| = {end_slopes:.3g} at the ends of B"
        )
    return report


def profile_derivatives(x: np.ndarray, values: np.ndarray):
    """First and second derivatives on B, centered inside and second-order one-sided at the ends"""
    values = np.asarray(values, dtype=float)
    h = x[1] - x[0]
    d1 = np.gradient(values, h, edge_order=2)
    d2 = np.empty_like(values)
    d2[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / h**2
    d2[0] = (2.0 * values[0] - 5.0 * values[1] + 4.0 * values[2] - values[3]) / h**2
    d2[-1] = (2.0 * values[-1] - 5.0 * values[-2] + 4.0 * values[-3] - values[-4]) / h**2
    return d1, d2


@dataclass(eq=False)
class MappedCoefficients:
    """
    Nodal coefficient fields of the mapped problem.

    The mapped Laplacian on non-interface nodes reads
        cxx*p_xx + cxz*p_xz + czz*p_zz + cz*p_z
    and on interface nodes p_xx + iface_lo*p[j0-1] + iface_mid*p[j0] + iface_hi*p[j0+1].
    top_dx/top_dz are the coefficients of p_x/p_z in omega1 * (nu . M grad p) on Gamma_0N.
    """
    ratio: np.ndarray
    omega0: np.ndarray
    inv_omega0: np.ndarray
    omega1: np.ndarray
    M: np.ndarray
    cxx: np.ndarray
    cxz: np.ndarray
    czz: np.ndarray
    cz: np.ndarray
    iface_lo: np.ndarray
    iface_mid: np.ndarray
    iface_hi: np.ndarray
    top_dx: np.ndarray
    top_dz: np.ndarray
    volume_weights: np.ndarray

    @property
    def d2_ingredients(self) -> dict:
        return {"xx": self.cxx, "xz": self.cxz, "zz": self.czz, "z": self.cz}


class MappedCoefficientsDerivative(MappedCoefficients):
    """Directional derivative of every MappedCoefficients field with respect to ell"""


def _check_mappable(ell: BoundaryProfile, dom: ReferenceDomain) -> AdmissibilityReport:
    report = validate_profile(ell, dom)
    if not report.mappable:
        raise InadmissibleProfile("Inadmissible profile: " + "; ".join(report.violations))
    if not report.traces:
        logger.debug(f"Profile violates endpoint traces: {report.violations}")
    return report


def transform_coefficients(ell: BoundaryProfile, dom: ReferenceDomain) -> MappedCoefficients:
    _check_mappable(ell, dom)
    values = np.asarray(ell.ell, dtype=float)
    ell0 = dom.ell0
    r = values / ell0
    d1, d2 = profile_derivatives(dom.x, values)
    rp, rpp = d1 / ell0, d2 / ell0

    var = dom.var_mask
    zhat = np.broadcast_to(dom.z[None, :], dom.shape)
    R = r[:, None]
    S = (rp / r)[:, None]
    Q = (rpp / r)[:, None]

    ones = np.ones(dom.shape)
    zeros = np.zeros(dom.shape)
    omega0 = np.where(var, 1.0 / R, 1.0)
    inv_omega0 = np.where(var, R * ones, 1.0)
    omega1 = np.sqrt(d1**2 + 1.0)

    M = np.zeros(dom.shape + (2, 2))
    M[..., 0, 0] = 1.0
    M[..., 0, 1] = np.where(var, -zhat * S, 0.0)
    M[..., 1, 1] = np.where(var, 1.0 / R, 1.0)

    cxz = np.where(var, -2.0 * zhat * S, zeros)
    czz = np.where(var, zhat**2 * S**2 + 1.0 / R**2, ones)
    cz = np.where(var, zhat * (2.0 * S**2 - Q), zeros)

    dz2 = dom.dz**2
    if dom.has_fix:
        iface_lo = 2.0 / ((1.0 + r) * dz2)
        iface_hi = 2.0 / ((1.0 + r) * r * dz2)
        iface_mid = -(iface_lo + iface_hi)
    else:
        iface_lo = iface_mid = iface_hi = np.zeros(dom.Nx)

    top_m12 = M[:, -1, 0, 1]
    top_m22 = M[:, -1, 1, 1]
    top_dx = -d1
    top_dz = -d1 * top_m12 + top_m22

    wz_fix, wz_var = dom.z_weights()
    volume_weights = dom.x_weights()[:, None] * (wz_fix[None, :] + R * wz_var[None, :])

    return MappedCoefficients(
        ratio=r, omega0=omega0, inv_omega0=inv_omega0, omega1=omega1, M=M,
        cxx=ones, cxz=cxz, czz=czz, cz=cz,
        iface_lo=iface_lo, iface_mid=iface_mid, iface_hi=iface_hi,
        top_dx=top_dx, top_dz=top_dz, volume_weights=volume_weights,
    )


def check_direction_traces(dell: np.ndarray, scale: float = 1.0):
    dell = np.asarray(dell, dtype=float)
    tol = TRACE_TOL * max(scale, float(np.max(np.abs(dell))) if dell.size else 0.0, 1e-300)
    ends = max(abs(dell[0]), abs(dell[-1]), abs(dell[1] - dell[0]), abs(dell[-1] - dell[-2]))
    if ends > tol:
        raise TraceViolation(
            f"Shape direction must vanish with its first difference at both ends of B (max end value {ends:.3g})"
        )


def coefficient_derivative(ell: BoundaryProfile, dell, dom: ReferenceDomain) -> MappedCoefficientsDerivative:
    """Exact directional derivatives of all mapped coefficients in the direction dell"""
    _check_mappable(ell, dom)
    dvalues = np.asarray(getattr(dell, "ell", dell), dtype=float)
    if dvalues.shape != (dom.Nx,):
        raise ValidationError(f"Shape direction has shape {dvalues.shape}, grid needs ({dom.Nx},)")
    check_direction_traces(dvalues, dom.ell0)

    values = np.asarray(ell.ell, dtype=float)
    ell0 = dom.ell0
    r = values / ell0
    d1, d2 = profile_derivatives(dom.x, values)
    rp, rpp = d1 / ell0, d2 / ell0
    dd1, dd2 = profile_derivatives(dom.x, dvalues)
    dr, drp, drpp = dvalues / ell0, dd1 / ell0, dd2 / ell0

    var = dom.var_mask
    zhat = np.broadcast_to(dom.z[None, :], dom.shape)
    R, dR = r[:, None], dr[:, None]
    S = (rp / r)[:, None]
    dS = (drp / r - rp * dr / r**2)[:, None]
    dQ = ((drpp * r - rpp * dr) / r**2)[:, None]

    zeros = np.zeros(dom.shape)
    domega0 = np.where(var, -dR / R**2, 0.0)
    dinv_omega0 = np.where(var, dR + zeros, 0.0)
    omega1 = np.sqrt(d1**2 + 1.0)
    domega1 = d1 * dd1 / omega1

    M = np.zeros(dom.shape + (2, 2))
    M[..., 0, 1] = np.where(var, -zhat * S, 0.0)
    M[..., 1, 1] = np.where(var, 1.0 / R, 1.0)
    dM = np.zeros(dom.shape + (2, 2))
    dM[..., 0, 1] = np.where(var, -zhat * dS, 0.0)
    dM[..., 1, 1] = np.where(var, -dR / R**2, 0.0)

    dcxz = np.where(var, -2.0 * zhat * dS, zeros)
    dczz = np.where(var, 2.0 * zhat**2 * S * dS - 2.0 * dR / R**3, zeros)
    dcz = np.where(var, zhat * (4.0 * S * dS - dQ), zeros)

    dz2 = dom.dz**2
    if dom.has_fix:
        diface_lo = -2.0 * dr / ((1.0 + r) ** 2 * dz2)
        diface_hi = -2.0 * (1.0 + 2.0 * r) * dr / ((r + r**2) ** 2 * dz2)
        diface_mid = -(diface_lo + diface_hi)
    else:
        diface_lo = diface_mid = diface_hi = np.zeros(dom.Nx)

    dtop_dx = -dd1
    dtop_dz = -dd1 * M[:, -1, 0, 1] - d1 * dM[:, -1, 0, 1] + dM[:, -1, 1, 1]

    _, wz_var = dom.z_weights()
    dvolume_weights = dom.x_weights()[:, None] * (dR * wz_var[None, :])

    return MappedCoefficientsDerivative(
        ratio=dr, omega0=domega0, inv_omega0=dinv_omega0, omega1=domega1, M=dM,
        cxx=zeros, cxz=dcxz, czz=dczz, cz=dcz,
        iface_lo=diface_lo, iface_mid=diface_mid, iface_hi=diface_hi,
        top_dx=dtop_dx, top_dz=dtop_dz, volume_weights=dvolume_weights,
    )


@dataclass(eq=False)
class BoundaryGeometry:
    sigma: np.ndarray
    nu: np.ndarray
    curvature: np.ndarray


def boundary_geometry(ell: BoundaryProfile) -> BoundaryGeometry:
    """sigma = sqrt(ell'^2 + 1), outward normal nu and curvature H = -sigma d/dx(ell'/sigma)"""
    x = np.asarray(ell.x, dtype=float)
    values = np.asarray(ell.ell, dtype=float)
    if np.min(values) <= 0:
        raise InadmissibleProfile(f"Inadmissible profile: positivity: min(ell) = {np.min(values):.6g} <= 0")
    slope = np.gradient(values, x, edge_order=2)
    sigma = np.sqrt(slope**2 + 1.0)
    nu = np.stack([-slope / sigma, 1.0 / sigma], axis=-1)
    curvature = -sigma * np.gradient(slope / sigma, x, edge_order=2)
    return BoundaryGeometry(sigma=sigma, nu=nu, curvature=curvature)


def physical_coordinates(dom: ReferenceDomain, ell: BoundaryProfile):
    """Physical (X, Z) of every reference node"""
    X = np.broadcast_to(dom.x[:, None], dom.shape).copy()
    zhat = np.broadcast_to(dom.z[None, :], dom.shape)
    r = (np.asarray(ell.ell, dtype=float) / dom.ell0)[:, None]
    Z = np.where(dom.var_mask, r * zhat, zhat)
    return X, Z


def reference_coordinates(dom: ReferenceDomain, ell: BoundaryProfile, X: np.ndarray, Z: np.ndarray):
    """Inverse of physical_coordinates for points with x on the B grid columns"""
    r = (np.asarray(ell.ell, dtype=float) / dom.ell0)[:, None]
    zhat = np.where(Z > 0, Z / r, Z)
    return np.array(X, dtype=float), zhat


def pull_back(func, dom: ReferenceDomain, ell: BoundaryProfile) -> np.ndarray:
    """Nodal reference field of a physical function func(x, z)"""
    X, Z = physical_coordinates(dom, ell)
    return np.asarray(func(X, Z), dtype=float) * np.ones(dom.shape)


def mapped_volume(coeffs: MappedCoefficients) -> float:
    return float(np.sum(coeffs.volume_weights))


def mapped_surface(coeffs: MappedCoefficients, dom: ReferenceDomain) -> float:
    return float(np.sum(dom.x_weights() * coeffs.omega1))
