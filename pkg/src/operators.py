"""
Sparse finite-difference operators on the reference grid.

Every assembler is polymorphic over MappedCoefficients and
MappedCoefficientsDerivative: fed with coefficient derivatives it returns the
directional derivative of the operator, which is what the shape gradient and
the linearized solver need.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import fft

from .exceptions import GridTooCoarse, ShapeMismatch, UnknownEdge
from .geometry import MappedCoefficients, MappedCoefficientsDerivative, ReferenceDomain

logger = logging.getLogger(__name__)

EDGES = {
    "top": "top", "gamma_N": "top",
    "bottom": "bottom", "gamma_pl": "bottom",
    "left": "left", "right": "right",
}


class _Triplets:
    """COO accumulator; duplicates are summed on conversion"""

    def __init__(self, n_rows: int, n_cols: int = None):
        self.shape = (n_rows, n_rows if n_cols is None else n_cols)
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())
        self.vals.append(vals.ravel())

    def build(self) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix(self.shape)
        A = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=self.shape,
        ).tocsr()
        A.eliminate_zeros()
        A.sort_indices()
        return A


def assemble_mapped_operator(coeffs: MappedCoefficients, dom: ReferenceDomain, scale: float = 1.0) -> sp.csr_matrix:
    """
    scale * D2_ell on interior nodes; boundary rows are left empty.

    Pass scale = c^2 or b for the two terms of the acoustic operator.
    """
    Nx, Nz = dom.shape
    dx, dz = dom.dx, dom.dz
    I, J = np.meshgrid(np.arange(1, Nx - 1), np.arange(1, Nz - 1), indexing="ij")
    iface = (J == dom.j0) if dom.has_fix else np.zeros(I.shape, dtype=bool)
    row = dom.index(I, J)
    trip = _Triplets(dom.n_nodes)

    hx = scale / dx**2
    cxx = coeffs.cxx[I, J] * hx
    trip.add(row, dom.index(I + 1, J), cxx)
    trip.add(row, dom.index(I - 1, J), cxx)
    trip.add(row, row, -2.0 * cxx)

    Ir, Jr, rr = I[~iface], J[~iface], row[~iface]
    czz = coeffs.czz[Ir, Jr] * (scale / dz**2)
    cz = coeffs.cz[Ir, Jr] * (scale / (2.0 * dz))
    cxz = coeffs.cxz[Ir, Jr] * (scale / (4.0 * dx * dz))
    trip.add(rr, dom.index(Ir, Jr + 1), czz + cz)
    trip.add(rr, dom.index(Ir, Jr - 1), czz - cz)
    trip.add(rr, rr, -2.0 * czz)
    trip.add(rr, dom.index(Ir + 1, Jr + 1), cxz)
    trip.add(rr, dom.index(Ir - 1, Jr - 1), cxz)
    trip.add(rr, dom.index(Ir + 1, Jr - 1), -cxz)
    trip.add(rr, dom.index(Ir - 1, Jr + 1), -cxz)

    if iface.any():
        Ii, Ji, ri = I[iface], J[iface], row[iface]
        trip.add(ri, dom.index(Ii, Ji - 1), scale * coeffs.iface_lo[Ii])
        trip.add(ri, ri, scale * coeffs.iface_mid[Ii])
        trip.add(ri, dom.index(Ii, Ji + 1), scale * coeffs.iface_hi[Ii])

    return trip.build()


def assemble_boundary_operator(coeffs: MappedCoefficients, dom: ReferenceDomain) -> sp.csr_matrix:
    """
    Conormal rows on boundary nodes, second-order one-sided in the normal direction.

    Top rows carry omega1 * (nu . M grad p); bottom and side rows carry the
    outward (n . M grad p). Interior rows are empty.
    """
    Nx, Nz = dom.shape
    dx, dz = dom.dx, dom.dz
    M = coeffs.M
    trip = _Triplets(dom.n_nodes)

    i = np.arange(1, Nx - 1)
    # top: centered in x, backward in z
    row = dom.index(i, Nz - 1)
    tx = coeffs.top_dx[i] / (2.0 * dx)
    tz = coeffs.top_dz[i] / (2.0 * dz)
    trip.add(row, dom.index(i + 1, Nz - 1), tx)
    trip.add(row, dom.index(i - 1, Nz - 1), -tx)
    trip.add(row, row, 3.0 * tz)
    trip.add(row, dom.index(i, Nz - 2), -4.0 * tz)
    trip.add(row, dom.index(i, Nz - 3), tz)

    # bottom: outward normal (0, -1), forward in z
    row = dom.index(i, 0)
    bz = -M[i, 0, 1, 1] / (2.0 * dz)
    trip.add(row, row, -3.0 * bz)
    trip.add(row, dom.index(i, 1), 4.0 * bz)
    trip.add(row, dom.index(i, 2), -bz)

    j = np.arange(Nz)
    jc = np.arange(1, Nz - 1)
    for col, sign, inward in ((0, -1.0, 1), (Nx - 1, 1.0, -1)):
        row = dom.index(col, j)
        # d/dx one-sided into the domain; inward = +1 forward, -1 backward
        ax = sign * M[col, :, 0, 0] * (-inward) / (2.0 * dx)
        trip.add(row, row, 3.0 * ax)
        trip.add(row, dom.index(col + inward, j), -4.0 * ax)
        trip.add(row, dom.index(col + 2 * inward, j), ax)

        az = sign * M[col, :, 0, 1]
        rc = dom.index(col, jc)
        trip.add(rc, dom.index(col, jc + 1), az[jc] / (2.0 * dz))
        trip.add(rc, dom.index(col, jc - 1), -az[jc] / (2.0 * dz))
        r0, rN = dom.index(col, 0), dom.index(col, Nz - 1)
        trip.add(r0, r0, -3.0 * az[0] / (2.0 * dz))
        trip.add(r0, dom.index(col, 1), 4.0 * az[0] / (2.0 * dz))
        trip.add(r0, dom.index(col, 2), -az[0] / (2.0 * dz))
        trip.add(rN, rN, 3.0 * az[-1] / (2.0 * dz))
        trip.add(rN, dom.index(col, Nz - 2), -4.0 * az[-1] / (2.0 * dz))
        trip.add(rN, dom.index(col, Nz - 3), az[-1] / (2.0 * dz))

    return trip.build()


def _edge_nodes(dom: ReferenceDomain, edge: str) -> np.ndarray:
    if edge not in EDGES:
        raise UnknownEdge(f"Unknown edge '{edge}' (expected one of {sorted(EDGES)})")
    return {
        "top": dom.top_nodes, "bottom": dom.bottom_nodes,
        "left": dom.left_nodes, "right": dom.right_nodes,
    }[EDGES[edge]]


def conormal_trace(field: np.ndarray, coeffs: MappedCoefficients, dom: ReferenceDomain, edge: str) -> np.ndarray:
    """
    Outward normal derivative on one edge.

    Top and bottom return the Nx-2 edge-interior nodes (corners belong to the
    sides); left and right return all Nz nodes.
    """
    nodes = _edge_nodes(dom, edge)
    field = np.asarray(field, dtype=float)
    if field.shape != dom.shape:
        raise ShapeMismatch(f"Field has shape {field.shape}, grid is {dom.shape}")
    values = assemble_boundary_operator(coeffs, dom) @ field.ravel()
    values = values[nodes]
    if EDGES[edge] == "top":
        values = values / coeffs.omega1[1:-1]
    return values


def edge_trace(field: np.ndarray, dom: ReferenceDomain, edge: str) -> np.ndarray:
    """Linear extrapolation of the first two interior layers onto top or bottom; shape (..., Nx)"""
    _edge_nodes(dom, edge)
    f = np.asarray(field, dtype=float)
    if EDGES[edge] == "top":
        return 2.0 * f[..., -2] - f[..., -3]
    if EDGES[edge] == "bottom":
        return 2.0 * f[..., 1] - f[..., 2]
    raise UnknownEdge(f"Extrapolated traces are defined on top and bottom only, got '{edge}'")


def physical_gradient(field: np.ndarray, coeffs: MappedCoefficients, dom: ReferenceDomain):
    """(d/dx, d/dz) of a reference field in physical coordinates; field shape (..., Nx, Nz)"""
    f = np.asarray(field, dtype=float)
    px = np.gradient(f, dom.dx, axis=-2, edge_order=2)
    pz = np.gradient(f, dom.dz, axis=-1, edge_order=2)
    return px + coeffs.M[..., 0, 1] * pz, coeffs.M[..., 1, 1] * pz


def row_weights(coeffs: MappedCoefficients, dom: ReferenceDomain) -> np.ndarray:
    """
    Quadrature weight of every residual row (flat).

    Interior rows use the mapped volume weight, side rows the z-weight of their
    column, top and bottom rows the x-weight.
    """
    vw = coeffs.volume_weights
    wx = dom.x_weights()
    w = np.array(vw, dtype=float)
    w[0, :] = vw[0, :] / wx[0]
    w[-1, :] = vw[-1, :] / wx[-1]
    edge = 0.0 if isinstance(coeffs, MappedCoefficientsDerivative) else wx[1:-1]
    w[1:-1, 0] = edge
    w[1:-1, -1] = edge
    return w.ravel()


def boundary_selection(dom: ReferenceDomain, edge: str) -> sp.csr_matrix:
    """(n_nodes x Nx) matrix placing an edge function on its top or bottom nodes; corners stay empty"""
    nodes = _edge_nodes(dom, edge)
    if EDGES[edge] not in ("top", "bottom"):
        raise UnknownEdge(f"Edge functions live on top or bottom, got '{edge}'")
    cols = np.arange(1, dom.Nx - 1)
    return sp.csr_matrix((np.ones(cols.size), (nodes, cols)), shape=(dom.n_nodes, dom.Nx))


@dataclass(eq=False)
class AcousticOperators:
    """Spatial pieces of one acoustic residual; a derivative bundle when built from coefficient derivatives"""
    laplacian: sp.csr_matrix
    boundary: sp.csr_matrix
    row_weights: np.ndarray
    neumann_weight: np.ndarray


def assemble_acoustic_operators(coeffs: MappedCoefficients, dom: ReferenceDomain) -> AcousticOperators:
    neumann_weight = np.zeros(dom.n_nodes)
    neumann_weight[dom.top_nodes] = coeffs.omega1[1:-1]
    return AcousticOperators(
        laplacian=assemble_mapped_operator(coeffs, dom),
        boundary=assemble_boundary_operator(coeffs, dom),
        row_weights=row_weights(coeffs, dom),
        neumann_weight=neumann_weight,
    )


def hinged_second_difference(n: int, h: float) -> sp.csr_matrix:
    """Second difference on the n-2 interior nodes with w = 0 at both ends; end rows/cols empty"""
    if n < 5:
        raise GridTooCoarse(f"Plate grid has {n} nodes, at least 5 are needed")
    m = n - 2
    inner = sp.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / h**2
    return sp.block_diag((sp.csr_matrix((1, 1)), inner, sp.csr_matrix((1, 1))), format="csr")


def assemble_plate_bilaplacian(dom: ReferenceDomain) -> sp.csr_matrix:
    """Hinged fourth difference (second difference squared), scaled 1/dx^4"""
    L = hinged_second_difference(dom.Nx, dom.dx)
    return (L @ L).tocsr()


def hinged_fractional_power(n: int, h: float, gamma: float) -> sp.csr_matrix:
    """(-Delta_hinged)^gamma through the sine eigenbasis; end rows/cols empty"""
    if n < 5:
        raise GridTooCoarse(f"Plate grid has {n} nodes, at least 5 are needed")
    m = n - 2
    k = np.arange(1, m + 1)
    lam = (2.0 - 2.0 * np.cos(np.pi * k / (n - 1))) / h**2
    dense = fft.idst(lam[:, None] ** gamma * fft.dst(np.eye(m), type=1, axis=0), type=1, axis=0)
    dense = 0.5 * (dense + dense.T)
    zero = sp.csr_matrix((1, 1))
    return sp.block_diag((zero, sp.csr_matrix(dense), zero), format="csr")


@dataclass(frozen=True)
class FractionalSpec:
    """(-Delta_N + id)^s on a uniform nodal grid of the given length"""
    s: float
    domain_tag: str
    length: float

    def inverse(self) -> "FractionalSpec":
        return FractionalSpec(s=-self.s, domain_tag=self.domain_tag, length=self.length)

    def scaled(self, factor: float) -> "FractionalSpec":
        return FractionalSpec(s=self.s * factor, domain_tag=self.domain_tag, length=self.length)


def neumann_eigenvalues(n: int, h: float) -> np.ndarray:
    """Eigenvalues of minus the discrete Neumann second difference on n nodes"""
    k = np.arange(n)
    return (2.0 - 2.0 * np.cos(np.pi * k / (n - 1))) / h**2


def fractional_neumann_apply(field: np.ndarray, spec: FractionalSpec) -> np.ndarray:
    """Apply (-Delta_N + id)^s along the last axis via DCT-I"""
    f = np.asarray(field, dtype=float)
    n = f.shape[-1]
    if n < 2:
        raise ShapeMismatch(f"Fractional operator needs at least 2 nodes on {spec.domain_tag}, got {n}")
    if spec.s == 0:
        return f.copy()
    h = spec.length / (n - 1)
    factor = (neumann_eigenvalues(n, h) + 1.0) ** spec.s
    return fft.idct(factor * fft.dct(f, type=1, axis=-1), type=1, axis=-1)
