"""
Backward-in-time adjoint of the continuous state system.

The adjoint equations are integrated in reversed time s = T - t with the
same average-acceleration Newmark scheme as the forward solve, so every step
is the forward step with the adjoint operators in place of the state ones.
qtil is solved monolithically with a plate potential u (vtil = u_t); qbar
follows from a linear step driven by qtil's accelerations and by the plate
coupling on Gamma_pl. Boundary multipliers are traces of the solution.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid

from .config import Config
from .exceptions import NonDegeneracyViolated, ShapeMismatch, SingularSystem, UnsupportedAbsorbingCoefficients
from .forward_solver import (
    MappedSystem, PhysicalParams, StateTrajectory, _factorize, _relative, _warn_step_residual,
)
from .geometry import BoundaryProfile, ReferenceDomain
from .objective import Targets, roi_weights
from .utils import time_derivative

logger = logging.getLogger(__name__)

ABSORBING_TOL = 1e-12


@dataclass(eq=False)
class AdjointTrajectory:
    """
    Adjoint fields in forward time.

    qbar, qtil: (Nt+1, Nx, Nz); vtil, mu_N, mu_pl: (Nt+1, Nx). mu_N and mu_pl
    are c^2 tr q - b tr q_t of qbar on Gamma_N and of qtil on Gamma_pl. All
    fields vanish at t = T.
    """
    qbar: np.ndarray
    qtil: np.ndarray
    vtil: np.ndarray
    mu_N: np.ndarray
    mu_pl: np.ndarray
    dt: float

    def scaled(self, factor: float) -> "AdjointTrajectory":
        return AdjointTrajectory(
            qbar=factor * self.qbar, qtil=factor * self.qtil, vtil=factor * self.vtil,
            mu_N=factor * self.mu_N, mu_pl=factor * self.mu_pl, dt=self.dt,
        )

    def row_multipliers(self, params: PhysicalParams, interior: np.ndarray):
        """
        Multipliers of the flat pbar and ptil rows: q on interior rows and
        c^2 q - b q_t on every boundary row.
        """
        boundary = np.asarray(interior) == 0
        out = []
        for field in (self.qbar, self.qtil):
            flat = np.array(field, dtype=float).reshape(field.shape[0], -1)
            edge = flat[:, boundary]
            flat[:, boundary] = params.c**2 * edge - params.b * time_derivative(edge, self.dt)
            out.append(flat)
        return tuple(out)


def check_absorbing_coefficients(params: PhysicalParams):
    if abs(params.beta_a - 1.0 / params.c) > ABSORBING_TOL * max(1.0, 1.0 / params.c) or params.gamma_a != 0:
        raise UnsupportedAbsorbingCoefficients(
            f"Adjoint needs beta_a = 1/c and gamma_a = 0 on Gamma_a, got beta_a={params.beta_a}, "
            f"gamma_a={params.gamma_a}, c={params.c}"
        )


class AdjointSystem:
    """
    Weighted adjoint rows of one reversed time level.

    Acoustic rows: lead * a - c^2 L q - b L v on the interior, N q on Gamma_N,
    N q + beta_a v on Gamma_a and c^2 N q + b N v + rho E aw on Gamma_pl.
    Plate rows: rho aw + delta D4 u + beta_pl K z - kappa E^T (c^2 q + b v),
    hinged ends aw = 0.
    """

    def __init__(self, system: MappedSystem):
        self.system = system
        pr = system.params
        W = sp.diags(system.ops.row_weights)
        Wp = sp.diags(system.plate_weights * system.plate_interior)
        L, N = system.ops.laplacian, system.ops.boundary
        bottom = system.bottom
        m = system.dom.Nx

        self.Fq = (W @ (-pr.c**2 * L + sp.diags(1.0 - bottom + pr.c**2 * bottom) @ N
                        + pr.gamma_a * sp.diags(system.side))).tocsr()
        self.Fv = (W @ (-pr.b * L + pr.beta_a * sp.diags(system.side) + pr.b * sp.diags(bottom) @ N)).tocsr()
        self.Faw = (pr.rho * (W @ system.E)).tocsr()
        self.Pq = (-pr.kappa * pr.c**2 * (Wp @ system.E.T)).tocsr()
        self.Pv = (-pr.kappa * pr.b * (Wp @ system.E.T)).tocsr()
        self.Pu = (pr.delta * (Wp @ system.D4)).tocsr()
        self.Pz = (pr.beta_pl * (Wp @ system.K)).tocsr() if system.K is not None else sp.csr_matrix((m, m))
        self.Paw = sp.diags(system.plate_weights * (pr.rho * system.plate_interior + system.plate_ends)).tocsr()
        self.W = system.ops.row_weights

        s = system
        self.K_bar = (s.beta2 * self.Fq + s.gamma1 * self.Fv + sp.diags(self.W * s.interior)).tocsc()
        self._lu_bar = None

    def mass(self, lead: np.ndarray) -> sp.dia_matrix:
        return sp.diags(self.W * self.system.interior * lead)

    def coupled_matrix(self, lead: np.ndarray) -> sp.csc_matrix:
        s = self.system
        acoustic = sp.hstack([s.beta2 * self.Fq + s.gamma1 * self.Fv + self.mass(lead), self.Faw])
        plate = sp.hstack([s.beta2 * self.Pq + s.gamma1 * self.Pv,
                           s.beta2 * self.Pu + s.gamma1 * self.Pz + self.Paw])
        return sp.vstack([acoustic, plate], format="csc")

    def coupled_rhs(self, q_star, v_star, u_star, z_star, acoustic_source, plate_source):
        return np.concatenate([
            -(self.Fq.dot(q_star) + self.Fv.dot(v_star) + acoustic_source),
            -(self.Pq.dot(q_star) + self.Pv.dot(v_star) + self.Pu.dot(u_star) + self.Pz.dot(z_star)
              + plate_source),
        ])

    def bar_factor(self):
        if self._lu_bar is None:
            self._lu_bar = _factorize(self.K_bar, "adjoint qbar step matrix")
        return self._lu_bar


def plate_memory(misfit_w: np.ndarray, params: PhysicalParams, dt: float) -> np.ndarray:
    """-(kappa/rho) int_t^T (wtil - w_d), indexed in reversed time"""
    accumulated = cumulative_trapezoid(misfit_w[::-1], dx=dt, axis=0, initial=0.0)
    return -accumulated / params.plate_scale


def solve_adjoint(params: PhysicalParams, states: StateTrajectory, targets: Targets, ell: BoundaryProfile,
                  dom: ReferenceDomain, roi) -> AdjointTrajectory:
    check_absorbing_coefficients(params)
    if states.margin <= Config.DEGENERACY_GUARD:
        raise NonDegeneracyViolated(states.margin, Config.DEGENERACY_GUARD)
    if states.pbar.shape[1:] != dom.shape:
        raise ShapeMismatch(f"State grid {states.pbar.shape[1:]} differs from {dom.shape}")
    if targets.p_d.shape != states.pbar.shape or targets.w_d.shape != states.wtil.shape:
        raise ShapeMismatch(
            f"Targets {targets.p_d.shape}/{targets.w_d.shape} do not match states {states.pbar.shape}"
        )

    Nt, dt = states.Nt, states.dt
    system = MappedSystem(params, dom, ell, dt)
    adjoint = AdjointSystem(system)
    n, m = system.n, dom.Nx
    interior = system.interior
    two_k = 2.0 * params.k

    # reversed time: index r holds forward level Nt - r
    pressure = states.flat("pbar")[::-1] + states.flat("ptil")[::-1]
    roi_source = interior * roi_weights(dom, ell, roi).ravel()
    source = (pressure - targets.p_d.reshape(Nt + 1, -1)[::-1]) * roi_source[None, :]
    memory = plate_memory(states.wtil - targets.w_d, params, dt) * system.plate_interior
    lead = 1.0 - two_k * pressure

    qt, vt, at = np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n))
    u, z, au = np.zeros((Nt + 1, m)), np.zeros((Nt + 1, m)), np.zeros((Nt + 1, m))
    qb, vb, ab = np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n)), np.zeros((Nt + 1, n))

    density = np.divide(source[0], adjoint.W, out=np.zeros(n), where=interior > 0)
    at[0] = -density / lead[0]
    ab[0] = -density + interior * two_k * pressure[0] * at[0]
    lu_bar = adjoint.bar_factor()

    for r in range(Nt):
        k = r + 1
        q_star, v_star = system.predict(qt[r], vt[r], at[r])
        u_star, z_star = system.predict(u[r], z[r], au[r])
        A = adjoint.coupled_matrix(lead[k])
        rhs = adjoint.coupled_rhs(q_star, v_star, u_star, z_star, source[k], system.plate_weights * memory[k])
        y = _factorize(A, f"adjoint step {k}").solve(rhs)
        if not np.all(np.isfinite(y)):
            raise SingularSystem(f"Adjoint step {k} produced non-finite values")
        _warn_step_residual(_relative(A.dot(y) - rhs, rhs), k, "adjoint qtil")
        at[k], au[k] = y[:n], y[n:]
        qt[k], vt[k] = system.correct(q_star, v_star, at[k])
        u[k], z[k] = system.correct(u_star, z_star, au[k])

        q_star, v_star = system.predict(qb[r], vb[r], ab[r])
        coupling = adjoint.W * interior * two_k * pressure[k] * at[k]
        rhs = -(adjoint.Fq.dot(q_star) + adjoint.Fv.dot(v_star) + adjoint.Faw.dot(au[k]) + source[k] - coupling)
        ab[k] = lu_bar.solve(rhs)
        if not np.all(np.isfinite(ab[k])):
            raise SingularSystem(f"Adjoint qbar step {k} produced non-finite values")
        _warn_step_residual(_relative(adjoint.K_bar.dot(ab[k]) - rhs, rhs), k, "adjoint qbar")
        qb[k], vb[k] = system.correct(q_star, v_star, ab[k])

    shape = (Nt + 1,) + dom.shape
    adj = AdjointTrajectory(
        qbar=qb[::-1].reshape(shape), qtil=qt[::-1].reshape(shape),
        vtil=-z[::-1] * system.plate_interior,
        mu_N=np.zeros((Nt + 1, m)), mu_pl=np.zeros((Nt + 1, m)), dt=dt,
    )
    adj.mu_N, adj.mu_pl = extract_multipliers(adj, params, dom)
    logger.debug(
        f"Adjoint: {Nt} reversed steps, max |qbar| = {np.max(np.abs(qb)):.3e}, "
        f"max |qtil| = {np.max(np.abs(qt)):.3e}"
    )
    return adj


def extract_multipliers(adj: AdjointTrajectory, params: PhysicalParams, dom: ReferenceDomain):
    """
    c^2 tr q - b tr q_t on Gamma_N (qbar) and on Gamma_pl (qtil).

    Traces are the boundary-node values; the time derivative is centered with
    second-order one-sided ends. Corner entries are zero.
    """
    out = []
    for field, nodes in ((adj.qbar, dom.top_nodes), (adj.qtil, dom.bottom_nodes)):
        trace = np.asarray(field, dtype=float).reshape(field.shape[0], -1)[:, nodes]
        mu = np.zeros((trace.shape[0], dom.Nx))
        mu[:, 1:-1] = params.c**2 * trace - params.b * time_derivative(trace, adj.dt)
        out.append(mu)
    return tuple(out)
