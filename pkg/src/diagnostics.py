"""
Energy monitoring and the verification oracles.

The finite-difference oracle only evaluates the reduced objective through
forward solves; this module does not import the adjoint solver.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid

from .exceptions import ValidationError
from .forward_solver import MappedSystem, PhysicalParams, StateTrajectory, solve_linearized
from .objective import ControlDirection, ControlVector, project_tangent
from .operators import (
    FractionalSpec, fractional_neumann_apply, hinged_fractional_power, hinged_second_difference, physical_gradient,
)
from .utils import loglog_slope, time_derivative, trapezoid_weights

logger = logging.getLogger(__name__)

PLATEAU_TOL = 1e-3
TAYLOR_TAUS = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)


@dataclass(eq=False)
class EnergyRecord:
    """Energy sub-terms at one time level"""
    t: float
    pbar: Dict[str, float]
    ptil: Dict[str, float]
    plate: Dict[str, float]
    data_norm: float

    @property
    def E_pbar(self) -> float:
        return float(sum(self.pbar.values()))

    @property
    def E_ptil(self) -> float:
        return float(sum(self.ptil.values()))

    @property
    def E_w(self) -> float:
        return float(sum(self.plate.values()))

    @property
    def total(self) -> float:
        return self.E_pbar + self.E_ptil + self.E_w

    def as_row(self) -> dict:
        row = {"t": self.t}
        row.update({f"pbar_{k}": v for k, v in self.pbar.items()})
        row.update({f"ptil_{k}": v for k, v in self.ptil.items()})
        row.update(self.plate)
        row.update({"E_pbar": self.E_pbar, "E_ptil": self.E_ptil, "E_w": self.E_w, "total": self.total,
                    "data_norm": self.data_norm})
        return row


def energy_frame(records: Sequence[EnergyRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in records])


def _cumulative(values: np.ndarray, dt: float) -> np.ndarray:
    return cumulative_trapezoid(values, dx=dt, initial=0.0)


class _EnergyQuadrature:
    """Mapped volume, Gamma_a and plate norms of one trajectory"""

    def __init__(self, system: MappedSystem):
        self.system = system
        dom = system.dom
        vw = system.coeffs.volume_weights
        wx = dom.x_weights()
        self.vw = vw.ravel()
        self.interior = system.interior
        side = np.zeros(dom.shape)
        side[0, :] = vw[0, :] / wx[0]
        side[-1, :] = vw[-1, :] / wx[-1]
        self.side_weights = side.ravel()
        self.wx = wx

    def volume(self, flat: np.ndarray) -> np.ndarray:
        return flat**2 @ self.vw

    def laplacian(self, flat: np.ndarray) -> np.ndarray:
        lap = self.system.ops.laplacian.dot(flat.T).T * self.interior
        return lap**2 @ self.vw

    def gradient(self, field: np.ndarray) -> np.ndarray:
        px, pz = physical_gradient(field, self.system.coeffs, self.system.dom)
        n = field.shape[0]
        return (px.reshape(n, -1) ** 2 + pz.reshape(n, -1) ** 2) @ self.vw

    def absorbing(self, flat: np.ndarray) -> np.ndarray:
        return flat**2 @ self.side_weights

    def plate(self, values: np.ndarray) -> np.ndarray:
        return values**2 @ self.wx


def _pressure_terms(q: _EnergyQuadrature, p, p_t, p_tt, params: PhysicalParams, dt: float) -> Dict[str, np.ndarray]:
    n = p.shape[0]
    flat_t, flat_tt = p_t.reshape(n, -1), p_tt.reshape(n, -1)
    return {
        "acceleration": _cumulative(q.volume(flat_tt), dt),
        "velocity_h1": q.volume(flat_t) + q.gradient(p_t),
        "laplacian": q.laplacian(p.reshape(n, -1)),
        "viscous": params.b * _cumulative(q.laplacian(flat_t), dt),
        "absorbing_acc": params.beta_a * _cumulative(q.absorbing(flat_tt), dt),
        "absorbing_vel": 0.5 * params.gamma_a * q.absorbing(flat_t),
    }


def data_norm(g: np.ndarray, h: np.ndarray, system: MappedSystem, s_g: float, dt: float) -> float:
    """Squared data norm of (g, h) with the omega1 surface weight on Gamma_N"""
    dom, params = system.dom, system.params
    g = np.asarray(g, dtype=float)
    h = np.asarray(h, dtype=float)
    wt = trapezoid_weights(g.shape[0], dt)
    wN = dom.x_weights() * system.coeffs.omega1
    wpl = dom.x_weights()

    spec = FractionalSpec(s=0.5 * s_g, domain_tag="gamma_N", length=dom.Lx)
    g_space = float(np.einsum("t,x,tx->", wt, wN, fractional_neumann_apply(g, spec) ** 2))
    g_t = time_derivative(g, dt)
    g_tt = time_derivative(g_t, dt)
    g_time = float(np.einsum("t,x,tx->", wt, wN, g_t**2 + g_tt**2))
    h_t = time_derivative(h, dt)
    total = g_space + g_time + float(np.dot(wt, np.sqrt(h_t**2 @ wpl)))
    if params.beta_pl > 0:
        smooth = hinged_fractional_power(dom.Nx, dom.dx, -params.gamma_pl).dot(h_t.T).T
        total += float(np.einsum("t,x,tx->", wt, wpl, h_t * smooth))
    return total


def energy_series(states: StateTrajectory, params: PhysicalParams, g=None, h=None,
                  s_g: float = 0.5) -> List[EnergyRecord]:
    """Energy of (pbar, ptil, wtil_t) at every time level"""
    dom, dt = states.dom, states.dt
    system = MappedSystem(params, dom, states.ell, dt)
    q = _EnergyQuadrature(system)
    g = states.g if g is None else g
    h = states.h if h is None else h
    g = np.zeros((states.Nt + 1, dom.Nx)) if g is None else g
    h = np.zeros((states.Nt + 1, dom.Nx)) if h is None else h

    bar = _pressure_terms(q, states.pbar, states.pbar_t, states.pbar_tt, params, dt)
    til = _pressure_terms(q, states.ptil, states.ptil_t, states.ptil_tt, params, dt)

    # plate energy of ww = wtil_t
    ww, ww_t = states.wtil_t, states.wtil_tt
    L = hinged_second_difference(dom.Nx, dom.dx)
    plate = {
        "plate_acceleration": q.plate(ww_t),
        "plate_bending": q.plate(L.dot(ww.T).T),
        "plate_damping": np.zeros(states.Nt + 1),
    }
    if params.beta_pl > 0:
        half = hinged_fractional_power(dom.Nx, dom.dx, 0.5 * params.gamma_pl)
        plate["plate_damping"] = params.beta_pl * _cumulative(q.plate(half.dot(ww_t.T).T), dt)

    norm = data_norm(g, h, system, s_g, dt)
    records = []
    for n in range(states.Nt + 1):
        records.append(EnergyRecord(
            t=n * dt,
            pbar={k: float(v[n]) for k, v in bar.items()},
            ptil={k: float(v[n]) for k, v in til.items()},
            plate={k: float(v[n]) for k, v in plate.items()},
            data_norm=norm,
        ))
    return records


def energy_ratio(records: Sequence[EnergyRecord]) -> float:
    """max_t E(t) / (E(0) + |data|^2)"""
    denominator = records[0].total + records[0].data_norm
    if denominator <= 0:
        return 0.0 if max(r.total for r in records) == 0 else float("inf")
    return max(r.total for r in records) / denominator


@dataclass(eq=False)
class EnergyIdentity:
    t: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def defect(self) -> float:
        scale = max(float(np.max(np.abs(self.lhs))), float(np.max(np.abs(self.rhs))), 1e-300)
        return float(np.max(np.abs(self.lhs - self.rhs))) / scale


def energy_identity_defect(states: StateTrajectory, params: PhysicalParams, g=None) -> EnergyIdentity:
    """
    Both sides of the pbar energy identity obtained by testing with -Delta pbar_t:
    1/2|grad pbar_t|^2 + c^2/2|Delta pbar|^2 + b int|Delta pbar_t|^2 + absorbing terms
    against int int_{Gamma_N} pbar_tt g_t.
    """
    dom, dt = states.dom, states.dt
    g = states.g if g is None else g
    if g is None:
        raise ValidationError("The energy identity needs the Neumann control g")
    system = MappedSystem(params, dom, states.ell, dt)
    q = _EnergyQuadrature(system)
    n = states.Nt + 1
    flat = states.flat("pbar")
    flat_t, flat_tt = states.flat("pbar_t"), states.flat("pbar_tt")

    lhs = (
        0.5 * q.gradient(states.pbar_t)
        + 0.5 * params.c**2 * q.laplacian(flat)
        + params.b * _cumulative(q.laplacian(flat_t), dt)
        + params.beta_a * _cumulative(q.absorbing(flat_tt), dt)
        + 0.5 * params.gamma_a * q.absorbing(flat_t)
    )
    wN = dom.x_weights() * system.coeffs.omega1
    flux = np.sum(wN * states.pbar_tt[:, :, -1] * time_derivative(g, dt), axis=1)
    rhs = _cumulative(flux, dt)
    return EnergyIdentity(t=np.arange(n) * dt, lhs=lhs, rhs=rhs)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def random_directions(controls: ControlVector, dom, count: int, seed: int = 0,
                      components: Sequence[str] = ("g", "h", "ell")) -> List[ControlDirection]:
    """Smooth admissible-tangent directions built from a few random modes"""
    rng = np.random.default_rng(seed)
    Nt = controls.Nt
    t = np.linspace(0.0, 1.0, Nt + 1)
    xi = dom.x / dom.Lx
    envelope = np.sin(np.pi * t) ** 2
    bump = np.sin(np.pi * xi) ** 4
    directions = []
    for _ in range(count):
        parts = {}
        for name in ("g", "h"):
            a = rng.standard_normal(3)
            shape = a[0] + a[1] * np.cos(np.pi * xi) + a[2] * np.cos(2.0 * np.pi * xi)
            parts[name] = np.outer(envelope, shape) if name in components else np.zeros((Nt + 1, dom.Nx))
        a = rng.standard_normal(2)
        dell = bump * (a[0] + a[1] * np.cos(np.pi * xi)) * dom.ell0 if "ell" in components else np.zeros(dom.Nx)
        directions.append(project_tangent(ControlDirection(dg=parts["g"], dh=parts["h"], dell=dell)))
    return directions


@dataclass(eq=False)
class FDResult:
    taus: np.ndarray
    values: np.ndarray
    plateau_value: float
    plateau_tau: float
    on_plateau: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _objective_or_nan(problem, controls: ControlVector) -> float:
    try:
        return problem.objective(controls)
    except ValidationError as e:
        logger.warning(f"Finite-difference evaluation left the admissible set: {e}")
        return float("nan")


def plateau(taus: np.ndarray, values: np.ndarray):
    """Value where consecutive step sizes agree best, and which steps agree with it"""
    finite = np.isfinite(values)
    if finite.sum() == 0:
        return float("nan"), float("nan"), np.zeros(values.size, dtype=bool)
    best, best_rel = int(np.flatnonzero(finite)[-1]), np.inf
    for i in range(values.size - 1):
        if not (finite[i] and finite[i + 1]):
            continue
        scale = max(abs(values[i]), abs(values[i + 1]), 1e-300)
        rel = abs(values[i] - values[i + 1]) / scale
        if rel < best_rel:
            best, best_rel = i + 1, rel
    value = float(values[best])
    on = finite & (np.abs(values - value) <= PLATEAU_TOL * max(abs(value), 1e-300))
    return value, float(taus[best]), on


def fd_gradient_oracle(problem, controls: ControlVector, directions: Sequence[ControlDirection],
                       tau_list: Sequence[float], jobs: int = 1) -> List[FDResult]:
    """Central differences (J(u + tau d) - J(u - tau d)) / 2 tau per direction and tau"""
    taus = np.array(sorted(tau_list, reverse=True), dtype=float)
    tasks = []
    for d in directions:
        for tau in taus:
            tasks.append(controls.moved(d, tau))
            tasks.append(controls.moved(d, -tau))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            futures = {executor.submit(_objective_or_nan, problem, c): i for i, c in enumerate(tasks)}
            values = [None] * len(tasks)
            for future, i in futures.items():
                values[i] = future.result()
    else:
        values = [_objective_or_nan(problem, c) for c in tasks]

    values = np.array(values).reshape(len(directions), taus.size, 2)
    results = []
    for k in range(len(directions)):
        quotients = (values[k, :, 0] - values[k, :, 1]) / (2.0 * taus)
        value, tau, on = plateau(taus, quotients)
        results.append(FDResult(taus=taus, values=quotients, plateau_value=value, plateau_tau=tau, on_plateau=on))
        logger.debug(f"FD direction {k}: plateau {value:.10e} at tau = {tau:.1e}")
    return results


@dataclass(eq=False)
class TaylorReport:
    taus: np.ndarray
    remainders: np.ndarray
    slope: float
    linear_norm: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"tau": self.taus, "r": self.remainders, "slope": self.slope})


def taylor_test(problem, controls: ControlVector, direction: ControlDirection,
                taus: Sequence[float] = TAYLOR_TAUS, jobs: int = 1) -> TaylorReport:
    """Remainder |S(u + tau d) - S(u) - tau S'(u) d| of the control-to-state map"""
    taus = np.array(sorted(taus, reverse=True), dtype=float)
    base = problem.forward(controls)
    dell = direction.dell if np.any(direction.dell) else None
    linear = solve_linearized(problem.params, base, None, (direction.dg, direction.dh), controls.ell,
                              problem.dom, problem.dt, problem.T, dell=dell)
    S0, dS = base.vector(), linear.vector()

    def remainder(tau: float) -> float:
        moved = problem.forward(controls.moved(direction, tau))
        return float(np.linalg.norm(moved.vector() - S0 - tau * dS))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            remainders = list(executor.map(remainder, taus))
    else:
        remainders = [remainder(tau) for tau in taus]
    remainders = np.array(remainders)
    slope = loglog_slope(taus, remainders)
    logger.info(f"Taylor test: slope {slope:.3f}, r(tau_min) = {remainders[-1]:.3e}")
    return TaylorReport(taus=taus, remainders=remainders, slope=slope, linear_norm=float(np.linalg.norm(dS)))
