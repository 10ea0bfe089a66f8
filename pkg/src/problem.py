"""
Assembles a runnable control problem from a RunConfig: grid, physics,
objective settings, targets and the initial controls.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .artifacts import read_edge_control, read_profile
from .config import RunConfig
from .exceptions import ShapeMismatch
from .forward_solver import InitialData, PhysicalParams, StateTrajectory, solve_forward
from .geometry import ReferenceDomain
from .objective import ControlVector, ObjectiveBreakdown, ObjectiveSettings, Targets, eval_objective
from .optimizer import project_admissible

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Problem:
    params: PhysicalParams
    dom: ReferenceDomain
    T: float
    Nt: int
    settings: ObjectiveSettings
    targets: Targets
    init: InitialData
    controls0: ControlVector
    hidden: Optional[ControlVector] = None

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    def forward(self, controls: ControlVector) -> StateTrajectory:
        controls.check(self.dom)
        return solve_forward(self.params, controls.g, controls.h, controls.ell, self.dom, self.dt, self.T,
                             init=self.init)

    def evaluate(self, controls: ControlVector):
        """Objective breakdown and the state trajectory at controls"""
        states = self.forward(controls)
        return eval_objective(controls, states, self.targets, self.settings), states

    def objective(self, controls: ControlVector) -> float:
        breakdown: ObjectiveBreakdown = self.evaluate(controls)[0]
        return breakdown.total

    def initial_controls(self) -> ControlVector:
        return self.controls0


def time_envelope(Nt: int, T: float) -> np.ndarray:
    t = np.linspace(0.0, T, Nt + 1)
    return np.sin(np.pi * t / T) ** 2


def builtin_g(dom: ReferenceDomain, Nt: int, T: float, amplitude: float) -> np.ndarray:
    return amplitude * np.outer(time_envelope(Nt, T), np.cos(np.pi * dom.x / dom.Lx))


def builtin_h(dom: ReferenceDomain, Nt: int, T: float, amplitude: float) -> np.ndarray:
    return amplitude * np.outer(time_envelope(Nt, T), np.sin(np.pi * dom.x / dom.Lx))


def builtin_ell(dom: ReferenceDomain, amplitude: float) -> np.ndarray:
    return dom.ell0 + amplitude * np.sin(np.pi * dom.x / dom.Lx) ** 4


def build_domain(config: RunConfig) -> ReferenceDomain:
    geo = config.geometry
    return ReferenceDomain.from_total(geo.Lx, geo.H_fix, geo.ell0, geo.Nx, geo.Nz)


def _controls(dom: ReferenceDomain, Nt: int, T: float, g, h, ell) -> ControlVector:
    prior = dom.reference_profile()
    zeros = np.zeros((Nt + 1, dom.Nx))
    raw = ControlVector(
        g=np.asarray(g, dtype=float), h=np.asarray(h, dtype=float), ell=prior.with_values(ell),
        g0=zeros, h0=zeros.copy(), ell_prior=prior, dt=T / Nt,
    )
    raw.check(dom)
    return project_admissible(raw)


def initial_controls(config: RunConfig, dom: ReferenceDomain) -> ControlVector:
    """Built-in profiles, overridden component-wise by control files"""
    ctl, T, Nt = config.controls, config.time.T, config.time.Nt
    g = builtin_g(dom, Nt, T, ctl.g_amplitude)
    h = builtin_h(dom, Nt, T, ctl.h_amplitude)
    ell = builtin_ell(dom, ctl.ell_amplitude)
    if ctl.g_file:
        g = read_edge_control(config.resolve_path(ctl.g_file), Nt, dom.Nx)
    if ctl.h_file:
        h = read_edge_control(config.resolve_path(ctl.h_file), Nt, dom.Nx)
    if ctl.ell_file:
        ell = read_profile(config.resolve_path(ctl.ell_file))
        if ell.shape != (dom.Nx,):
            raise ShapeMismatch(f"Profile file has {ell.size} nodes, B has {dom.Nx}")
    return _controls(dom, Nt, T, g, h, ell)


def build_problem(config: RunConfig) -> Problem:
    dom = build_domain(config)
    params = PhysicalParams.from_config(config.physics)
    T, Nt = config.time.T, config.time.Nt
    obj = config.objective
    settings = ObjectiveSettings(theta=obj.theta, s_g=obj.s_g, s_ell=obj.s_ell, roi=tuple(obj.roi))
    init = InitialData.zeros(dom)
    controls0 = initial_controls(config, dom)

    problem = Problem(params=params, dom=dom, T=T, Nt=Nt, settings=settings,
                      targets=Targets.zeros(dom, Nt), init=init, controls0=controls0)

    if obj.targets == "manufactured":
        hidden = _controls(
            dom, Nt, T,
            builtin_g(dom, Nt, T, obj.target_g_amplitude),
            builtin_h(dom, Nt, T, obj.target_h_amplitude),
            builtin_ell(dom, obj.target_ell_amplitude),
        )
        problem.hidden = hidden
        problem.targets = Targets.from_states(problem.forward(hidden))
        logger.info("Targets manufactured from the forward solution at hidden controls")
    elif obj.targets == "priors":
        priors = controls0.with_values(g=controls0.g0, h=controls0.h0, ell=controls0.ell_prior)
        problem.targets = Targets.from_states(problem.forward(priors))
        logger.info("Targets taken from the forward solution at the priors")

    logger.info(
        f"Problem: grid {dom.Nx}x{dom.Nz} (Nz_fix={dom.Nz_fix}), Nt={Nt}, T={T}, targets={obj.targets}"
    )
    return problem
