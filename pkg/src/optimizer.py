"""
Reduced-space optimization over (g, h, ell).

Each iteration runs forward -> adjoint -> gradients, builds a descent
direction (projected gradient or L-BFGS two-loop in the quadrature inner
product) and backtracks along the projected path until Armijo holds.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from .adjoint_solver import solve_adjoint
from .config import Config, OptimizerSettings
from .exceptions import LineSearchStalled, SolverError, ValidationError
from .geometry import validate_profile
from .objective import (
    ControlDirection, ControlVector, ObjectiveBreakdown, assemble_gradient, control_inner, control_norm,
    eval_objective, project_tangent, regularization_terms,
)
from .operators import FractionalSpec, fractional_neumann_apply

logger = logging.getLogger(__name__)

CLOSENESS_FRACTION = 0.5


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 100
    armijo_c1: float = 1e-4
    step_init: float = 1.0
    step_shrink: float = 0.5
    grad_tol: Optional[float] = None
    theta: float = 1e-6
    mode: str = "lbfgs"
    memory: int = 5
    smooth_riesz: bool = False
    max_rejections: int = Config.MAX_REJECTIONS
    jobs: int = 1

    def __post_init__(self):
        if not 0.0 < self.armijo_c1 < 1.0:
            raise ValidationError(f"armijo_c1 must lie in (0, 1), got {self.armijo_c1}")
        if not 0.0 < self.step_shrink < 1.0:
            raise ValidationError(f"step_shrink must lie in (0, 1), got {self.step_shrink}")
        if self.theta < 0:
            raise ValidationError(f"theta must be non-negative, got {self.theta}")
        if self.mode not in ("gd", "lbfgs"):
            raise ValidationError(f"mode must be gd or lbfgs, got {self.mode!r}")

    @classmethod
    def from_settings(cls, settings: OptimizerSettings, theta: float, jobs: int = 1) -> "OptimizerConfig":
        return cls(
            max_iters=settings.max_iters, armijo_c1=settings.armijo_c1, step_init=settings.step_init,
            step_shrink=settings.step_shrink, grad_tol=settings.grad_tol if settings.grad_tol >= 0 else None,
            theta=theta, mode=settings.mode, memory=settings.memory, smooth_riesz=settings.smooth_riesz,
            jobs=max(1, jobs),
        )


@dataclass(eq=False)
class IterateRecord:
    iteration: int
    breakdown: ObjectiveBreakdown
    grad_norm: float
    step: float
    rejections: int
    feasible: bool
    margin: float


@dataclass(eq=False)
class IterateHistory:
    records: List[IterateRecord] = field(default_factory=list)
    converged: bool = False

    def append(self, record: IterateRecord):
        self.records.append(record)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.breakdown.total for r in self.records])

    def is_monotone(self) -> bool:
        totals = self.totals
        return bool(np.all(np.diff(totals) <= 0.0))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"iteration": r.iteration}
            row.update(r.breakdown.as_row())
            row.update({
                "grad_norm": r.grad_norm, "step": r.step,
                "admissible": int(r.feasible), "margin": r.margin,
            })
            rows.append(row)
        return pd.DataFrame(rows)


def project_admissible(raw: ControlVector) -> ControlVector:
    """
    Nearest admissible controls: initial layers of g and h reset to the
    priors, ell - ell_prior clamped at both ends of B and scaled into the
    closeness ball.
    """
    g = np.array(raw.g, dtype=float)
    h = np.array(raw.h, dtype=float)
    g[:2] = raw.g0[:2]
    h[:1] = raw.h0[:1]

    prior = np.asarray(raw.ell_prior.ell, dtype=float)
    dev = np.asarray(raw.ell.ell, dtype=float) - prior
    dev[[0, 1, -2, -1]] = 0.0
    bound = CLOSENESS_FRACTION * float(np.min(prior))
    largest = float(np.max(np.abs(dev)))
    if largest > bound * (1.0 + 1e-12):
        dev = dev * (bound / largest)
    return raw.with_values(g=g, h=h, ell=prior + dev)


def is_admissible(controls: ControlVector, dom) -> bool:
    projected = project_admissible(controls)
    same = (
        np.array_equal(projected.g, controls.g)
        and np.array_equal(projected.h, controls.h)
        and np.array_equal(projected.ell.ell, controls.ell.ell)
    )
    return same and validate_profile(controls.ell, dom).admissible


@dataclass(eq=False)
class Evaluation:
    controls: ControlVector
    breakdown: ObjectiveBreakdown
    states: object
    adjoint: object = None
    gradient: Optional[ControlDirection] = None


def reduced_objective(problem, controls: ControlVector) -> Evaluation:
    states = problem.forward(controls)
    return Evaluation(controls=controls, breakdown=eval_objective(controls, states, problem.targets, problem.settings),
                      states=states)


def reduced_gradient(problem, controls: ControlVector) -> Evaluation:
    """Objective, states, adjoint and the L2 gradient at controls"""
    evaluation = reduced_objective(problem, controls)
    adj = solve_adjoint(problem.params, evaluation.states, problem.targets, controls.ell, problem.dom,
                        problem.settings.roi)
    evaluation.adjoint = adj
    evaluation.gradient = assemble_gradient(controls, evaluation.states, adj, problem.settings, problem.params,
                                            problem.targets)
    return evaluation


def riesz_smooth(direction: ControlDirection, dom) -> ControlDirection:
    """Apply (-Delta_N + id)^-1 along x to every component"""
    spec = FractionalSpec(s=-1.0, domain_tag="B", length=dom.Lx)
    return project_tangent(ControlDirection(
        dg=fractional_neumann_apply(direction.dg, spec),
        dh=fractional_neumann_apply(direction.dh, spec),
        dell=fractional_neumann_apply(direction.dell, spec),
    ))


class LBFGSMemory:
    """Two-loop recursion over stored (s, y) pairs in the quadrature inner product"""

    def __init__(self, size: int, dom, dt: float):
        self.size = size
        self.dom = dom
        self.dt = dt
        self.s_list, self.y_list, self.rho_list = [], [], []

    def _dot(self, a, b) -> float:
        return control_inner(a, b, self.dom, self.dt)

    def reset(self):
        self.s_list, self.y_list, self.rho_list = [], [], []

    def update(self, s: ControlDirection, y: ControlDirection):
        sy = self._dot(s, y)
        if sy <= 1e-12 * max(self._dot(s, s), 1e-300) ** 0.5 * max(self._dot(y, y), 1e-300) ** 0.5:
            logger.debug("Skipping L-BFGS update with non-positive curvature")
            return
        self.s_list.append(s)
        self.y_list.append(y)
        self.rho_list.append(1.0 / sy)
        if len(self.s_list) > self.size:
            self.s_list.pop(0)
            self.y_list.pop(0)
            self.rho_list.pop(0)

    def apply(self, grad: ControlDirection) -> ControlDirection:
        """Approximate inverse Hessian times grad"""
        q = grad
        alpha_list = []
        for s, y, rho in zip(reversed(self.s_list), reversed(self.y_list), reversed(self.rho_list)):
            alpha = rho * self._dot(s, q)
            q = q - y.scaled(alpha)
            alpha_list.append(alpha)

        if self.s_list:
            gamma = self._dot(self.s_list[-1], self.y_list[-1]) / self._dot(self.y_list[-1], self.y_list[-1])
            r = q.scaled(gamma)
        else:
            r = q

        for i, (s, y, rho) in enumerate(zip(self.s_list, self.y_list, self.rho_list)):
            beta = rho * self._dot(y, r)
            r = r + s.scaled(alpha_list[len(self.s_list) - 1 - i] - beta)
        return r


def _try_trial(problem, controls: ControlVector, direction: ControlDirection, step: float):
    trial = project_admissible(controls.moved(direction, step))
    try:
        return reduced_objective(problem, trial)
    except (ValidationError, SolverError) as e:
        logger.warning(f"Line-search trial at step {step:.3e} rejected: {e}")
        return None


def regularization_step(current: Evaluation, direction: ControlDirection, problem) -> float:
    """
    Minimizer along direction of the linear model plus the exact curvature of
    the regularization; inf when that curvature vanishes.
    """
    theta = problem.settings.theta
    slope = control_inner(current.gradient, direction, problem.dom, problem.dt)
    c = current.controls
    unit = c.with_values(g=c.g0 + direction.dg, h=c.h0 + direction.dh, ell=c.ell_prior.ell + direction.dell)
    curvature = theta * sum(regularization_terms(unit, problem.settings, problem.dom).values())
    if curvature <= 0 or slope >= 0:
        return float("inf")
    return -slope / curvature


def armijo_search(problem, current: Evaluation, direction: ControlDirection, step0: float,
                  config: OptimizerConfig):
    """
    Backtracking on the projected path; the smallest trial index meeting
    Armijo wins, also when trials are evaluated in parallel batches.
    """
    J0 = current.breakdown.total
    dom, dt = problem.dom, problem.dt
    steps = [step0 * config.step_shrink**k for k in range(config.max_rejections)]

    def accepts(evaluation) -> bool:
        if evaluation is None:
            return False
        displacement = evaluation.controls.difference(current.controls)
        slope = control_inner(current.gradient, displacement, dom, dt)
        return evaluation.breakdown.total <= J0 + config.armijo_c1 * slope and slope < 0

    jobs = max(1, config.jobs)
    for start in range(0, len(steps), jobs):
        batch = steps[start:start + jobs]
        if jobs == 1:
            results = [_try_trial(problem, current.controls, direction, batch[0])]
        else:
            with ThreadPoolExecutor(max_workers=jobs) as executor:
                results = list(executor.map(lambda s: _try_trial(problem, current.controls, direction, s), batch))
        for offset, evaluation in enumerate(results):
            if accepts(evaluation):
                return batch[offset], evaluation, start + offset
    raise LineSearchStalled(
        f"No Armijo step after {config.max_rejections} consecutive rejections (J = {J0:.6e})"
    )


def optimize(config: OptimizerConfig, problem, controls0: ControlVector = None, start_iteration: int = 0,
             checkpoint: Callable = None):
    """Minimize the reduced objective; returns the final controls and the iterate history"""
    if problem.settings.theta != config.theta:
        problem = replace(problem, settings=replace(problem.settings, theta=config.theta))
    controls = project_admissible(controls0 if controls0 is not None else problem.initial_controls())
    dom, dt = problem.dom, problem.dt
    current = reduced_gradient(problem, controls)
    J_start = current.breakdown.total
    grad_tol = config.grad_tol if config.grad_tol is not None else 1e-6 * (1.0 + J_start)
    memory = LBFGSMemory(config.memory, dom, dt)
    history = IterateHistory()

    def record(iteration, evaluation, step, rejections):
        history.append(IterateRecord(
            iteration=iteration, breakdown=evaluation.breakdown,
            grad_norm=control_norm(evaluation.gradient, dom, dt), step=step, rejections=rejections,
            feasible=validate_profile(evaluation.controls.ell, dom).admissible,
            margin=evaluation.states.margin,
        ))

    record(start_iteration, current, 0.0, 0)
    logger.info(f"Optimizer start: J = {J_start:.6e}, |grad| = {history.records[-1].grad_norm:.3e}")
    last_step = None

    for iteration in range(start_iteration + 1, start_iteration + config.max_iters + 1):
        gnorm = history.records[-1].grad_norm
        if gnorm < grad_tol:
            history.converged = True
            logger.info(f"Converged at iteration {iteration - 1}: |grad| = {gnorm:.3e} < {grad_tol:.3e}")
            break

        base = riesz_smooth(current.gradient, dom) if config.smooth_riesz else current.gradient
        if config.mode == "lbfgs" and memory.s_list:
            direction = project_tangent(memory.apply(base)).scaled(-1.0)
            step0 = config.step_init
        else:
            direction = base.scaled(-1.0)
            step0 = last_step * 2.0 if last_step else config.step_init / max(control_norm(base, dom, dt), 1e-300)
        if control_inner(current.gradient, direction, dom, dt) >= 0:
            logger.debug("L-BFGS direction is not a descent direction; restarting from the gradient")
            memory.reset()
            direction = base.scaled(-1.0)
            step0 = config.step_init / max(control_norm(base, dom, dt), 1e-300)
        step0 = min(step0, regularization_step(current, direction, problem))

        step, trial, rejections = armijo_search(problem, current, direction, step0, config)
        new = reduced_gradient(problem, trial.controls)
        memory.update(new.controls.difference(current.controls), new.gradient - current.gradient)
        current = new
        last_step = step
        record(iteration, current, step, rejections)
        logger.info(
            f"Iteration {iteration}: J = {current.breakdown.total:.6e}, step = {step:.3e}, "
            f"rejections = {rejections}, |grad| = {history.records[-1].grad_norm:.3e}"
        )
        if checkpoint is not None:
            checkpoint(iteration, current.controls, history)

    return current.controls, history
