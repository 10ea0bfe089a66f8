import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .artifacts import ArtifactWriter, read_checkpoint
from .config import Config, RunConfig
from .diagnostics import (
    energy_frame, energy_identity_defect, energy_ratio, energy_series, fd_gradient_oracle, random_directions,
    taylor_test,
)
from .exceptions import CheckFailure, ValidationError
from .geometry import transform_coefficients
from .objective import agmon_check, control_inner, control_norm
from .optimizer import OptimizerConfig, optimize, project_admissible, reduced_gradient
from .operators import assemble_acoustic_operators
from .problem import build_problem

logger = logging.getLogger(__name__)

COMMANDS = ("forward", "adjoint", "gradcheck", "taylor", "optimize", "energy")
TAYLOR_MIN_SLOPE = 1.9
LINEAR_REMAINDER = 1e-9


class ExperimentRunner:
    """Runs one command of an experiment configuration and writes its artifacts"""

    def __init__(self, config: RunConfig, out_dir: Optional[Path] = None, jobs: Optional[int] = None):
        self.config = config
        if out_dir is None:
            out_dir = config.resolve_path(config.output.directory) if config.output.directory else Config.OUTPUT_DIR
        self.out_dir = Path(out_dir)
        self.jobs = max(1, jobs if jobs is not None else Config.MAX_WORKERS)
        self.problem = build_problem(config)
        self.writer = ArtifactWriter(self.out_dir, dt=self.problem.dt, T=self.problem.T)
        self.writer.write_config(config)

    def run(self, command: str, resume: bool = False) -> str:
        if command not in COMMANDS:
            raise ValidationError(f"Unknown command '{command}' (expected one of {', '.join(COMMANDS)})")
        logger.info(f"Running '{command}' with {self.jobs} job(s)")
        if command == "optimize":
            return self.optimize(resume=resume)
        return getattr(self, command)()

    def _norms(self, gradient) -> str:
        dom, dt = self.problem.dom, self.problem.dt
        parts = []
        for name, attr in (("g", "dg"), ("h", "dh"), ("ell", "dell")):
            only = gradient.scaled(0.0)
            setattr(only, attr, getattr(gradient, attr))
            parts.append(f"|grad_{name}| = {control_norm(only, dom, dt):.6e}")
        return ", ".join(parts)

    def forward(self) -> str:
        problem, out = self.problem, self.config.output
        controls = problem.initial_controls()
        breakdown, states = problem.evaluate(controls)
        if out.dump_states:
            self.writer.write_states(states)
        if out.monitors:
            self.writer.write_monitors(states, out.monitors, problem.dom)
        if out.dump_operator:
            ops = assemble_acoustic_operators(transform_coefficients(controls.ell, problem.dom), problem.dom)
            self.writer.write_operator(ops.laplacian, "laplacian.csv")
            self.writer.write_operator(ops.boundary, "boundary.csv")
        self.writer.write_profile(problem.dom.x, controls.ell.ell)
        logger.info(f"Objective breakdown: {breakdown.as_row()}")
        logger.info(f"Agmon bound holds: {agmon_check(controls, problem.settings, problem.dom).holds}")
        return (f"forward: J = {breakdown.total:.10e}, margin = {states.margin:.6f}, "
                f"max |p| = {float(np.max(np.abs(states.pressure))):.6e}")

    def adjoint(self) -> str:
        problem = self.problem
        evaluation = reduced_gradient(problem, problem.initial_controls())
        adj = evaluation.adjoint
        if self.config.output.dump_adjoint:
            self.writer.write_adjoint(adj)
        self.writer.write_multipliers(adj.mu_N, adj.mu_pl, problem.dt)
        grad = evaluation.gradient
        self.writer.write_table(pd.DataFrame({"x": problem.dom.x, "grad_ell": grad.dell}), "gradient_ell.csv")
        return f"adjoint: J = {evaluation.breakdown.total:.10e}, {self._norms(grad)}"

    def gradcheck(self) -> str:
        problem, checks = self.problem, self.config.checks
        controls = problem.initial_controls()
        evaluation = reduced_gradient(problem, controls)
        rows = []
        for offset, component in enumerate(("g", "h", "ell")):
            directions = random_directions(controls, problem.dom, checks.n_directions, seed=checks.seed + offset,
                                           components=(component,))
            results = fd_gradient_oracle(problem, controls, directions, checks.tau_list, jobs=self.jobs)
            for k, (d, fd) in enumerate(zip(directions, results)):
                adjoint_value = control_inner(evaluation.gradient, d, problem.dom, problem.dt)
                scale = max(abs(fd.plateau_value), abs(adjoint_value), 1e-300)
                rows.append({
                    "component": component, "direction": k, "adjoint": adjoint_value, "fd": fd.plateau_value,
                    "tau": fd.plateau_tau, "rel_error": abs(adjoint_value - fd.plateau_value) / scale,
                })
        report = pd.DataFrame(rows)
        self.writer.write_table(report, "gradcheck.csv")
        worst = float(report["rel_error"].max())
        summary = f"gradcheck: max relative error = {worst:.3e} over {len(rows)} directions"
        if not worst <= checks.tolerance:
            raise CheckFailure(f"{summary} exceeds tolerance {checks.tolerance:.1e}")
        return summary

    def taylor(self) -> str:
        problem, checks = self.problem, self.config.checks
        controls = problem.initial_controls()
        direction = random_directions(controls, problem.dom, 1, seed=checks.seed)[0]
        report = taylor_test(problem, controls, direction, checks.taylor_taus, jobs=self.jobs)
        self.writer.write_table(report.to_frame(), "taylor.csv")
        summary = f"taylor: slope = {report.slope:.4f}, r(tau_min) = {report.remainders[-1]:.3e}"
        linear = float(np.max(report.remainders)) <= LINEAR_REMAINDER * max(1.0, report.linear_norm)
        if not (linear or report.slope >= TAYLOR_MIN_SLOPE):
            raise CheckFailure(f"{summary} is below {TAYLOR_MIN_SLOPE}")
        return summary

    def optimize(self, resume: bool = False) -> str:
        problem = self.problem
        settings = OptimizerConfig.from_settings(self.config.optimizer, problem.settings.theta, jobs=self.jobs)
        controls0 = problem.initial_controls()
        start, previous = 0, None
        if resume:
            checkpoint = read_checkpoint(self.out_dir / "checkpoint")
            if checkpoint is not None:
                start = checkpoint["iteration"]
                controls0 = project_admissible(controls0.with_values(
                    g=checkpoint["g"], h=checkpoint["h"], ell=checkpoint["ell"],
                ))
                history_path = self.out_dir / "history.csv"
                if history_path.exists():
                    previous = pd.read_csv(history_path)
                    previous = previous[previous["iteration"] < start]
                logger.info(f"Resuming from checkpoint at iteration {start}")
            else:
                logger.warning(f"No checkpoint in {self.out_dir / 'checkpoint'}; starting from scratch")

        def history_frame(history):
            frame = history.to_frame()
            return frame if previous is None else pd.concat([previous, frame], ignore_index=True)

        def checkpoint(iteration, controls, history):
            self.writer.write_checkpoint(iteration, controls, problem.dom.x)
            self.writer.write_table(history_frame(history), "history.csv")

        controls, history = optimize(settings, problem, controls0=controls0, start_iteration=start,
                                     checkpoint=checkpoint)
        self.writer.write_table(history_frame(history), "history.csv")
        self.writer.write_profile(problem.dom.x, controls.ell.ell)
        self.writer.write_field("g", controls.g)
        self.writer.write_field("h", controls.h)
        self.writer.write_index()
        first, last = history.records[0], history.records[-1]
        return (f"optimize: J {first.breakdown.total:.6e} -> {last.breakdown.total:.6e} after "
                f"{last.iteration} iterations, |grad| = {last.grad_norm:.3e}")

    def energy(self) -> str:
        problem = self.problem
        controls = problem.initial_controls()
        states = problem.forward(controls)
        records = energy_series(states, problem.params, controls.g, controls.h, s_g=problem.settings.s_g)
        self.writer.write_table(energy_frame(records), "energy.csv")
        ratio = energy_ratio(records)
        summary = f"energy: max E = {max(r.total for r in records):.6e}, ratio = {ratio:.4f}"
        if problem.params.k == 0:
            identity = energy_identity_defect(states, problem.params, controls.g)
            self.writer.write_table(
                pd.DataFrame({"t": identity.t, "lhs": identity.lhs, "rhs": identity.rhs}), "energy_identity.csv"
            )
            summary += f", identity defect = {identity.defect:.3e}"
        return summary
