#!/usr/bin/env python3
"""
Tests for the state solvers: pbar, the coupled Westervelt-plate step and the linearization
"""
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from src.config import ControlsConfig, GeometryConfig, ObjectiveConfig, PhysicsConfig, RunConfig, TimeConfig
from src.exceptions import NonDegeneracyViolated, ShapeMismatch
from src.forward_solver import (
    InitialData, LinearizedRHS, MappedSystem, compatibility_residuals, residual_APDE, solve_forward, solve_linearized,
    solve_pbar, step_weights, time_levels,
)
from src.problem import build_problem, builtin_g, builtin_h
from test_geometry import run_tests


def small_config(k=0.1, targets="zero", Nt=8, Nx=9, Nz=11, **controls):
    return RunConfig(
        geometry=GeometryConfig(Nx=Nx, Nz=Nz),
        physics=PhysicsConfig(k=k),
        time=TimeConfig(T=1.0, Nt=Nt),
        controls=ControlsConfig(**controls),
        objective=ObjectiveConfig(targets=targets),
    )


def test_zero_controls_give_zero_state():
    problem = build_problem(small_config())
    states = problem.forward(problem.initial_controls())
    for name in ("pbar", "pbar_tt", "ptil", "ptil_t", "wtil", "wtil_tt"):
        assert np.all(getattr(states, name) == 0.0), name
    assert states.margin == 1.0


def test_pbar_is_linear_in_g():
    problem = build_problem(small_config())
    dom = problem.dom
    g = builtin_g(dom, problem.Nt, problem.T, 0.3)
    ell = dom.reference_profile()
    once = solve_pbar(problem.params, g, ell, dom, problem.dt, problem.T)
    twice = solve_pbar(problem.params, 2.0 * g, ell, dom, problem.dt, problem.T)
    assert np.max(np.abs(once.p)) > 0
    assert_allclose(twice.p, 2.0 * once.p, rtol=1e-10, atol=1e-14)


def test_pbar_steps_satisfy_residual():
    problem = build_problem(small_config())
    dom = problem.dom
    g = builtin_g(dom, problem.Nt, problem.T, 0.3)
    ell = dom.reference_profile()
    system = MappedSystem(problem.params, dom, ell, problem.dt)
    traj = solve_pbar(problem.params, g, ell, dom, problem.dt, problem.T, system=system)
    scale = np.max(np.abs(system.pbar_partials()["g"].dot(g.T)))
    for k in range(1, problem.Nt + 1):
        residual = system.pbar_residual(traj.p[k], traj.v[k], traj.a[k], g[k])
        assert np.max(np.abs(residual)) <= 1e-9 * scale


def test_nonlinear_forward_runs():
    problem = build_problem(small_config(g_amplitude=0.5, h_amplitude=0.5, ell_amplitude=0.1))
    states = problem.forward(problem.initial_controls())
    assert np.all(np.isfinite(states.pressure))
    assert np.max(np.abs(states.ptil)) > 0
    assert np.max(np.abs(states.wtil)) > 0
    assert states.margin > 0.1


def test_degeneracy_guard():
    problem = build_problem(small_config())
    dom = problem.dom
    zeros = np.zeros((problem.Nt + 1, dom.Nx))
    init = InitialData(p0=np.full(dom.shape, 4.6), p1=np.zeros(dom.shape), w0=np.zeros(dom.Nx), w1=np.zeros(dom.Nx))
    try:
        solve_forward(problem.params, zeros, zeros, dom.reference_profile(), dom, problem.dt, problem.T, init=init)
    except NonDegeneracyViolated as e:
        assert e.exit_code == 3
        return
    raise AssertionError("1 - 2k p0 below the guard was accepted")


def test_zero_initial_data_is_compatible():
    problem = build_problem(small_config())
    dom = problem.dom
    system = MappedSystem(problem.params, dom, dom.reference_profile(), problem.dt)
    init = InitialData(p0=np.zeros(dom.shape), p1=np.zeros(dom.shape), w0=np.zeros(dom.Nx), w1=np.zeros(dom.Nx))
    derived = init.derive(system)
    assert np.all(derived.p2 == 0.0)
    assert np.all(derived.w2 == 0.0)
    assert all(value == 0.0 for value in compatibility_residuals(derived, system).values())


def test_state_residual_pairing():
    problem = build_problem(small_config(g_amplitude=0.3, h_amplitude=0.3))
    dom, Nt = problem.dom, problem.Nt
    controls = problem.initial_controls()
    states = problem.forward(controls)
    rng = np.random.default_rng(0)
    tests = SimpleNamespace(
        qbar=rng.standard_normal((Nt + 1,) + dom.shape), qtil=rng.standard_normal((Nt + 1,) + dom.shape),
        vtil=rng.standard_normal((Nt + 1, dom.Nx)), mu_N=rng.standard_normal((Nt + 1, dom.Nx)),
        mu_pl=rng.standard_normal((Nt + 1, dom.Nx)),
    )
    solved = residual_APDE(controls, states, tests, problem.params, dom)
    other = controls.with_values(g=2.0 * controls.g)
    mismatch = residual_APDE(other, states, tests, problem.params, dom)
    assert abs(mismatch) > 0
    assert abs(solved) <= 1e-6 * abs(mismatch)


def test_step_weights():
    assert_allclose(step_weights(4, 0.25), [0.0, 0.25, 0.25, 0.25, 0.125])


def test_time_levels_mismatch():
    assert time_levels(0.125, 1.0) == 8
    try:
        time_levels(0.3, 1.0)
    except ShapeMismatch:
        return
    raise AssertionError("T not a multiple of dt was accepted")


def test_linearization_exact_for_linear_problem():
    problem = build_problem(small_config(k=0.0))
    dom = problem.dom
    controls = problem.initial_controls()
    base_controls = controls.with_values(g=builtin_g(dom, problem.Nt, problem.T, 0.2))
    dg = builtin_g(dom, problem.Nt, problem.T, 0.1)
    dh = builtin_h(dom, problem.Nt, problem.T, 0.1)
    dg[:2] = 0.0
    dh[:1] = 0.0
    base = problem.forward(base_controls)
    moved = problem.forward(base_controls.with_values(g=base_controls.g + dg, h=base_controls.h + dh))
    linear = solve_linearized(problem.params, base, None, (dg, dh), controls.ell, dom, problem.dt, problem.T)
    difference = moved.vector() - base.vector()
    assert np.linalg.norm(difference) > 0
    assert np.linalg.norm(linear.vector() - difference) <= 1e-8 * np.linalg.norm(difference)
    assert linear.residual <= 1e-8


def test_linearized_zero_data_is_zero():
    problem = build_problem(small_config(g_amplitude=0.3))
    base = problem.forward(problem.initial_controls())
    linear = solve_linearized(problem.params, base, None, None, problem.dom.reference_profile(), problem.dom,
                              problem.dt, problem.T)
    assert np.all(linear.vector() == 0.0)


def test_refined_time_step_changes_little():
    coarse = build_problem(small_config(g_amplitude=0.3, Nt=16))
    fine = build_problem(small_config(g_amplitude=0.3, Nt=32))
    a = coarse.forward(coarse.initial_controls()).pbar
    b = fine.forward(fine.initial_controls()).pbar[::2]
    assert np.max(np.abs(a - b)) <= 0.1 * np.max(np.abs(b))


def smooth_g(dom, Nt, T):
    t = np.linspace(0.0, T, Nt + 1)
    return 0.3 * np.outer(np.sin(np.pi * t / T) ** 6, np.cos(np.pi * dom.x / dom.Lx))


def test_pbar_time_order():
    problem = build_problem(small_config())
    dom, params, T = problem.dom, problem.params, problem.T
    ell = dom.reference_profile()
    solutions = []
    for Nt in (16, 32, 64):
        solutions.append(solve_pbar(params, smooth_g(dom, Nt, T), ell, dom, T / Nt, T).p)
    # levels shared by all three runs
    coarse, middle, fine = solutions[0], solutions[1][::2], solutions[2][::4]
    order = np.log2(np.max(np.abs(coarse - middle)) / np.max(np.abs(middle - fine)))
    assert order >= 1.9, f"observed order {order:.3f}"


def test_boundary_accelerations_are_smooth():
    problem = build_problem(small_config(g_amplitude=0.3, Nt=16))
    states = problem.forward(problem.initial_controls())
    top = states.pbar_tt[:, 1:-1, -1]
    expected = np.gradient(states.pbar_t[:, 1:-1, -1], problem.dt, axis=0, edge_order=2)
    assert_allclose(top, expected, rtol=1e-12, atol=1e-14)
    refined = build_problem(small_config(g_amplitude=0.3, Nt=32))
    top_fine = refined.forward(refined.initial_controls()).pbar_tt[::2, 1:-1, -1]
    assert np.max(np.abs(top_fine - top)) <= 0.2 * np.max(np.abs(top_fine))


def test_linearized_random_sources():
    problem = build_problem(small_config(g_amplitude=0.2, h_amplitude=0.2))
    dom, Nt = problem.dom, problem.Nt
    base = problem.forward(problem.initial_controls())
    rng = np.random.default_rng(11)
    field, edge = (Nt + 1,) + dom.shape, (Nt + 1, dom.Nx)
    for _ in range(10):
        rhs = LinearizedRHS(
            f_pbar=rng.standard_normal(field), f_ptil=rng.standard_normal(field),
            f_wtil=rng.standard_normal(edge), f_N=rng.standard_normal(edge), f_pl=rng.standard_normal(edge),
        )
        linear = solve_linearized(problem.params, base, rhs, None, dom.reference_profile(), dom,
                                  problem.dt, problem.T)
        assert np.all(np.isfinite(linear.vector()))
        assert np.linalg.norm(linear.vector()) > 0
        assert linear.residual <= 1e-8, f"residual {linear.residual:.3e}"


def test_small_k_is_close_to_linear():
    states = {}
    for k in (0.0, 1e-8, 1e-4):
        problem = build_problem(small_config(k=k, g_amplitude=0.3, h_amplitude=0.3))
        states[k] = problem.forward(problem.initial_controls()).vector()
    scale = np.linalg.norm(states[0.0])
    tiny = np.linalg.norm(states[1e-8] - states[0.0])
    small = np.linalg.norm(states[1e-4] - states[0.0])
    assert scale > 0 and small > 0
    assert tiny <= 1e-6 * scale
    assert 0.5e-4 <= tiny / small <= 2e-4, f"ratio {tiny / small:.3e}"


TESTS = [
    ("Zero controls", test_zero_controls_give_zero_state),
    ("pbar linear in g", test_pbar_is_linear_in_g),
    ("pbar step residual", test_pbar_steps_satisfy_residual),
    ("Nonlinear forward", test_nonlinear_forward_runs),
    ("Degeneracy guard", test_degeneracy_guard),
    ("Initial data compatibility", test_zero_initial_data_is_compatible),
    ("State residual pairing", test_state_residual_pairing),
    ("Step weights", test_step_weights),
    ("Time levels", test_time_levels_mismatch),
    ("Linearization (k = 0)", test_linearization_exact_for_linear_problem),
    ("Linearized zero data", test_linearized_zero_data_is_zero),
    ("Time refinement", test_refined_time_step_changes_little),
    ("pbar time order", test_pbar_time_order),
    ("Boundary accelerations", test_boundary_accelerations_are_smooth),
    ("Linearized random sources", test_linearized_random_sources),
    ("Small k limit", test_small_k_is_close_to_linear),
]


def main():
    return run_tests("Forward solver", TESTS)


if __name__ == "__main__":
    exit(main())
