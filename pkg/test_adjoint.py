#!/usr/bin/env python3
"""
Tests for the adjoint and the reduced gradients
"""
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from src.adjoint_solver import (
    AdjointTrajectory, check_absorbing_coefficients, extract_multipliers, plate_memory, solve_adjoint,
)
from src.exceptions import UnsupportedAbsorbingCoefficients
from src.forward_solver import MappedSystem, PhysicalParams
from src.objective import ControlDirection, control_inner, project_tangent
from src.diagnostics import fd_gradient_oracle, random_directions
from src.optimizer import reduced_gradient
from src.problem import build_problem, builtin_g, builtin_h
from src.utils import time_derivative
from test_forward import small_config
from test_geometry import run_tests

TAUS = (1e-3, 1e-4, 1e-5)
GRID_TOLERANCE = {"g": 0.1, "h": 0.1, "ell": 0.2}


def tracking_problem(Nx=17, Nz=21, Nt=16):
    config = small_config(targets="manufactured", g_amplitude=0.2, h_amplitude=0.2, ell_amplitude=0.05,
                          Nx=Nx, Nz=Nz, Nt=Nt)
    return build_problem(config)


def smooth_direction(problem, component):
    """Grid-independent direction: the same functions of (t, x) on every grid"""
    dom, Nt, T = problem.dom, problem.Nt, problem.T
    zeros = ControlDirection.zeros_like(problem.initial_controls())
    if component == "g":
        d = ControlDirection(dg=builtin_g(dom, Nt, T, 1.0), dh=zeros.dh, dell=zeros.dell)
    elif component == "h":
        d = ControlDirection(dg=zeros.dg, dh=builtin_h(dom, Nt, T, 1.0), dell=zeros.dell)
    else:
        d = ControlDirection(dg=zeros.dg, dh=zeros.dh, dell=0.1 * np.sin(np.pi * dom.x / dom.Lx) ** 6)
    return project_tangent(d)


def relative_errors(problem, directions):
    controls = problem.initial_controls()
    evaluation = reduced_gradient(problem, controls)
    errors = []
    for d, fd in zip(directions, fd_gradient_oracle(problem, controls, directions, TAUS)):
        adjoint_value = control_inner(evaluation.gradient, d, problem.dom, problem.dt)
        assert abs(fd.plateau_value) > 0
        errors.append(abs(adjoint_value - fd.plateau_value) / abs(fd.plateau_value))
    return errors


def check_component(component):
    problem = tracking_problem()
    controls = problem.initial_controls()
    directions = random_directions(controls, problem.dom, 2, seed=7, components=(component,))
    directions.append(smooth_direction(problem, component))
    worst = max(relative_errors(problem, directions))
    assert worst <= GRID_TOLERANCE[component], f"{component}: {worst:.3e}"


def test_gradient_g():
    check_component("g")


def test_gradient_h():
    check_component("h")


def test_gradient_ell():
    check_component("ell")


def test_gradient_error_decreases_under_refinement():
    for component in ("g", "h", "ell"):
        coarse = tracking_problem(Nx=9, Nz=11, Nt=8)
        fine = tracking_problem(Nx=17, Nz=21, Nt=16)
        e_coarse = relative_errors(coarse, [smooth_direction(coarse, component)])[0]
        e_fine = relative_errors(fine, [smooth_direction(fine, component)])[0]
        assert e_fine < e_coarse, f"{component}: {e_coarse:.3e} -> {e_fine:.3e}"


def test_zero_misfit_gives_zero_adjoint():
    problem = build_problem(small_config())
    controls = problem.initial_controls()
    states = problem.forward(controls)
    adj = solve_adjoint(problem.params, states, problem.targets, controls.ell, problem.dom, problem.settings.roi)
    for name in ("qbar", "qtil", "vtil", "mu_N", "mu_pl"):
        assert np.all(getattr(adj, name) == 0.0), name


def test_terminal_conditions_and_frozen_layers():
    problem = tracking_problem(Nx=9, Nz=11, Nt=8)
    evaluation = reduced_gradient(problem, problem.initial_controls())
    adj = evaluation.adjoint
    for name in ("qbar", "qtil", "vtil"):
        assert np.all(getattr(adj, name)[-1] == 0.0), name
    assert np.all(adj.mu_N[:, [0, -1]] == 0.0)
    assert np.all(adj.vtil[:, [0, -1]] == 0.0)
    assert np.max(np.abs(adj.qbar)) > 0 and np.max(np.abs(adj.qtil)) > 0
    assert np.all(evaluation.gradient.dg[:2] == 0.0)
    assert np.all(evaluation.gradient.dh[:1] == 0.0)
    assert np.all(evaluation.gradient.dell[[0, 1, -2, -1]] == 0.0)


def test_exported_multipliers_are_traces():
    problem = tracking_problem(Nx=9, Nz=11, Nt=8)
    adj = reduced_gradient(problem, problem.initial_controls()).adjoint
    c2, b = problem.params.c**2, problem.params.b
    top = adj.qbar[:, 1:-1, -1]
    bottom = adj.qtil[:, 1:-1, 0]
    assert_allclose(adj.mu_N[:, 1:-1], c2 * top - b * time_derivative(top, adj.dt), rtol=1e-12, atol=1e-14)
    assert_allclose(adj.mu_pl[:, 1:-1], c2 * bottom - b * time_derivative(bottom, adj.dt), rtol=1e-12, atol=1e-14)
    mu_N, mu_pl = extract_multipliers(adj, problem.params, problem.dom)
    assert np.array_equal(mu_N, adj.mu_N) and np.array_equal(mu_pl, adj.mu_pl)


def test_multipliers_of_linear_trace():
    problem = build_problem(small_config())
    dom, Nt = problem.dom, problem.Nt
    t = np.linspace(0.0, problem.T, Nt + 1)
    field = np.broadcast_to(t[:, None, None], (Nt + 1,) + dom.shape).copy()
    zeros = np.zeros((Nt + 1, dom.Nx))
    adj = AdjointTrajectory(qbar=field, qtil=2.0 * field, vtil=zeros, mu_N=zeros, mu_pl=zeros, dt=problem.dt)
    c2, b = problem.params.c**2, problem.params.b
    mu_N, mu_pl = extract_multipliers(adj, problem.params, dom)
    expected = np.broadcast_to((c2 * t - b)[:, None], mu_N[:, 1:-1].shape)
    assert_allclose(mu_N[:, 1:-1], expected, rtol=1e-12, atol=1e-14)
    assert_allclose(mu_pl[:, 1:-1], 2.0 * expected, rtol=1e-12, atol=1e-14)
    assert np.all(mu_N[:, [0, -1]] == 0.0)

    system = MappedSystem(problem.params, dom, dom.reference_profile(), problem.dt)
    rows_bar, _ = adj.row_multipliers(problem.params, system.interior)
    inside = system.interior > 0
    assert_allclose(rows_bar[:, inside], field.reshape(Nt + 1, -1)[:, inside])
    assert_allclose(rows_bar[:, ~inside], np.broadcast_to((c2 * t - b)[:, None], rows_bar[:, ~inside].shape))


def test_plate_memory():
    params = PhysicalParams(rho=2.0, kappa=0.5)
    Nt, T = 8, 1.0
    misfit = np.ones((Nt + 1, 3))
    memory = plate_memory(misfit, params, T / Nt)
    elapsed = np.linspace(0.0, T, Nt + 1)
    assert_allclose(memory[:, 1], -(params.kappa / params.rho) * elapsed, rtol=1e-12, atol=1e-15)
    assert memory.shape == misfit.shape


def test_absorbing_coefficients_checked():
    check_absorbing_coefficients(PhysicalParams(c=2.0, beta_a=0.5))
    try:
        check_absorbing_coefficients(PhysicalParams(c=1.0, beta_a=0.5))
    except UnsupportedAbsorbingCoefficients as e:
        assert e.exit_code == 2
        return
    raise AssertionError("beta_a != 1/c was accepted")


TESTS = [
    ("Gradient in g", test_gradient_g),
    ("Gradient in h", test_gradient_h),
    ("Gradient in ell", test_gradient_ell),
    ("Gradient refinement", test_gradient_error_decreases_under_refinement),
    ("Zero misfit", test_zero_misfit_gives_zero_adjoint),
    ("Terminal conditions", test_terminal_conditions_and_frozen_layers),
    ("Exported multipliers", test_exported_multipliers_are_traces),
    ("Linear trace multipliers", test_multipliers_of_linear_trace),
    ("Plate memory", test_plate_memory),
    ("Absorbing coefficients", test_absorbing_coefficients_checked),
]


def main():
    return run_tests("Adjoint", TESTS)


if __name__ == "__main__":
    exit(main())
