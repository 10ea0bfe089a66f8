#!/usr/bin/env python3
"""
Tests for the tracking objective, regularizers, inner product and Agmon bound
"""
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from src.exceptions import ShapeMismatch, ValidationError
from src.objective import (
    ControlDirection, ObjectiveBreakdown, ObjectiveSettings, Targets, agmon_check, control_inner, control_norm,
    eval_objective, project_tangent, regularization_terms, roi_weights, shape_gradient_boundary_form,
)
from src.optimizer import reduced_gradient
from src.problem import build_problem, builtin_g
from test_forward import small_config
from test_geometry import run_tests


def test_breakdown_total():
    b = ObjectiveBreakdown(tracking_p=1.0, tracking_w=2.0, reg_g_time=3.0, reg_g_space=4.0, reg_h=5.0,
                           reg_ell=6.0, theta=0.1)
    assert_allclose(b.total, 3.0 + 0.05 * 18.0)
    assert b.as_row()["total"] == b.total


def test_zero_at_priors():
    problem = build_problem(small_config())
    controls = problem.initial_controls()
    breakdown, _ = problem.evaluate(controls)
    assert breakdown.total == 0.0


def test_roi_weights():
    problem = build_problem(small_config())
    dom = problem.dom
    W = roi_weights(dom, dom.reference_profile(), problem.settings.roi)
    assert_allclose(W.sum(), 0.125, rtol=1e-12)
    assert np.all(W[0] == 0.0)
    assert np.all(W[:, dom.j0 + 1:] == 0.0)


def test_roi_too_small():
    problem = build_problem(small_config())
    try:
        roi_weights(problem.dom, problem.dom.reference_profile(), (0.3, 0.35, -0.25, 0.0))
    except ValidationError:
        return
    raise AssertionError("an ROI narrower than one cell was accepted")


def test_regularization_of_constant_offset():
    problem = build_problem(small_config())
    controls = problem.initial_controls()
    shifted = controls.with_values(g=controls.g0 + 0.5, h=controls.h0 + 0.5)
    terms = regularization_terms(shifted, problem.settings, problem.dom)
    assert abs(terms["reg_g_time"]) < 1e-20
    assert abs(terms["reg_h"]) < 1e-20
    assert terms["reg_ell"] == 0.0
    assert_allclose(terms["reg_g_space"], 0.25, rtol=1e-10)


def test_targets_shape_checked():
    problem = build_problem(small_config())
    controls = problem.initial_controls()
    states = problem.forward(controls)
    wrong = Targets.zeros(problem.dom, problem.Nt + 1)
    try:
        eval_objective(controls, states, wrong, problem.settings)
    except ShapeMismatch:
        return
    raise AssertionError("mismatched targets were accepted")


def test_project_tangent():
    problem = build_problem(small_config())
    ones = ControlDirection.zeros_like(problem.initial_controls())
    ones = ControlDirection(dg=ones.dg + 1.0, dh=ones.dh + 1.0, dell=ones.dell + 1.0)
    tangent = project_tangent(ones)
    assert np.all(tangent.dg[:2] == 0.0) and np.all(tangent.dg[2:] == 1.0)
    assert np.all(tangent.dh[:1] == 0.0) and np.all(tangent.dh[1:] == 1.0)
    assert np.all(tangent.dell[[0, 1, -2, -1]] == 0.0)
    assert np.all(tangent.dell[2:-2] == 1.0)
    assert np.all(ones.dg == 1.0)


def test_control_inner_of_ones():
    problem = build_problem(small_config())
    zeros = ControlDirection.zeros_like(problem.initial_controls())
    ones = ControlDirection(dg=zeros.dg + 1.0, dh=zeros.dh + 1.0, dell=zeros.dell + 1.0)
    assert_allclose(control_inner(ones, ones, problem.dom, problem.dt), 3.0, rtol=1e-12)
    assert_allclose(control_norm(ones.scaled(2.0), problem.dom, problem.dt), 2.0 * np.sqrt(3.0), rtol=1e-12)


def test_agmon_check():
    problem = build_problem(small_config(Nt=32))
    controls = problem.initial_controls()
    zero = agmon_check(controls, problem.settings, problem.dom)
    assert zero.sup_norm == 0.0 and zero.holds
    moved = controls.with_values(g=builtin_g(problem.dom, problem.Nt, problem.T, 0.4))
    check = agmon_check(moved, problem.settings, problem.dom)
    assert check.sup_norm > 0
    assert check.holds


def test_settings_validation():
    for kwargs in ({"theta": -1.0}, {"roi": (0.5, 0.25, -0.25, 0.0)}, {"roi": (0.0, 1.0)}):
        try:
            ObjectiveSettings(**kwargs)
        except ValidationError:
            continue
        raise AssertionError(f"{kwargs} was accepted")


def test_boundary_form_clamped():
    problem = build_problem(small_config(targets="manufactured", g_amplitude=0.2, ell_amplitude=0.05))
    controls = problem.initial_controls()
    evaluation = reduced_gradient(problem, controls)
    terms = shape_gradient_boundary_form(evaluation.states, evaluation.adjoint, controls, problem.settings,
                                         problem.params)
    assert terms.total.shape == (problem.dom.Nx,)
    assert np.all(np.isfinite(terms.total))
    assert np.all(terms.total[[0, 1, -2, -1]] == 0.0)


TESTS = [
    ("Breakdown total", test_breakdown_total),
    ("Zero at priors", test_zero_at_priors),
    ("ROI weights", test_roi_weights),
    ("ROI too small", test_roi_too_small),
    ("Constant offset regularization", test_regularization_of_constant_offset),
    ("Target shapes", test_targets_shape_checked),
    ("Tangent projection", test_project_tangent),
    ("Control inner product", test_control_inner_of_ones),
    ("Agmon bound", test_agmon_check),
    ("Settings validation", test_settings_validation),
    ("Boundary form", test_boundary_form_clamped),
]


def main():
    return run_tests("Objective", TESTS)


if __name__ == "__main__":
    exit(main())
