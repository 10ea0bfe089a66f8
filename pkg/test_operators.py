#!/usr/bin/env python3
"""
Tests for the mapped Laplacian, conormal traces, plate and fractional operators
"""
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from src.exceptions import GridTooCoarse, UnknownEdge
from src.geometry import ReferenceDomain, physical_coordinates, transform_coefficients
from src.operators import (
    FractionalSpec, assemble_mapped_operator, conormal_trace, fractional_neumann_apply, hinged_fractional_power,
    hinged_second_difference, neumann_eigenvalues,
)
from test_geometry import run_tests


def small_domain(Nx=9, Nz=11):
    return ReferenceDomain.from_total(1.0, 0.25, 1.0, Nx, Nz)


def five_point_laplacian(dom):
    n = dom.n_nodes
    A = np.zeros((n, n))
    for i in range(1, dom.Nx - 1):
        for j in range(1, dom.Nz - 1):
            r = dom.index(i, j)
            A[r, dom.index(i + 1, j)] += 1.0 / dom.dx**2
            A[r, dom.index(i - 1, j)] += 1.0 / dom.dx**2
            A[r, dom.index(i, j + 1)] += 1.0 / dom.dz**2
            A[r, dom.index(i, j - 1)] += 1.0 / dom.dz**2
            A[r, r] -= 2.0 / dom.dx**2 + 2.0 / dom.dz**2
    return A


def test_mapping_identity():
    dom = small_domain()
    L = assemble_mapped_operator(transform_coefficients(dom.reference_profile(), dom), dom)
    reference = five_point_laplacian(dom)
    assert_allclose(L.toarray(), reference, rtol=1e-12, atol=1e-12 * np.max(np.abs(reference)))


def test_laplacian_annihilates_physical_height():
    dom = small_domain(17, 21)
    ell = dom.reference_profile().with_values(1.0 + 0.2 * np.sin(np.pi * dom.x) ** 4)
    coeffs = transform_coefficients(ell, dom)
    L = assemble_mapped_operator(coeffs, dom)
    _, Z = physical_coordinates(dom, ell)
    assert np.max(np.abs(L @ Z.ravel())) < 1e-9


def test_laplacian_quadratic():
    dom = small_domain()
    L = assemble_mapped_operator(transform_coefficients(dom.reference_profile(), dom), dom)
    X, Z = np.meshgrid(dom.x, dom.z, indexing="ij")
    values = (L @ (X**2 + Z**2).ravel()).reshape(dom.shape)
    assert_allclose(values[1:-1, 1:-1], 4.0, rtol=1e-10)


def test_conormal_trace_of_height():
    dom = small_domain()
    coeffs = transform_coefficients(dom.reference_profile(), dom)
    X, Z = np.meshgrid(dom.x, dom.z, indexing="ij")
    top = conormal_trace(Z, coeffs, dom, "top")
    bottom = conormal_trace(Z, coeffs, dom, "gamma_pl")
    assert top.shape == (dom.Nx - 2,)
    assert_allclose(top, 1.0, rtol=1e-12)
    assert_allclose(bottom, -1.0, rtol=1e-12)
    left = conormal_trace(X, coeffs, dom, "left")
    assert left.shape == (dom.Nz,)
    assert_allclose(left, -1.0, rtol=1e-12)


def test_unknown_edge():
    dom = small_domain()
    coeffs = transform_coefficients(dom.reference_profile(), dom)
    try:
        conormal_trace(np.zeros(dom.shape), coeffs, dom, "diagonal")
    except UnknownEdge:
        return
    raise AssertionError("an unknown edge name was accepted")


def test_plate_eigenvalues():
    n = 129
    h = 1.0 / (n - 1)
    L = hinged_second_difference(n, h)
    D4 = (L @ L).toarray()[1:-1, 1:-1]
    eigenvalues = np.sort(np.linalg.eigvalsh(D4))[:3]
    exact = (np.arange(1, 4) * np.pi) ** 4
    assert np.all(np.abs(eigenvalues - exact) / exact <= 1e-2)


def test_plate_grid_too_coarse():
    try:
        hinged_second_difference(4, 0.25)
    except GridTooCoarse:
        return
    raise AssertionError("a 4-node plate grid was accepted")


def test_hinged_power_one_is_minus_second_difference():
    n, h = 17, 1.0 / 16
    K = hinged_fractional_power(n, h, 1.0).toarray()
    L = hinged_second_difference(n, h).toarray()
    assert_allclose(K, -L, atol=1e-10 * np.max(np.abs(L)))


def test_fractional_inverse():
    rng = np.random.default_rng(3)
    f = rng.standard_normal(17)
    for s in (0.25, 0.5, 1.0):
        spec = FractionalSpec(s=s, domain_tag="B", length=1.0)
        back = fractional_neumann_apply(fractional_neumann_apply(f, spec), spec.inverse())
        assert_allclose(back, f, atol=1e-10)


def test_fractional_matches_dense():
    n, length = 17, 1.0
    h = length / (n - 1)
    A = np.zeros((n, n))
    for i in range(1, n - 1):
        A[i, i - 1:i + 2] = [-1.0, 2.0, -1.0]
    A[0, :2] = [2.0, -2.0]
    A[-1, -2:] = [-2.0, 2.0]
    A = A / h**2 + np.eye(n)
    f = np.cos(np.linspace(0.0, 3.0, n)) + np.linspace(0.0, 1.0, n) ** 2
    spec = FractionalSpec(s=1.0, domain_tag="B", length=length)
    assert_allclose(fractional_neumann_apply(f, spec), A @ f, atol=1e-10 * np.max(np.abs(A @ f)))
    assert_allclose(np.sort(neumann_eigenvalues(n, h)), np.sort(np.linalg.eigvals(A - np.eye(n)).real), atol=1e-8)


def test_fractional_zero_power_is_copy():
    f = np.arange(5.0)
    out = fractional_neumann_apply(f, FractionalSpec(s=0.0, domain_tag="B", length=1.0))
    assert_allclose(out, f)
    out[0] = 99.0
    assert f[0] == 0.0


TESTS = [
    ("Mapping identity", test_mapping_identity),
    ("Physical height harmonic", test_laplacian_annihilates_physical_height),
    ("Quadratic exactness", test_laplacian_quadratic),
    ("Conormal traces", test_conormal_trace_of_height),
    ("Unknown edge", test_unknown_edge),
    ("Plate eigenvalues", test_plate_eigenvalues),
    ("Plate grid too coarse", test_plate_grid_too_coarse),
    ("Hinged power", test_hinged_power_one_is_minus_second_difference),
    ("Fractional inverse", test_fractional_inverse),
    ("Fractional dense", test_fractional_matches_dense),
    ("Fractional s = 0", test_fractional_zero_power_is_copy),
]


def main():
    return run_tests("Operators", TESTS)


if __name__ == "__main__":
    exit(main())
