#!/usr/bin/env python3
"""
Tests for the reference domain, profile admissibility and mapped coefficients
"""
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose
from scipy.integrate import quad

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from src.exceptions import GridTooCoarse, ValidationError
from src.geometry import (
    ReferenceDomain, boundary_geometry, coefficient_derivative, mapped_surface, mapped_volume,
    physical_coordinates, pull_back, reference_coordinates, transform_coefficients, validate_profile,
)


def small_domain(Nx=17, Nz=21):
    return ReferenceDomain.from_total(1.0, 0.25, 1.0, Nx, Nz)


def bump_profile(dom, amplitude):
    return dom.reference_profile().with_values(dom.ell0 + amplitude * np.sin(np.pi * dom.x / dom.Lx) ** 4)


def test_domain_split():
    dom = small_domain()
    assert dom.Nz_fix == 5
    assert dom.Nz_var == 17
    assert dom.Nz == 21
    assert dom.j0 == 4
    assert abs(dom.z[dom.j0]) < 1e-15
    assert_allclose(dom.z[[0, -1]], [-0.25, 1.0])


def test_domain_rejects_misaligned_interface():
    try:
        ReferenceDomain.from_total(1.0, 0.25, 1.0, 17, 20)
    except ValidationError:
        return
    raise AssertionError("a grid without a node on z = 0 was accepted")


def test_grid_too_coarse():
    try:
        ReferenceDomain.from_total(1.0, 0.25, 1.0, 4, 21)
    except GridTooCoarse:
        return
    raise AssertionError("Nx = 4 was accepted")


def test_node_masks_partition():
    dom = small_domain(9, 11)
    masks = dom.node_masks()
    total = sum(m.astype(int) for m in masks.values())
    assert np.all(total == 1)
    assert masks["top"].sum() == dom.Nx - 2
    assert masks["side"].sum() == 2 * dom.Nz


def test_reference_profile_coefficients():
    dom = small_domain()
    coeffs = transform_coefficients(dom.reference_profile(), dom)
    assert_allclose(coeffs.ratio, 1.0)
    assert_allclose(coeffs.omega1, 1.0)
    assert_allclose(coeffs.cxz, 0.0)
    assert_allclose(coeffs.cz, 0.0)
    assert_allclose(coeffs.czz, 1.0)
    assert_allclose(mapped_volume(coeffs), 1.25, rtol=1e-12)


def test_mapped_volume_matches_area():
    dom = small_domain()
    for amplitude in (0.05, 0.1, -0.2):
        coeffs = transform_coefficients(bump_profile(dom, amplitude), dom)
        assert_allclose(mapped_volume(coeffs), 0.25 + 1.0 + amplitude * 3.0 / 8.0, rtol=1e-10)


# (profile deviation, its derivative, integral of the deviation) on [0, 1]
QUADRATURE_PROFILES = {
    "parabola": (lambda x: 0.4 * x * (1.0 - x), lambda x: 0.4 * (1.0 - 2.0 * x), 0.4 / 6.0),
    "cubic": (lambda x: 0.2 * x**2 * (1.0 - x), lambda x: 0.2 * (2.0 * x - 3.0 * x**2), 0.2 / 12.0),
    "bump": (lambda x: 0.1 * np.sin(np.pi * x) ** 4,
             lambda x: 0.4 * np.pi * np.sin(np.pi * x) ** 3 * np.cos(np.pi * x), 0.1 * 3.0 / 8.0),
}


def observed_orders(errors):
    errors = np.asarray(errors)
    if errors[0] <= 1e-12:
        return None
    return np.log2(errors[:-1] / errors[1:])


def test_mapped_quadrature_order():
    for name, (deviation, slope, area) in QUADRATURE_PROFILES.items():
        length = quad(lambda x: np.sqrt(1.0 + slope(x) ** 2), 0.0, 1.0, epsabs=1e-14, epsrel=1e-14)[0]
        volume_errors, surface_errors = [], []
        for Nx in (17, 33, 65):
            dom = small_domain(Nx=Nx)
            coeffs = transform_coefficients(dom.reference_profile().with_values(dom.ell0 + deviation(dom.x)), dom)
            volume_errors.append(abs(mapped_volume(coeffs) - (1.25 + area)))
            surface_errors.append(abs(mapped_surface(coeffs, dom) - length))
        assert surface_errors[-1] <= 1e-3, name
        assert volume_errors[-1] <= 1e-3, name
        for kind, errors in (("volume", volume_errors), ("surface", surface_errors)):
            orders = observed_orders(errors)
            if orders is not None:
                assert np.min(orders) >= 1.9, f"{name} {kind}: errors {errors}"


def test_mapped_surface_flat():
    dom = small_domain()
    coeffs = transform_coefficients(dom.reference_profile(), dom)
    assert_allclose(mapped_surface(coeffs, dom), dom.Lx, rtol=1e-12)


def test_validate_profile():
    dom = small_domain()
    assert validate_profile(dom.reference_profile(), dom).admissible

    far = validate_profile(bump_profile(dom, 0.9), dom)
    assert not far.admissible
    assert not far.closeness
    assert far.positivity

    shifted = validate_profile(dom.reference_profile().with_values(np.full(dom.Nx, 1.1)), dom)
    assert not shifted.traces
    assert shifted.closeness and shifted.positivity


def test_coefficient_derivative_matches_difference():
    dom = small_domain()
    ell = bump_profile(dom, 0.1)
    dell = np.sin(2.0 * np.pi * dom.x) * np.sin(np.pi * dom.x) ** 4
    dell[[0, 1, -2, -1]] = 0.0
    eps = 1e-6
    plus = transform_coefficients(ell.with_values(ell.ell + eps * dell), dom)
    minus = transform_coefficients(ell.with_values(ell.ell - eps * dell), dom)
    deriv = coefficient_derivative(ell, dell, dom)
    for name in ("czz", "cz", "cxz", "iface_hi", "volume_weights", "omega1"):
        fd = (getattr(plus, name) - getattr(minus, name)) / (2.0 * eps)
        assert_allclose(getattr(deriv, name), fd, atol=1e-6, err_msg=name)


def test_boundary_geometry_flat():
    dom = small_domain()
    geo = boundary_geometry(dom.reference_profile())
    assert_allclose(geo.sigma, 1.0)
    assert_allclose(geo.nu[:, 0], 0.0)
    assert_allclose(geo.nu[:, 1], 1.0)
    assert_allclose(geo.curvature, 0.0, atol=1e-12)


def test_physical_coordinates():
    dom = small_domain()
    ell = bump_profile(dom, 0.1)
    X, Z = physical_coordinates(dom, ell)
    assert_allclose(Z[:, -1], ell.ell)
    assert_allclose(Z[:, 0], -0.25)
    assert_allclose(X[:, 3], dom.x)


def test_pull_back_round_trip():
    dom = small_domain()
    ell = bump_profile(dom, 0.1)
    X, Z = physical_coordinates(dom, ell)
    x_ref, z_ref = reference_coordinates(dom, ell, X, Z)
    assert_allclose(x_ref, np.broadcast_to(dom.x[:, None], dom.shape), rtol=0, atol=1e-15)
    assert_allclose(z_ref, np.broadcast_to(dom.z[None, :], dom.shape), rtol=1e-14, atol=1e-15)
    field = pull_back(lambda x, z: x * z + z**2, dom, ell)
    assert_allclose(field, X * Z + Z**2, rtol=1e-14)


TESTS = [
    ("Domain split", test_domain_split),
    ("Misaligned interface", test_domain_rejects_misaligned_interface),
    ("Grid too coarse", test_grid_too_coarse),
    ("Node masks", test_node_masks_partition),
    ("Reference coefficients", test_reference_profile_coefficients),
    ("Mapped volume", test_mapped_volume_matches_area),
    ("Quadrature order", test_mapped_quadrature_order),
    ("Mapped surface", test_mapped_surface_flat),
    ("Profile admissibility", test_validate_profile),
    ("Coefficient derivative", test_coefficient_derivative_matches_difference),
    ("Boundary geometry", test_boundary_geometry_flat),
    ("Physical coordinates", test_physical_coordinates),
    ("Pull-back round trip", test_pull_back_round_trip),
]


def run_tests(title, tests):
    """Run test functions, print a summary and return an exit status"""
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    results = []
    for name, func in tests:
        try:
            func()
            results.append((name, True))
        except Exception as e:
            print(f"❌ {name}: {type(e).__name__}: {e}")
            results.append((name, False))

    print("\n" + "=" * 60)
    print("TEST SUMMARY")
    print("=" * 60)
    all_passed = True
    for name, passed in results:
        status = "✅ PASS" if passed else "❌ FAIL"
        print(f"{name:.<40} {status}")
        all_passed = all_passed and passed
    return 0 if all_passed else 1


def main():
    return run_tests("Geometry", TESTS)


if __name__ == "__main__":
    exit(main())
