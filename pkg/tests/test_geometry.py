"""Quadrature exactness, source placement, and body conventions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wakeflow.geometry import (
    BodyGeometry,
    make_annulus_quadrature,
    make_sphere_quadrature,
    place_sources,
    surface_integral,
    volume_integral,
)


def test_weights_sum_to_sphere_area():
    q = make_sphere_quadrature(12)
    assert q.weights.sum() == pytest.approx(4 * np.pi, abs=1e-12)
    assert np.all(q.weights > 0)
    assert np.allclose(np.linalg.norm(q.nodes, axis=1), 1.0, atol=1e-14)


def test_sphere_quadrature_polynomial_exactness():
    q = make_sphere_quadrature(8)
    assert np.abs(q.weights @ q.nodes).max() <= 1e-12  # odd integrand
    x1sq = q.weights @ q.nodes[:, 0] ** 2
    assert x1sq == pytest.approx(4 * np.pi / 3, abs=1e-10)
    # degree-6 mixed moment: int x1^2 x2^2 x3^2 = 4 pi / 105
    m = q.weights @ (q.nodes[:, 0] ** 2 * q.nodes[:, 1] ** 2 * q.nodes[:, 2] ** 2)
    assert m == pytest.approx(4 * np.pi / 105, abs=1e-12)


def test_sphere_quadrature_refinement_improves():
    f = lambda n: np.exp(n[:, 0] + 0.5 * n[:, 1])
    exact = surface_integral(make_sphere_quadrature(40), 1.0, f)
    errs = [abs(surface_integral(make_sphere_quadrature(o), 1.0, f) - exact) for o in (4, 8)]
    assert errs[1] <= errs[0] / 2


def test_sphere_quadrature_minimum_order():
    with pytest.raises(ValueError):
        make_sphere_quadrature(1)


def test_surface_integral_values():
    q = make_sphere_quadrature(10)
    assert surface_integral(q, 2.0, lambda p: np.ones(len(p))) == pytest.approx(16 * np.pi, rel=1e-13)
    f = lambda p: np.linalg.norm(p, axis=1) ** -2
    assert surface_integral(q, 5.0, f) == pytest.approx(4 * np.pi, rel=1e-13)


def test_annulus_total_weight():
    ann = make_annulus_quadrature(1.0, 2.0, n_radial=8, sphere_order=6)
    vol = 4 * np.pi / 3 * (8 - 1)
    assert ann.weights.sum() == pytest.approx(vol, rel=1e-10)
    assert volume_integral(ann, lambda p: np.ones(len(p))) == pytest.approx(28 * np.pi / 3, rel=1e-10)


def test_annulus_radial_singularity():
    ann = make_annulus_quadrature(1.0, 16.0, n_radial=12, sphere_order=4)
    val = volume_integral(ann, lambda p: np.linalg.norm(p, axis=1) ** -4.0)
    assert val == pytest.approx(4 * np.pi * (1 - 1 / 16.0), rel=1e-8)


def test_annulus_validation():
    with pytest.raises(ValueError):
        make_annulus_quadrature(2.0, 1.0)


def test_place_sources_radius_and_axis():
    pts = place_sources(1.0, 1, 0.5)
    assert pts.shape == (1, 3)
    assert np.allclose(pts[0], [0.5, 0.0, 0.0])  # on the translation axis
    pts = place_sources(2.0, 64, 0.45)
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.9, atol=1e-14)


@given(st.integers(min_value=2, max_value=4096))
@settings(max_examples=25, deadline=None)
def test_place_sources_distinct(count):
    pts = place_sources(1.0, count, 0.5)
    sub = pts[np.random.default_rng(count).choice(count, size=min(count, 64), replace=False)]
    d = np.linalg.norm(sub[:, None, :] - pts[None, :, :], axis=-1)
    d[d == 0] = np.inf  # self distances
    assert d.min() > 0.0


def test_body_normal_points_out_of_fluid(body=BodyGeometry(1.0)):
    pts = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    n = body.normals(pts)
    assert np.allclose(n, -pts)  # into the body


def test_sigma_unit_flux_through_surface():
    # the normal convention makes the potential-flow source carry flux +1
    from wakeflow.fields import sigma_carrier

    body = BodyGeometry(1.0)
    q = make_sphere_quadrature(8)
    pts = body.radius * q.nodes
    val = body.radius**2 * np.sum(q.weights * np.einsum("ni,ni->n", sigma_carrier(pts), body.normals(pts)))
    assert val == pytest.approx(1.0, abs=1e-12)
