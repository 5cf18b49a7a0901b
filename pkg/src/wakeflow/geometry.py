"""Sphere and annular-shell geometry: quadrature rules and source placement.

The body is a sphere of radius r_b centered at the origin.  Its surface
normal points out of the fluid, i.e. into the body (n = -x/|x|), so that
the potential-flow carrier sigma = grad E carries unit flux through the
surface.  On a truncation sphere |x| = R the outward direction x/R points
out of the fluid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class SphereQuadrature:
    """Unit-sphere rule: product Gauss-Legendre (polar) x uniform (azimuth)."""

    nodes: np.ndarray  # (n, 3) unit vectors
    weights: np.ndarray  # (n,), sum = 4 pi
    order: int


def make_sphere_quadrature(order: int) -> SphereQuadrature:
    """Rule exact for spherical harmonics of degree <= 2*order - 1."""
    if order < 2:
        raise ValueError("order >= 2 required")
    u, wu = np.polynomial.legendre.leggauss(order)
    m = 2 * order
    phi = 2.0 * np.pi * np.arange(m) / m
    su = np.sqrt(1.0 - u**2)
    nodes = np.empty((order * m, 3))
    nodes[:, 0] = np.outer(su, np.cos(phi)).ravel()
    nodes[:, 1] = np.outer(su, np.sin(phi)).ravel()
    nodes[:, 2] = np.repeat(u, m)
    weights = np.repeat(wu, m) * (2.0 * np.pi / m)
    return SphereQuadrature(nodes, weights, order)


@dataclass(frozen=True)
class AnnulusQuadrature:
    """Volume rule on S < |x| < R: panelled Gauss-Legendre radii x sphere rule."""

    inner: float
    outer: float
    radii: np.ndarray  # (nr,)
    radial_weights: np.ndarray  # (nr,), include the r^2 Jacobian
    sphere: SphereQuadrature

    @property
    def points(self) -> np.ndarray:
        return (self.radii[:, None, None] * self.sphere.nodes[None, :, :]).reshape(-1, 3)

    @property
    def weights(self) -> np.ndarray:
        return (self.radial_weights[:, None] * self.sphere.weights[None, :]).ravel()


def make_annulus_quadrature(inner, outer, n_radial=16, sphere_order=12, panel_ratio=2.0) -> AnnulusQuadrature:
    """Geometric radial panels keep resolution near the inner sphere."""
    if not 0 < inner < outer:
        raise ValueError("need 0 < inner < outer")
    edges = [inner]
    while edges[-1] * panel_ratio < outer:
        edges.append(edges[-1] * panel_ratio)
    edges.append(outer)
    x, w = np.polynomial.legendre.leggauss(n_radial)
    radii = []
    rw = []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        r = 0.5 * (a + b) + half * x
        radii.append(r)
        rw.append(half * w * r**2)
    radii = np.concatenate(radii)
    rw = np.concatenate(rw)
    return AnnulusQuadrature(float(inner), float(outer), radii, rw, make_sphere_quadrature(sphere_order))


@dataclass(frozen=True)
class BodyGeometry:
    """Spherical body of radius r_b at the origin; fluid occupies |x| > r_b."""

    radius: float = 1.0
    normal_into_body: bool = True  # normal on the surface points out of the fluid

    def surface_points(self, quad: SphereQuadrature) -> np.ndarray:
        return self.radius * quad.nodes

    def normals(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts / np.linalg.norm(pts, axis=-1, keepdims=True)
        return -n if self.normal_into_body else n


def place_sources(surface_radius, count, offset_factor):
    """Spiral points on the sphere of radius offset_factor * surface_radius.

    offset_factor < 1 places the ring inside the surface (interior sources),
    > 1 outside.  count = 1 returns the single point on the +e1 axis, the
    conventional translation axis.
    """
    if count < 1:
        raise ValueError("count >= 1 required")
    rho = offset_factor * surface_radius
    if count == 1:
        return np.array([[rho, 0.0, 0.0]])
    i = np.arange(count)
    z = 1.0 - (2.0 * i + 1.0) / count
    phi = i * GOLDEN_ANGLE
    s = np.sqrt(1.0 - z**2)
    # polar axis along e1
    pts = np.column_stack([z, s * np.cos(phi), s * np.sin(phi)])
    return rho * pts


def surface_integral(quad: SphereQuadrature, R, f):
    """Integral over the sphere |x| = R of a vectorized integrand."""
    pts = R * quad.nodes
    vals = np.asarray(f(pts))
    return R**2 * np.tensordot(quad.weights, vals, axes=(0, 0))


def volume_integral(annulus: AnnulusQuadrature, f):
    """Integral over the annulus of a vectorized integrand."""
    vals = np.asarray(f(annulus.points))
    return np.tensordot(annulus.weights, vals, axes=(0, 0))
