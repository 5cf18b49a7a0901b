"""Independent reference computations the tests check the package against.

Everything here is deliberately written from scratch (closed forms, finite
differences, brute-force quadrature, time stepping) so it shares no code
path with the implementations it validates.
"""

import numpy as np

FOUR_PI = 4.0 * np.pi


def resolvent_kernel(x, omega):
    """Oscillatory Stokes kernel at zero translation, lambda = sqrt(i omega).

    (1/4pi) [ e^{-l r}/r I + grad grad ((1 - e^{-l r})/(l^2 r)) ],
    with the Hessian expanded symbolically.
    """
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x)
    lam = np.sqrt(1j * omega)
    xh = x / r
    e = np.exp(-lam * r)
    g1 = (1.0 / lam**2) * (-1.0 / r**2 + lam * e / r + e / r**2)
    g2 = (1.0 / lam**2) * (2.0 / r**3 - lam**2 * e / r - 2.0 * lam * e / r**2 - 2.0 * e / r**3)
    eye = np.eye(3)
    hess = g2 * np.outer(xh, xh) + (g1 / r) * (eye - np.outer(xh, xh))
    return (e / r) * eye / FOUR_PI + hess / FOUR_PI


def fd_divergence(field, x, h=1e-4):
    """Central-difference divergence of a vector field R^3 -> R^3."""
    x = np.asarray(x, dtype=float)
    div = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        div = div + (field(x + e)[i] - field(x - e)[i]) / (2 * h)
    return div


def fd_matrix_divergence(kernel, x, h=1e-4):
    """Divergence of each column of a matrix-valued kernel."""
    x = np.asarray(x, dtype=float)
    out = None
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        d = (kernel(x + e)[i, :] - kernel(x - e)[i, :]) / (2 * h)
        out = d if out is None else out + d
    return out


def fd_laplacian_scalar(f, x, h=1e-3):
    x = np.asarray(x, dtype=float)
    out = -6.0 * f(x) / h**2
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        out += (f(x + e) + f(x - e)) / h**2
    return out


def fd_gradient_scalar(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def mode_pde_residual(kernel, pressure, x, omega, zeta, h=1e-3):
    """Residual of (i w - Lap - zeta.grad) G + grad P columnwise (delta-free zone)."""
    x = np.asarray(x, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    eye = np.eye(3)
    G0 = np.asarray(kernel(x))
    lap = np.zeros_like(G0)
    conv = np.zeros_like(G0)
    gradP = np.zeros((3, 3), dtype=complex)
    for i in range(3):
        Gp = np.asarray(kernel(x + h * eye[i]))
        Gm = np.asarray(kernel(x - h * eye[i]))
        lap += (Gp + Gm - 2 * G0) / h**2
        conv += zeta[i] * (Gp - Gm) / (2 * h)
        gradP[i, :] = (pressure(x + h * eye[i]) - pressure(x - h * eye[i])) / (2 * h)
    return 1j * omega * G0 - lap - conv + gradP


def scalar_mode_pde_residual(phi, x, omega, zeta, h=1e-3):
    """Residual of (i w - Lap - zeta.grad) phi away from the origin."""
    x = np.asarray(x, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    lap = -6.0 * phi(x) / h**2
    conv = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        lap += (phi(x + e) + phi(x - e)) / h**2
        conv += zeta[i] * (phi(x + e) - phi(x - e)) / (2 * h)
    return 1j * omega * phi(x) - lap - conv


def loglog_slope(radii, values):
    return float(np.polyfit(np.log(radii), np.log(values), 1)[0])
