"""Fundamental solutions of the steady and time-periodic Oseen equations.

The steady velocity kernels (Stokeslet for zero translation, Oseenlet
otherwise) and the purely periodic time-mode kernels share one pressure
kernel P = -grad E, with E the Laplace fundamental solution.  The mode-k
velocity kernel is assembled as

    G_k(x) = Phi_k(x) I + (grad grad N[Phi_k])(x),

where Phi_k is the scalar convected-resolvent kernel and N[.] the
Newtonian potential; the Hessian term is the Leray projection in physical
space.  N[Phi_k] is computed semi-numerically on a radial panel grid
(`NewtonianPotentialGrid`); everything else is closed form.

Weights of the form nu(x) = |x|^alpha (1 + s(x))^beta quantify the
anisotropic wake decay, with s(x) = (|zeta||x| + zeta.x)/2 vanishing
exactly on the wake axis (the -zeta direction).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from scipy.special import gammaln

FOUR_PI = 4.0 * np.pi


def _as_points(x):
    """View input as an (n, 3) float array; remember if it was a single point."""
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    return np.atleast_2d(a), single


def _radii(pts, what="x"):
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r == 0.0):
        raise ValueError(f"{what} = 0 is outside the domain of this kernel")
    return r


# ---------------------------------------------------------------------------
# wake weight


def s_wake(x, zeta):
    """s(x) = (|zeta| |x| + zeta.x)/2; zero iff x is antiparallel to zeta."""
    pts, single = _as_points(x)
    zeta = np.asarray(zeta, dtype=float)
    zn = np.linalg.norm(zeta)
    s = 0.5 * (zn * np.linalg.norm(pts, axis=-1) + pts @ zeta)
    # clip tiny negative round-off on the wake axis
    s = np.maximum(s, 0.0)
    return s[0] if single else s


@dataclass(frozen=True)
class WakeWeight:
    """Anisotropic weight |x|^alpha (1 + s(x))^beta with translation zeta."""

    alpha: float
    beta: float
    zeta: np.ndarray

    def __call__(self, x):
        return weight_nu(self, x)


def weight_nu(w: WakeWeight, x):
    """Evaluate the wake weight; raises at x = 0 when alpha < 0."""
    pts, single = _as_points(x)
    r = np.linalg.norm(pts, axis=-1)
    if w.alpha < 0 and np.any(r == 0.0):
        raise ValueError("weight with negative radial exponent is singular at 0")
    out = r**w.alpha * (1.0 + s_wake(pts, w.zeta)) ** w.beta
    return out[0] if single else out


# ---------------------------------------------------------------------------
# steady kernels


def laplace_E(x):
    """Fundamental solution of -Laplace: 1/(4 pi |x|)."""
    pts, single = _as_points(x)
    r = _radii(pts)
    out = 1.0 / (FOUR_PI * r)
    return out[0] if single else out


def pressure_P(x):
    """Pressure kernel P(x) = x / (4 pi |x|^3) = -grad E."""
    pts, single = _as_points(x)
    r = _radii(pts)
    out = pts / (FOUR_PI * r[:, None] ** 3)
    return out[0] if single else out


@dataclass
class KernelValue:
    """Velocity tensor (columns are responses to unit point forces) + pressure."""

    velocity: np.ndarray
    pressure: np.ndarray


def stokeslet(x) -> KernelValue:
    """Steady Stokes fundamental solution (1/(8 pi |x|)) (I + xhat xhat)."""
    pts, single = _as_points(x)
    r = _radii(pts)
    xh = pts / r[:, None]
    eye = np.eye(3)
    vel = (eye + xh[:, :, None] * xh[:, None, :]) / (8.0 * np.pi * r[:, None, None])
    pres = pts / (FOUR_PI * r[:, None] ** 3)
    if single:
        return KernelValue(vel[0], pres[0])
    return KernelValue(vel, pres)


# series switchover for the (1 - e^-s)/s family; double precision cancels below this
_SERIES_CUT = 1.0e-4
# (1 - e^-s)/s = sum (-1)^n s^n / (n+1)!
_F_COEF = np.array([1.0, -1 / 2, 1 / 6, -1 / 24, 1 / 120, -1 / 720])
# (1 - e^-s - s e^-s)/s^2 = sum (-1)^n (n+1) s^n / (n+2)!
_G_COEF = np.array([1 / 2, -1 / 3, 1 / 8, -1 / 30, 1 / 144, -1 / 840])


def _expm1_ratios(s):
    """Return f = (1-e^-s)/s and g = (1-e^-s-s e^-s)/s^2, series-protected."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    f = np.empty_like(s)
    g = np.empty_like(s)
    small = s < _SERIES_CUT
    big = ~small
    sb = s[big]
    em = np.exp(-sb)
    f[big] = (1.0 - em) / sb
    g[big] = (1.0 - em - sb * em) / sb**2
    sp = s[small]
    f[small] = sum(c * sp**n for n, c in enumerate(_F_COEF))
    g[small] = sum(c * sp**n for n, c in enumerate(_G_COEF))
    return f, g


def oseenlet_steady(x, zeta) -> KernelValue:
    """Steady Oseen fundamental solution for translation zeta != 0.

    Grouping the classical four-term expression so that no factor is
    singular on the wake axis:

        G = e^-s/(4 pi r) I - f(s)/(8 pi r) (I - xhat xhat)
            + |zeta| g(s)/(16 pi) w w^T,   w = xhat + zetahat,

    with f(s) = (1-e^-s)/s and g(s) = (1-e^-s)/s^2 - e^-s/s.
    """
    pts, single = _as_points(x)
    zeta = np.asarray(zeta, dtype=float)
    zn = np.linalg.norm(zeta)
    if zn == 0.0:
        raise ValueError("oseenlet_steady requires zeta != 0; use stokeslet")
    r = _radii(pts)
    xh = pts / r[:, None]
    zh = zeta / zn
    s = s_wake(pts, zeta)
    f, g = _expm1_ratios(s)
    eye = np.eye(3)
    w = xh + zh
    ww = w[:, :, None] * w[:, None, :]
    xx = xh[:, :, None] * xh[:, None, :]
    es = np.exp(-s)[:, None, None]
    inv_r = 1.0 / r[:, None, None]
    vel = (
        es * inv_r / FOUR_PI * eye
        - f[:, None, None] * inv_r / (8.0 * np.pi) * (eye - xx)
        + zn * g[:, None, None] / (16.0 * np.pi) * ww
    )
    pres = pts / (FOUR_PI * r[:, None] ** 3)
    if single:
        return KernelValue(vel[0], pres[0])
    return KernelValue(vel, pres)


# ---------------------------------------------------------------------------
# time-periodic mode kernels


@dataclass(frozen=True)
class ModeSpec:
    """One time-Fourier mode: index k, period, translation velocity."""

    k: int
    period: float
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float))

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.k / self.period

    @property
    def mu(self) -> complex:
        """Principal root of |zeta|^2/4 + i omega; Re mu > 0 for k != 0."""
        zn = np.linalg.norm(self.zeta)
        return complex(np.sqrt(complex(zn**2 / 4.0, self.omega)))


def mode_scalar_kernel(x, m: ModeSpec):
    """Scalar convected-resolvent kernel e^{-zeta.x/2} e^{-mu|x|} / (4 pi |x|).

    Solves (i omega - Laplace - zeta.grad) Phi = delta with decay at infinity.
    """
    zn = np.linalg.norm(m.zeta)
    if m.k == 0 and zn == 0.0:
        raise ValueError("k = 0 with zeta = 0 degenerates to laplace_E")
    pts, single = _as_points(x)
    r = _radii(pts)
    mu = m.mu
    out = np.exp(-0.5 * (pts @ m.zeta) - mu * r) / (FOUR_PI * r)
    return out[0] if single else out


def _log_spherical_iv(lmax, c):
    """log i_l(c) for l = 0..lmax, c >= 0; stable for small c / large l.

    Uses i_l(c) = c^l * sum_m c^(2m) / (2^m m! (2l+2m+1)!!).
    Returns an array of shape (lmax+1, c.size).
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    ls = np.arange(lmax + 1)[:, None]
    # log (2l+1)!! = lgamma(2l+2) - l log 2 - lgamma(l+1)
    log_dfact = gammaln(2 * ls + 2) - ls * np.log(2.0) - gammaln(ls + 1)
    c2 = c[None, :] ** 2
    ssum = np.ones((lmax + 1, c.size))
    term = np.ones_like(ssum)
    for mm in range(300):
        term = term * c2 / (2.0 * (mm + 1) * (2 * ls + 2 * mm + 3))
        ssum += term
        if term.max() < 1e-17 * ssum.max():
            break
    with np.errstate(divide="ignore", invalid="ignore"):
        log_c = np.where(c > 0.0, np.log(np.where(c > 0.0, c, 1.0)), -np.inf)
        out = ls * log_c[None, :] + np.log(ssum) - log_dfact
    out[0, c == 0.0] = 0.0  # i_0(0) = 1; rows l >= 1 are -inf there
    return out


def _power_table(r, L, negative):
    """r^(-(l+1)) (negative) or r^l for l = 0..L by cumulative products.

    Finite in double precision for the radii these grids accept (the
    construction caps L and the cutoff radius so |l ln r| stays below 700).
    """
    n = r.size
    out = np.empty((n, L + 1))
    if negative:
        out[:, 0] = 1.0 / r
        for l in range(1, L + 1):
            out[:, l] = out[:, l - 1] / r
    else:
        out[:, 0] = 1.0
        for l in range(1, L + 1):
            out[:, l] = out[:, l - 1] * r
    return out


def _trim_cheb(C, rtol=1e-17):
    """Drop trailing Chebyshev rows that are negligible for every column."""
    scale = np.abs(C).max()
    keep = np.abs(C).max(axis=1) > rtol * scale if C.ndim > 1 else np.abs(C) > rtol * scale
    last = int(np.nonzero(keep)[0].max()) + 1 if np.any(keep) else 1
    return np.ascontiguousarray(C[:last])


def _legendre_all(lmax, u):
    """P_l(u), P_l'(u), P_l''(u) for l = 0..lmax by stable recurrences."""
    u = np.asarray(u, dtype=float)
    P = np.zeros((lmax + 1,) + u.shape)
    dP = np.zeros_like(P)
    ddP = np.zeros_like(P)
    P[0] = 1.0
    if lmax >= 1:
        P[1] = u
        dP[1] = 1.0
    for l in range(1, lmax):
        P[l + 1] = ((2 * l + 1) * u * P[l] - l * P[l - 1]) / (l + 1)
        dP[l + 1] = dP[l - 1] + (2 * l + 1) * P[l]
        ddP[l + 1] = ddP[l - 1] + (2 * l + 1) * dP[l]
    return P, dP, ddP


class NewtonianPotentialGrid:
    """Product rule (radial panels x exact angular reduction) for N[Phi_k].

    The kernel Phi_k is axisymmetric about zetahat, so its Legendre
    coefficients in u = cos(theta) are modified-spherical-Bessel functions
    evaluated in closed form; only the radial integrals

        I1_l(r) = int_0^r s^(l+2) phi_l(s) ds,
        I2_l(r) = int_r^inf s^(1-l) phi_l(s) ds

    are numerical.  They are stored as per-panel Chebyshev antiderivatives,
    exact at arbitrary split radius r.  The radial grid is truncated where
    the e^{-(Re mu - |zeta|/2) s} envelope puts the remaining mass below
    `tol` of the total, so evaluations beyond the cutoff use the completed
    multipole sums and remain valid up to `r_max`.
    """

    def __init__(self, mode: ModeSpec, r_max: float, *, tol: float = 1e-6,
                 panel_points: int = 24, max_harmonics: int = 96):
        if mode.k == 0:
            raise ValueError("mode k = 0 is steady; no potential grid needed")
        self.mode = mode
        self.r_max = float(r_max)
        self.tol = float(tol)
        zeta = np.asarray(mode.zeta, dtype=float)
        zn = np.linalg.norm(zeta)
        self.zeta_norm = zn
        self.axis = zeta / zn if zn > 0 else np.array([0.0, 0.0, 1.0])
        mu = mode.mu
        self.mu = mu
        decay = mu.real - zn / 2.0
        if decay <= 0:
            raise ValueError("mode kernel does not decay; check zeta and k")
        self.decay = decay

        # envelope cutoff: (R/a + 1/a^2) e^{-aR} <= tol / |omega|
        a = decay
        target = tol / abs(mode.omega)
        R = max(2.0, 5.0 / a)
        for _ in range(80):
            val = (R / a + 1.0 / a**2) * np.exp(-a * R)
            if val <= target:
                break
            R *= 1.15
        self.r_cut = R

        if zn == 0.0:
            self.lmax = 0
        else:
            # harmonics needed at the largest *evaluation* radius; beyond the
            # cutoff the multipole series converges geometrically anyway
            a_max = zn * min(self.r_max, self.r_cut) / 2.0
            self.lmax = int(min(max_harmonics, np.ceil(a_max + 10 + 7 * np.sqrt(a_max))))

        edges = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        while edges[-1] < self.r_cut:
            edges.append(edges[-1] * 1.5)
        edges = [e for e in edges if e < self.r_cut] + [self.r_cut]
        self.edges = np.asarray(edges)
        self._build_panels(panel_points)

    # -- construction -------------------------------------------------------

    def _integrands(self, s):
        """psi1 = s^(l+2) phi_l, psi2 = s^(1-l) phi_l at radii s, all l.

        phi_l(s) = (-1)^l (2l+1)/(4 pi s) e^{-mu s} i_l(|zeta| s / 2) is the
        exact Legendre coefficient of the scalar kernel; products with the
        radial powers are fused in log space so large l never overflows.
        """
        L = self.lmax
        ls = np.arange(L + 1)[:, None]
        s = np.asarray(s, dtype=float)
        log_s = np.log(s)
        log_il = _log_spherical_iv(L, 0.5 * self.zeta_norm * s)
        pref = ((-1.0) ** ls) * (2 * ls + 1) / FOUR_PI
        with np.errstate(under="ignore"):
            base = log_il - self.mu * s
            psi1 = pref * np.exp(base + (ls + 1) * log_s)
            psi2 = pref * np.exp(base - ls * log_s)
        return psi1, psi2

    def _build_panels(self, npts):
        deg = npts - 1
        tnodes = np.cos(np.pi * (np.arange(npts) + 0.5) / npts)
        L = self.lmax
        np_panels = len(self.edges) - 1
        self._A1 = []  # antiderivative coefficients per panel, shape (deg+2, L+1)
        self._A2 = []
        A1_left = np.zeros((np_panels, L + 1), dtype=complex)
        A2_left = np.zeros((np_panels, L + 1), dtype=complex)
        full1 = np.zeros((np_panels, L + 1), dtype=complex)
        full2 = np.zeros((np_panels, L + 1), dtype=complex)
        for p in range(np_panels):
            a, b = self.edges[p], self.edges[p + 1]
            half = 0.5 * (b - a)
            s_nodes = 0.5 * (a + b) + half * tnodes
            psi1, psi2 = self._integrands(s_nodes)
            C1 = _cheb.chebfit(tnodes, psi1.T, deg)
            C2 = _cheb.chebfit(tnodes, psi2.T, deg)
            A1 = _trim_cheb(_cheb.chebint(C1) * half)
            A2 = _trim_cheb(_cheb.chebint(C2) * half)
            self._A1.append(A1)
            self._A2.append(A2)
            A1_left[p] = _cheb.chebval(-1.0, A1)
            A2_left[p] = _cheb.chebval(-1.0, A2)
            full1[p] = _cheb.chebval(1.0, A1) - A1_left[p]
            full2[p] = _cheb.chebval(1.0, A2) - A2_left[p]
        self._A1_left = A1_left
        self._A2_left = A2_left
        self._pre1 = np.concatenate([np.zeros((1, L + 1), dtype=complex), np.cumsum(full1, axis=0)])
        suf = np.cumsum(full2[::-1], axis=0)[::-1]
        self._suf2 = np.concatenate([suf, np.zeros((1, L + 1), dtype=complex)])
        self._total1 = self._pre1[-1]

    # -- evaluation ---------------------------------------------------------

    def _l_needed(self, r):
        """Harmonics contributing at radius r, quantized for bucketing."""
        if self.lmax == 0:
            return np.zeros(np.shape(r), dtype=int)
        c = 0.5 * self.zeta_norm * np.minimum(r, self.r_cut)
        l_eff = np.ceil(c + 10 + 7 * np.sqrt(c))
        return np.minimum(8 * np.ceil(l_eff / 8).astype(int), self.lmax)

    def _radial_integrals(self, r, L):
        """I1_l(r), I2_l(r) for a batch of radii, shapes (n, L+1)."""
        r = np.asarray(r, dtype=float)
        I1 = np.empty((r.size, L + 1), dtype=complex)
        I2 = np.empty((r.size, L + 1), dtype=complex)
        beyond = r >= self.r_cut
        I1[beyond] = self._total1[: L + 1]
        I2[beyond] = 0.0
        inside = ~beyond
        if np.any(inside):
            ri = r[inside]
            p = np.clip(np.searchsorted(self.edges, ri, side="right") - 1, 0, len(self.edges) - 2)
            I1i = np.empty((ri.size, L + 1), dtype=complex)
            I2i = np.empty((ri.size, L + 1), dtype=complex)
            for pp in np.unique(p):
                sel = p == pp
                a, b = self.edges[pp], self.edges[pp + 1]
                t = (2.0 * ri[sel] - a - b) / (b - a)
                v1 = _cheb.chebval(t, self._A1[pp][:, : L + 1]).T - self._A1_left[pp, : L + 1]
                v2 = _cheb.chebval(t, self._A2[pp][:, : L + 1]).T - self._A2_left[pp, : L + 1]
                I1i[sel] = self._pre1[pp, : L + 1] + v1
                I2i[sel] = self._suf2[pp, : L + 1] - v2
            I1[inside] = I1i
            I2[inside] = I2i
        return I1, I2

    def _check_radius(self, r):
        if np.any(r > self.r_max * (1.0 + 1e-12)):
            raise ValueError("evaluation point outside the radius this grid was built for")

    def _coeffs(self, r, L, derivatives=False):
        """Legendre coefficients n_l(r) of N and their first two r-derivatives.

        n_l   = (I1 r^-(l+1) + I2 r^l) / (2l+1)
        n_l'  = (-(l+1) I1 r^-(l+2) + l I2 r^(l-1)) / (2l+1)
        n_l'' = ((l+1)(l+2) I1 r^-(l+3) + l(l-1) I2 r^(l-2)) / (2l+1) - phi_l

        The -phi_l term of n'' is not included here: its Legendre sum equals
        the scalar kernel itself and is subtracted in closed form by the
        caller.
        """
        I1, I2 = self._radial_integrals(r, L)
        ls = np.arange(L + 1).astype(float)
        inv = 1.0 / (2 * ls + 1)
        t1 = I1 * _power_table(r, L, negative=True)  # I1 r^-(l+1)
        t2 = I2 * _power_table(r, L, negative=False)  # I2 r^l
        n = (t1 + t2) * inv
        if not derivatives:
            return n, None, None
        rinv = (1.0 / r)[:, None]
        t1b = t1 * rinv
        t2b = t2 * rinv
        dn = (-(ls + 1) * t1b + ls * t2b) * inv
        ddn = ((ls + 1) * (ls + 2) * t1b * rinv + ls * (ls - 1) * t2b * rinv) * inv
        return n, dn, ddn

    def potential(self, points):
        """N[Phi_k] at an (n, 3) batch of points."""
        pts, single = _as_points(points)
        r = _radii(pts)
        self._check_radius(r)
        u = np.clip((pts @ self.axis) / r, -1.0, 1.0)
        out = np.empty(pts.shape[0], dtype=complex)
        lq = self._l_needed(r)
        for L in np.unique(lq):
            sel = lq == L
            n, _, _ = self._coeffs(r[sel], L)
            P, _, _ = _legendre_all(L, u[sel])
            out[sel] = np.einsum("nl,ln->n", n, P)
        return out[0] if single else out

    def potential_hessian(self, points):
        """N, grad N, and the 3x3 Hessian of N, via exact series derivatives."""
        pts, single = _as_points(points)
        r_all = _radii(pts)
        self._check_radius(r_all)
        N = np.empty(pts.shape[0], dtype=complex)
        grad = np.empty((pts.shape[0], 3), dtype=complex)
        hess = np.empty((pts.shape[0], 3, 3), dtype=complex)
        lq = self._l_needed(r_all)
        for L in np.unique(lq):
            sel = lq == L
            N[sel], grad[sel], hess[sel] = self._hessian_block(pts[sel], r_all[sel], L)
        if single:
            return N[0], grad[0], hess[0]
        return N, grad, hess

    def _hessian_block(self, pts, r, L):
        xh = pts / r[:, None]
        u = np.clip(xh @ self.axis, -1.0, 1.0)
        n, dn, ddn = self._coeffs(r, L, derivatives=True)
        P, dP, ddP = _legendre_all(L, u)
        N = np.einsum("nl,ln->n", n, P)
        e = self.axis
        gu = (e[None, :] - u[:, None] * xh) / r[:, None]  # grad u
        c_ndP = np.einsum("nl,ln->n", n, dP)
        c_dnP = np.einsum("nl,ln->n", dn, P)
        grad = c_dnP[:, None] * xh + c_ndP[:, None] * gu
        # the omitted -phi_l part of n'' sums to the scalar kernel itself
        phi_here = mode_scalar_kernel(pts, self.mode)

        eye = np.eye(3)
        xx = xh[:, :, None] * xh[:, None, :]
        hess_r = (eye - xx) / r[:, None, None]  # grad grad r
        xe = xh[:, :, None] * e[None, None, :]
        hess_u = (-(xe + np.swapaxes(xe, 1, 2)) + (3.0 * u[:, None, None]) * xx - u[:, None, None] * eye) / (
            r[:, None, None] ** 2
        )
        gugu = gu[:, :, None] * gu[:, None, :]
        xgu = xh[:, :, None] * gu[:, None, :]
        sym_xgu = xgu + np.swapaxes(xgu, 1, 2)
        c_nddP = np.einsum("nl,ln->n", n, ddP)
        c_dndP = np.einsum("nl,ln->n", dn, dP)
        c_ddnP = np.einsum("nl,ln->n", ddn, P) - phi_here
        hess = (
            c_ddnP[:, None, None] * xx
            + c_dnP[:, None, None] * hess_r
            + c_dndP[:, None, None] * sym_xgu
            + c_nddP[:, None, None] * gugu
            + c_ndP[:, None, None] * hess_u
        )
        return N, grad, hess

    def potential_hessian_fd(self, points, rel_step=1e-3):
        """Hessian of N by central differences with step rel_step * |x|."""
        pts, single = _as_points(points)
        r = _radii(pts)
        self._check_radius(r * (1.0 + 2.1 * rel_step))
        n = pts.shape[0]
        h = rel_step * r
        eye = np.eye(3)
        stencil = [pts]
        for i in range(3):
            stencil.append(pts + h[:, None] * eye[i])
            stencil.append(pts - h[:, None] * eye[i])
        pairs = [(0, 1), (0, 2), (1, 2)]
        for i, j in pairs:
            d = eye[i] + eye[j]
            e = eye[i] - eye[j]
            stencil.append(pts + h[:, None] * d)
            stencil.append(pts - h[:, None] * d)
            stencil.append(pts + h[:, None] * e)
            stencil.append(pts - h[:, None] * e)
        vals = self.potential(np.concatenate(stencil, axis=0)).reshape(len(stencil), n)
        N0 = vals[0]
        hess = np.empty((n, 3, 3), dtype=complex)
        h2 = h**2
        for i in range(3):
            hess[:, i, i] = (vals[1 + 2 * i] + vals[2 + 2 * i] - 2.0 * N0) / h2
        base = 7
        for idx, (i, j) in enumerate(pairs):
            vpp, vmm, vpm, vmp = vals[base + 4 * idx : base + 4 * idx + 4]
            hess[:, i, j] = hess[:, j, i] = (vpp + vmm - vpm - vmp) / (4.0 * h2)
        if single:
            return hess[0]
        return hess


def oseenlet_mode(x, m: ModeSpec, grid: NewtonianPotentialGrid, *, hessian="series") -> KernelValue:
    """Velocity kernel of time mode k != 0: Phi_k I + grad grad N[Phi_k].

    The pressure kernel is the steady P for every mode (the pressure
    responds instantaneously to the forcing).  `hessian` selects the exact
    series derivatives of the potential ("series") or central differences
    with step 1e-3 |x| ("fd"); the two agree to quadrature accuracy.
    """
    if m.k == 0:
        raise ValueError("mode k = 0 is the steady kernel")
    if grid.mode.k != m.k or grid.mode.period != m.period:
        raise ValueError("grid was built for a different mode")
    pts, single = _as_points(x)
    phi = np.atleast_1d(mode_scalar_kernel(pts, m))
    if hessian == "series":
        _, _, H = grid.potential_hessian(pts)
    elif hessian == "fd":
        H = grid.potential_hessian_fd(pts)
    else:
        raise ValueError("hessian must be 'series' or 'fd'")
    H = np.atleast_3d(H).reshape(pts.shape[0], 3, 3)
    vel = phi[:, None, None] * np.eye(3) + H
    pres = pressure_P(pts)
    if single:
        return KernelValue(vel[0], pres[0])
    return KernelValue(vel, pres)


_GRID_CACHE: dict = {}


def get_mode_grid(m: ModeSpec, r_max: float, tol: float = 1e-6) -> NewtonianPotentialGrid:
    """Shared cache of potential grids, bucketed by power-of-two radius."""
    bucket = float(2.0 ** np.ceil(np.log2(max(r_max, 1.0))))
    key = (m.k, round(m.period, 12), tuple(np.round(m.zeta, 12)), bucket, tol)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = NewtonianPotentialGrid(m, bucket, tol=tol)
        _GRID_CACHE[key] = grid
    return grid


def gamma_perp(t, x, m_base: ModeSpec, K: int):
    """Purely periodic part: sum over 0 < |k| <= K of e^{i omega_k t} G_k(x).

    Real by conjugate symmetry G_{-k} = conj(G_k); computed from k >= 1.
    """
    if K < 1:
        raise ValueError("K >= 1 required")
    pts, single = _as_points(x)
    r = _radii(pts)
    out = np.zeros((pts.shape[0], 3, 3))
    for k in range(1, K + 1):
        mk = ModeSpec(k, m_base.period, m_base.zeta)
        grid = get_mode_grid(mk, float(np.max(r)))
        gk = oseenlet_mode(pts, mk, grid).velocity
        out = out + 2.0 * np.real(np.exp(1j * mk.omega * t) * gk)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# surface integrals and slope fits


def surface_J(a, b, R, zeta, quad):
    """Quadrature of int_{|x|=R} |x|^-a (1 + s(x))^-b dS."""
    if R <= 0:
        raise ValueError("R must be positive")
    pts = R * quad.nodes
    vals = R ** (-a) * (1.0 + s_wake(pts, zeta)) ** (-b)
    return float(R**2 * np.sum(quad.weights * vals))


def decay_slope(field_eval, direction, radii):
    """Least-squares exponent p of field ~ C r^p along one direction."""
    radii = np.asarray(radii, dtype=float)
    if radii.size < 3 or np.any(radii <= 0):
        raise ValueError("need at least 3 positive radii")
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    vals = np.array([float(field_eval(r * d)) for r in radii])
    if np.any(vals <= 0):
        raise ValueError("field must be positive at the sample radii")
    slope, _ = np.polyfit(np.log(radii), np.log(vals), 1)
    return float(slope)
