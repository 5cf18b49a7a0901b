"""Truncated-domain solver with the wake-adapted artificial boundary condition.

On the truncation sphere |x| = R the flow satisfies

    (x/R) . (grad v - p I - v (x) v / 2) + (1 + s(x))/R v = 0,

whose linear part is enforced by least-squares collocation with two source
families (inside the body and outside the truncation sphere); the quadratic
part and the convective term are lagged, so every fixed-point sweep is one
linear solve with an updated right-hand side.  The time modes couple only
through those lagged terms.

The module also carries the weak-form ingredients: the bilinear/trilinear
forms a, b, c, the divergence-free boundary-data extension with the
potential-flow flux carrier, the time-Fourier block systems of the
Galerkin ODE, and the energy-inequality check.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from . import fields as F
from .exterior import BoundaryDataModes, tikhonov_lstsq
from .fields import (
    CarrierModeField,
    convective_modes,
    grad_velocity_modes_fwd,
    ModeKernelSet,
    SourceModeField,
    SumModeField,
    VolumePotentialField,
    grad_velocity_modes,
    mode_convolve,
    reconstruct,
    sigma_carrier,
)
from .geometry import (
    BodyGeometry,
    SphereQuadrature,
    make_annulus_quadrature,
    make_sphere_quadrature,
    place_sources,
)
from .kernels import laplace_E, pressure_P, s_wake, stokeslet

# ---------------------------------------------------------------------------
# artificial boundary operator


@dataclass(frozen=True)
class AbcOperator:
    """Boundary operator on the truncation sphere |x| = R."""

    R: float
    zeta: np.ndarray
    include_quadratic: bool = True

    def apply(self, v, grad_v, p, x):
        """Operator values from field arrays at points x on the sphere.

        v: (n, 3), grad_v: (n, 3, 3) with [., i, j] = d_i v_j, p: (n,).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xh = x / self.R
        out = np.einsum("ni,nij->nj", xh, grad_v) - p[:, None] * xh
        if self.include_quadratic:
            out = out - 0.5 * np.einsum("ni,ni->n", xh, v)[:, None] * v
        out = out + ((1.0 + s_wake(x, self.zeta)) / self.R)[:, None] * v
        return out


def abc_residual(op: AbcOperator, solution, x, t):
    """Pointwise residual of the boundary operator for a solution field."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(pts, axis=1)
    if not np.allclose(r, op.R, rtol=1e-8):
        raise ValueError("abc_residual expects points on the truncation sphere")
    v = reconstruct(solution.velocity_modes(pts), solution.period, t)
    gv = reconstruct(grad_velocity_modes(solution, pts), solution.period, t)
    p = reconstruct(solution.pressure_modes(pts), solution.period, t)
    return op.apply(v, gv, p, pts)


# ---------------------------------------------------------------------------
# time-Fourier basis and block systems


@dataclass(frozen=True)
class TimeFourierBasis:
    """Real orthonormal basis 1, sqrt2 cos(w_k t), sqrt2 sin(w_k t), k <= K."""

    period: float
    K: int

    def omega(self, k):
        return 2.0 * np.pi * k / self.period

    def sample(self, times):
        """Rows: psi_0, psi_1^c, psi_1^s, ..., psi_K^c, psi_K^s at the times."""
        times = np.asarray(times, dtype=float)
        rows = [np.ones_like(times)]
        for k in range(1, self.K + 1):
            rows.append(np.sqrt(2.0) * np.cos(self.omega(k) * times))
            rows.append(np.sqrt(2.0) * np.sin(self.omega(k) * times))
        return np.stack(rows)

    def gram(self, n_times=None):
        """Discrete Gram matrix on a uniform grid (identity when exact)."""
        if n_times is None:
            n_times = 4 * self.K
        ts = np.arange(n_times) * (self.period / n_times)
        S = self.sample(ts)
        return S @ S.T / n_times


def assemble_block_system(A, k, period):
    """[[A, -w_k I], [w_k I, A]] coupling the sin/cos coefficients of mode k."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if k < 1:
        raise ValueError("k >= 1; the k = 0 system is A itself")
    M = A.shape[0]
    w = 2.0 * np.pi * k / period
    top = np.hstack([A, -w * np.eye(M)])
    bot = np.hstack([w * np.eye(M), A])
    return np.vstack([top, bot])


def solve_periodic_ode(A, G0, Gc, Gs, period):
    """Periodic solution of alpha' + A alpha = G from the modes of G.

    G0: (M,), Gc/Gs: (K, M) coefficients on the sqrt2-normalized basis.
    Returns (alpha0, alphac, alphas) in the same layout.
    """
    A = np.asarray(A, dtype=float)
    G0 = np.asarray(G0, dtype=float)
    Gc = np.atleast_2d(np.asarray(Gc, dtype=float))
    Gs = np.atleast_2d(np.asarray(Gs, dtype=float))
    M = A.shape[0]
    alpha0 = np.linalg.solve(A, G0)
    K = Gc.shape[0]
    ac = np.zeros((K, M))
    as_ = np.zeros((K, M))
    for k in range(1, K + 1):
        B = assemble_block_system(A, k, period)
        sol = np.linalg.solve(B, np.concatenate([Gs[k - 1], Gc[k - 1]]))
        as_[k - 1] = sol[:M]
        ac[k - 1] = sol[M:]
    return alpha0, ac, as_


def periodic_ode_trajectory(alpha0, alphac, alphas, period, times):
    """Evaluate the Fourier series of the coefficients at given times."""
    basis = TimeFourierBasis(period, alphac.shape[0])
    S = basis.sample(times)  # (2K+1, nt)
    coef = np.vstack([alpha0[None, :], np.empty((2 * alphac.shape[0], alpha0.size))])
    coef[1::2] = alphac
    coef[2::2] = alphas
    return S.T @ coef


def rk4_periodic_orbit(A, G_fn, period, steps_per_period=2048, n_periods=50, alpha_init=None):
    """March alpha' = -A alpha + G(t) to its periodic orbit with classical RK4.

    Returns the trajectory over the final period, sampled at the step points
    (including both endpoints).  Used as the independent check of the
    frequency-domain block solves.
    """
    A = np.asarray(A, dtype=float)
    M = A.shape[0]
    a = np.zeros(M) if alpha_init is None else np.asarray(alpha_init, dtype=float).copy()
    dt = period / steps_per_period

    def f(t, y):
        return G_fn(t) - A @ y

    t = 0.0
    for _ in range((n_periods - 1) * steps_per_period):
        k1 = f(t, a)
        k2 = f(t + dt / 2, a + dt / 2 * k1)
        k3 = f(t + dt / 2, a + dt / 2 * k2)
        k4 = f(t + dt, a + dt * k3)
        a = a + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
    traj = np.empty((steps_per_period + 1, M))
    traj[0] = a
    for i in range(steps_per_period):
        k1 = f(t, a)
        k2 = f(t + dt / 2, a + dt / 2 * k1)
        k3 = f(t + dt / 2, a + dt / 2 * k2)
        k4 = f(t + dt, a + dt * k3)
        a = a + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        traj[i + 1] = a
    return traj


# ---------------------------------------------------------------------------
# divergence-free extension of the boundary data


def _bump(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def _bump_prime(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos]) / t[pos] ** 2
    return out


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    f, g = _bump(t), _bump(1.0 - t)
    return f / (f + g)


def smooth_step_prime(t):
    t = np.asarray(t, dtype=float)
    f, g = _bump(t), _bump(1.0 - t)
    fp, gp = _bump_prime(t), _bump_prime(1.0 - t)
    return (fp * g + f * gp) / (f + g) ** 2


class ExtensionField:
    """Divergence-free extension h~ = Phi(t) sigma + curl(psi W).

    W is the explicit vector potential of a Stokes source ensemble fitted to
    the zero-flux remainder of the trace, and psi a radial cutoff equal to 1
    near the body and 0 beyond the collar, so

        h~ = Phi_k sigma + psi(r) u_st + psi'(r) xhat x W,

    which is exactly solenoidal and reduces to the trace on the surface.
    """

    def __init__(self, data: BoundaryDataModes, *, n_sources=192, source_offset=0.35,
                 collar=(1.2, 1.9), tikhonov=1e-12):
        body = data.body
        self.body = body
        self.period = data.period
        self.collar = (collar[0] * body.radius, collar[1] * body.radius)
        self.flux_modes = data.flux_modes()
        pts = data.points
        rhs_modes = data.modes - self.flux_modes[:, None, None] * sigma_carrier(pts)[None, :, :]
        self.sources = place_sources(body.radius, n_sources, source_offset)
        disp = (pts[:, None, :] - self.sources[None, :, :]).reshape(-1, 3)
        ker = stokeslet(disp).velocity.reshape(pts.shape[0], -1, 3, 3)
        w = np.sqrt(data.quad.weights * body.radius**2)
        G = np.einsum("n,nmij->nimj", w, ker).reshape(3 * pts.shape[0], -1)
        U, s, Vh = np.linalg.svd(G, full_matrices=False)
        lam = tikhonov * s[0]
        filt = s / (s**2 + lam**2)
        # one right-hand side per time mode, rows ordered (node, component)
        rhs = (w[:, None, None] * rhs_modes.transpose(1, 2, 0)).reshape(3 * pts.shape[0], -1)
        C = Vh.conj().T @ (filt[:, None] * (U.conj().T @ rhs))
        self.strengths = C.reshape(self.sources.shape[0], 3, -1).transpose(2, 0, 1)
        resid = (G @ C - rhs) / w.repeat(3)[:, None]
        self.trace_residual = float(np.abs(resid).max())

    @property
    def n_modes(self):
        return self.flux_modes.shape[0]

    def _psi(self, r):
        a, b = self.collar
        t = (b - r) / (b - a)
        return smooth_step(t), -smooth_step_prime(t) / (b - a)

    def _stokes_parts(self, pts):
        disp = pts[:, None, :] - self.sources[None, :, :]
        d = np.linalg.norm(disp, axis=-1)
        ker = stokeslet(disp.reshape(-1, 3)).velocity.reshape(pts.shape[0], -1, 3, 3)
        u_st = np.einsum("nmij,kmj->kni", ker, self.strengths)
        # vector potential W = c x (x - y) / (8 pi |x - y|)
        Wker = disp / (8.0 * np.pi * d[..., None])
        W = np.cross(self.strengths[:, None, :, :], Wker[None, :, :, :]).sum(axis=2)
        return u_st, W

    def velocity_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        r = np.linalg.norm(pts, axis=1)
        xh = pts / r[:, None]
        psi, dpsi = self._psi(r)
        out = self.flux_modes[: kmax + 1, None, None] * sigma_carrier(pts)[None, :, :]
        active = psi > 0
        if np.any(active):
            u_st, W = self._stokes_parts(pts[active])
            curl_part = psi[active][None, :, None] * u_st + dpsi[active][None, :, None] * np.cross(
                xh[active][None, :, :], W
            )
            out[:, active, :] += curl_part[: kmax + 1]
        return out

    def pressure_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        return np.zeros((kmax + 1, pts.shape[0]), dtype=complex)

    def dt_velocity_modes(self, points):
        """Modes of the time derivative (multiplication by i omega_k)."""
        vm = self.velocity_modes(points)
        omegas = 2.0 * np.pi * np.arange(self.n_modes) / self.period
        return 1j * omegas[:, None, None] * vm


def flux_extension(data: BoundaryDataModes, **kwargs) -> ExtensionField:
    """Build the solenoidal extension of the boundary trace."""
    body = data.body
    collar = kwargs.get("collar", (1.2, 1.9))
    if "R" in kwargs:
        R = kwargs.pop("R")
        if collar[1] * body.radius >= R:
            raise ValueError("collar does not fit inside the truncated domain")
    return ExtensionField(data, **kwargs)


# ---------------------------------------------------------------------------
# forms a, b, c


def form_a(v, grad_v, w, grad_w, *, R, zeta, annulus, sphere):
    """a(v,w) = (grad v, grad w) - (zeta.grad v, w) + ((1+s)/R v, w)_{|x|=R}."""
    pts = annulus.points
    gv = grad_v(pts)
    gw = grad_w(pts)
    vol = np.sum(annulus.weights * np.einsum("nij,nij->n", gv, gw))
    conv = np.sum(annulus.weights * np.einsum("i,nij,nj->n", np.asarray(zeta, float), gv, w(pts)))
    bpts = R * sphere.nodes
    coef = (1.0 + s_wake(bpts, zeta)) / R
    bnd = R**2 * np.sum(sphere.weights * coef * np.einsum("ni,ni->n", v(bpts), w(bpts)))
    return vol - conv + bnd


def form_b(v_div, p, *, annulus):
    """b(v,p) = -(div v, p)."""
    pts = annulus.points
    return -np.sum(annulus.weights * v_div(pts) * p(pts))


def form_c(u, v, grad_v, w, *, R, annulus, sphere):
    """c(u,v,w) = (u.grad v, w) - (1/2)((x/R . u)(v . w))_{|x|=R}."""
    pts = annulus.points
    vol = np.sum(annulus.weights * np.einsum("ni,nij,nj->n", u(pts), grad_v(pts), w(pts)))
    bpts = R * sphere.nodes
    un = np.einsum("ni,ni->n", u(bpts), sphere.nodes)
    bnd = 0.5 * R**2 * np.sum(sphere.weights * un * np.einsum("ni,ni->n", v(bpts), w(bpts)))
    return vol - bnd


def norm_R_zeta_sq(v, grad_v, *, R, zeta, annulus, sphere):
    """|v|_(R,|zeta|)^2 = |grad v|^2_{Omega_R} + (1/R + |zeta|/2)|v|^2_{|x|=R}."""
    pts = annulus.points
    gv = grad_v(pts)
    vol = np.sum(annulus.weights * np.einsum("nij,nij->n", gv, np.conj(gv)).real)
    bpts = R * sphere.nodes
    vals = v(bpts)
    zn = np.linalg.norm(np.asarray(zeta, dtype=float))
    bnd = (1.0 / R + zn / 2.0) * R**2 * np.sum(sphere.weights * np.einsum("ni,ni->n", vals, np.conj(vals)).real)
    return vol + bnd


# ---------------------------------------------------------------------------
# truncated problem and solver


@dataclass
class TruncatedProblem:
    """Problem definition plus the discretization sizes of the collocation."""

    data: BoundaryDataModes
    R: float
    zeta: np.ndarray
    forcing_modes: object = None  # callable points -> (K+1, n, 3) complex
    include_quadratic: bool = True
    K: int | None = None  # solve modes; defaults to the data's mode count
    sigma_order: int = 12
    outer_order: int = 12
    n_inner: int = 128
    inner_offset: float = 0.45
    n_outer: int = 72
    outer_offset: float = 1.4
    tikhonov: float = 1e-12
    forcing_sphere_order: int = 4
    forcing_n_radial: int = 4
    forcing_r_cap: float = 16.0
    grid_tol: float = 1e-6
    threads: int = 1
    mode_rhs_cut: float = 1e-7  # relative rhs level below which a mode is skipped

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float)
        if self.K is None:
            self.K = self.data.K
        if self.R <= self.data.body.radius:
            raise ValueError("truncation radius must exceed the body radius")


@dataclass
class ResidualReport:
    sigma_max: float
    sigma_l2: float
    abc_max: float
    abc_l2: float
    condition: float


class TruncatedSolution(SumModeField):
    """Carrier + two-family source ensemble + lagged-forcing volume potential."""

    def __init__(self, parts, problem, residuals: ResidualReport, contraction_ratios, strengths):
        super().__init__(*parts)
        self.problem = problem
        self.residuals = residuals
        self.contraction_ratios = contraction_ratios
        self.strengths = strengths

    def velocity(self, t, points):
        return F.velocity_at(self, t, points)

    def pressure(self, t, points):
        return F.pressure_at(self, t, points)


class _Assembly:
    """Collocation matrices for one truncated problem; reused across sweeps."""

    def __init__(self, prob: TruncatedProblem):
        self.prob = prob
        body = prob.data.body
        R = prob.R
        self.sigma_quad = prob.data.quad  # Dirichlet rows live on the data nodes
        self.outer_quad = make_sphere_quadrature(prob.outer_order)
        self.x_sig = body.radius * self.sigma_quad.nodes
        self.x_abc = R * self.outer_quad.nodes
        self.w_sig = np.sqrt(self.sigma_quad.weights * body.radius**2)
        self.w_abc = np.sqrt(self.outer_quad.weights * R**2)
        src_in = place_sources(body.radius, prob.n_inner, prob.inner_offset)
        src_out = place_sources(R, prob.n_outer, prob.outer_offset)
        self.sources = np.vstack([src_in, src_out])
        # forcing quadrature on the truncated annulus
        self.forcing_quad = make_annulus_quadrature(
            1.05 * body.radius,
            min(prob.forcing_r_cap, 0.98 * R),
            n_radial=prob.forcing_n_radial,
            sphere_order=prob.forcing_sphere_order,
        )
        r_need = float(np.linalg.norm(self.x_abc, axis=1).max() + np.linalg.norm(self.sources, axis=1).max() + 1.0)
        self.kernels = ModeKernelSet(prob.zeta, prob.data.period, prob.K, r_max=r_need,
                                     tol=prob.grid_tol, threads=prob.threads)
        self.delta = 2e-4 * R  # directional-derivative step on the sphere
        self._svd = {}
        self._forcing_mats = {}
        self._quad_mats = {}
        self._abc_val_src = {}
        self._abc_val_quad = {}

    # -- generic row generators --------------------------------------------

    def _value_matrix(self, k, x, centers):
        disp = (x[:, None, :] - centers[None, :, :]).reshape(-1, 3)
        ker = self.kernels.velocity(k, disp).reshape(x.shape[0], centers.shape[0], 3, 3)
        return ker  # (n, m, 3, 3): u_i response to unit force e_j

    def _abc_rows(self, k, centers):
        """Linear ABC operator applied to each source column, on x_abc.

        rows[n, m, i, j]: component i of the operator output at node n for a
        unit force e_j at center m.
        """
        x = self.x_abc
        xh = self.outer_quad.nodes
        d = self.delta
        val = self._value_matrix(k, x, centers)
        vp = self._value_matrix(k, x + d * xh, centers)
        vm = self._value_matrix(k, x - d * xh, centers)
        ddir = (vp - vm) / (2.0 * d)  # (xhat . grad) of each column
        disp = (x[:, None, :] - centers[None, :, :]).reshape(-1, 3)
        P = pressure_P(disp).reshape(x.shape[0], centers.shape[0], 3)
        robin = ((1.0 + s_wake(x, self.prob.zeta)) / self.prob.R)[:, None, None, None]
        rows = ddir + robin * val - xh[:, None, :, None] * P[:, :, None, :]
        return rows, val

    def solve_matrix(self, k):
        """SVD of the stacked (Sigma Dirichlet; linear ABC) system for mode k."""
        if k in self._svd:
            return self._svd[k]
        val_sig = self._value_matrix(k, self.x_sig, self.sources)
        rows_abc, val_abc = self._abc_rows(k, self.sources)
        self._abc_val_src[k] = val_abc
        n_s, n_b, m = self.x_sig.shape[0], self.x_abc.shape[0], self.sources.shape[0]
        G = np.empty((3 * (n_s + n_b), 3 * m), dtype=complex)
        G[: 3 * n_s] = np.einsum("n,nmij->nimj", self.w_sig, val_sig).reshape(3 * n_s, 3 * m)
        G[3 * n_s :] = np.einsum("n,nmij->nimj", self.w_abc, rows_abc).reshape(3 * n_b, 3 * m)
        U, s, Vh = np.linalg.svd(G, full_matrices=False)
        self._svd[k] = (U, s, Vh)
        return self._svd[k]

    def forcing_matrices(self, k):
        """Same row generators applied to the forcing-quadrature points."""
        if k in self._forcing_mats:
            return self._forcing_mats[k]
        q = self.forcing_quad.points
        val_sig = self._value_matrix(k, self.x_sig, q)
        rows_abc, val_abc = self._abc_rows(k, q)
        self._abc_val_quad[k] = val_abc
        self._forcing_mats[k] = (val_sig, rows_abc)
        return self._forcing_mats[k]

    def quad_stencil_steps(self):
        q = self.forcing_quad.points
        return 1e-4 * (1.0 + np.linalg.norm(q, axis=1))

    def quad_field_matrices(self, k):
        """Kernel tensors at the forcing points and forward-shifted stencils.

        Only the source-family columns are materialized: when the lagged
        forcing is re-evaluated, the volume part's own contribution to
        v . grad v is third order in the data and is dropped.
        """
        if k in self._quad_mats:
            return self._quad_mats[k]
        q = self.forcing_quad.points
        h = self.quad_stencil_steps()
        pts = [q]
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            pts.append(q + h[:, None] * e)
        stack = np.concatenate(pts, axis=0)
        src = self._value_matrix(k, stack, self.sources)
        self._quad_mats[k] = (src, h)
        return self._quad_mats[k]


def _tikhonov_apply(svd, rhs, rel_reg):
    U, s, Vh = svd
    lam = rel_reg * s[0]
    filt = s / (s**2 + lam**2)
    return Vh.conj().T @ (filt * (U.conj().T @ rhs))


def solve_truncated_linear(problem: TruncatedProblem, *, assembly: _Assembly | None = None,
                           abc_rhs_modes=None, forcing_density=None) -> TruncatedSolution:
    """One linear solve: Dirichlet trace on the body, linear ABC at |x| = R.

    abc_rhs_modes: optional (K+1, n_abc, 3) extra right-hand side on the
    truncation sphere (the lagged quadratic term).  forcing_density:
    optional (K+1, n_q, 3) volume forcing at the forcing-quadrature points.
    """
    asm = assembly or _Assembly(problem)
    prob = problem
    K = prob.K
    data = prob.data
    flux_modes = np.zeros(K + 1, dtype=complex)
    fm = data.flux_modes()
    flux_modes[: fm.shape[0]] = fm
    carrier = CarrierModeField(flux_modes, prob.zeta, data.period)

    n_s, n_b, m = asm.x_sig.shape[0], asm.x_abc.shape[0], asm.sources.shape[0]
    strengths = np.zeros((K + 1, m, 3), dtype=complex)
    skipped_rhs = {}
    sig_res_max = abc_res_max = 0.0
    sig_res_l2 = abc_res_l2 = 0.0
    cond = 0.0

    # carrier traces
    car_sig = carrier.velocity_modes(asm.x_sig)
    car_abc_v = carrier.velocity_modes(asm.x_abc)
    car_abc_g = grad_velocity_modes(carrier, asm.x_abc)
    car_abc_p = carrier.pressure_modes(asm.x_abc)
    op_lin = AbcOperator(prob.R, prob.zeta, include_quadratic=False)

    data_modes = np.zeros((K + 1, n_s, 3), dtype=complex)
    data_modes[: data.modes.shape[0]] = data.modes

    if forcing_density is not None:
        fd = np.asarray(forcing_density, dtype=complex)
        if fd.shape[0] < K + 1:  # pad missing high modes with zeros
            pad = np.zeros((K + 1,) + fd.shape[1:], dtype=complex)
            pad[: fd.shape[0]] = fd
            forcing_density = pad
        else:
            forcing_density = fd
    vol_field = None
    vol_rhs_max = 0.0
    if forcing_density is not None and np.any(forcing_density):
        vol_field = VolumePotentialField(asm.kernels, asm.forcing_quad.points, asm.forcing_quad.weights,
                                         forcing_density)

    scale = max(np.abs(data_modes).max(), 1e-300)
    for k in range(K + 1):
        rhs_sig = data_modes[k] - car_sig[k]
        rhs_abc = -op_lin.apply(car_abc_v[k], car_abc_g[k], car_abc_p[k], asm.x_abc)
        if abc_rhs_modes is not None:
            rhs_abc = rhs_abc + abc_rhs_modes[k]
        if forcing_density is not None and np.any(forcing_density[k]):
            val_sig_q, rows_abc_q = asm.forcing_matrices(k)
            wg = asm.forcing_quad.weights[:, None] * forcing_density[k]
            dv_sig = np.einsum("nqij,qj->ni", val_sig_q, wg)
            dv_abc = np.einsum("nqij,qj->ni", rows_abc_q, wg)
            vol_rhs_max = max(vol_rhs_max, float(np.abs(dv_sig).max()), float(np.abs(dv_abc).max()))
            rhs_sig = rhs_sig - dv_sig
            rhs_abc = rhs_abc - dv_abc
        nrm = max(np.abs(rhs_sig).max(), np.abs(rhs_abc).max())
        if nrm <= prob.mode_rhs_cut * scale + 1e-300:
            skipped_rhs[k] = nrm
            continue
        rhs = np.concatenate(
            [(asm.w_sig[:, None] * rhs_sig).ravel(), (asm.w_abc[:, None] * rhs_abc).ravel()]
        )
        svd = asm.solve_matrix(k)
        c = _tikhonov_apply(svd, rhs, prob.tikhonov)
        strengths[k] = c.reshape(m, 3)
        U, s, Vh = svd
        res = _apply_G(svd, c) - rhs
        r_sig = res[: 3 * n_s].reshape(n_s, 3) / asm.w_sig[:, None]
        r_abc = res[3 * n_s :].reshape(n_b, 3) / asm.w_abc[:, None]
        sig_res_max = max(sig_res_max, float(np.abs(r_sig).max()))
        abc_res_max = max(abc_res_max, float(np.abs(r_abc).max()))
        sig_res_l2 = max(sig_res_l2, float(np.linalg.norm(res[: 3 * n_s])))
        abc_res_l2 = max(abc_res_l2, float(np.linalg.norm(res[3 * n_s :])))
        cond = max(cond, float(s[0] / s[-1]))

    src_field = SourceModeField(asm.kernels, asm.sources, strengths)
    # the volume part only stays in the returned field if it moved the
    # right-hand side above the mode cutoff; below that its contribution is
    # smaller than the reported collocation residual
    keep_vol = vol_field is not None and vol_rhs_max > prob.mode_rhs_cut * scale
    parts = [src_field, carrier] + ([vol_field] if keep_vol else [])
    report = ResidualReport(sig_res_max, sig_res_l2, abc_res_max, abc_res_l2, cond)
    out = TruncatedSolution(parts, prob, report, [], strengths)
    out.skipped_modes = skipped_rhs
    return out


def _apply_G(svd, c):
    U, s, Vh = svd
    return U @ (s * (Vh @ c))


def picard_solve(problem: TruncatedProblem, max_iter=10, tol=1e-9) -> TruncatedSolution:
    """Fixed-point iteration with lagged convective and quadratic ABC terms.

    Each sweep solves the linear problem with forcing f - v.grad v and the
    boundary term (1/2)(x/R . v) v moved to the right-hand side.  Divergence
    of the increment at the collocation nodes measures contraction.
    """
    asm = _Assembly(problem)
    prob = problem
    K = prob.K
    q = asm.forcing_quad.points
    n_q = q.shape[0]
    f_modes = np.zeros((K + 1, n_q, 3), dtype=complex)
    if prob.forcing_modes is not None:
        fm = np.asarray(prob.forcing_modes(q), dtype=complex)
        f_modes[: fm.shape[0]] = fm

    # build the expensive per-mode matrices up front (optionally threaded)
    content = [k for k in range(K + 1)
               if np.any(np.abs(f_modes[k]) > 1e-14) or (k < prob.data.K + 1 and np.any(prob.data.modes[k]))]
    from .fields import run_jobs

    kinds = [asm.solve_matrix, asm.forcing_matrices, asm.quad_field_matrices]
    warm_jobs = [(fn, k) for k in sorted(content, reverse=True) for fn in kinds]
    run_jobs(lambda fn, k: fn(k), warm_jobs, prob.threads)
    sol = solve_truncated_linear(prob, assembly=asm,
                                 forcing_density=f_modes if np.any(f_modes) else None)
    ratios = []
    increments = []
    prev_vq = None
    for it in range(max_iter):
        vq, gq = _field_at_quad(asm, sol)
        if prev_vq is not None:
            inc = float(np.abs(vq - prev_vq).max())
            increments.append(inc)
            if len(increments) >= 2 and increments[-2] > 0:
                ratios.append(increments[-1] / increments[-2])
            scale = max(float(np.abs(vq).max()), 1e-300)
            if inc <= tol * scale:
                break
        prev_vq = vq
        conv = convective_modes(vq, gq, K)
        g_density = f_modes - conv
        # drop relatively negligible lag modes so no matrices are built for them
        gmax = np.abs(g_density).max()
        if gmax > 0:
            for k in range(K + 1):
                if np.abs(g_density[k]).max() < 1e-6 * gmax:
                    g_density[k] = 0.0
        abc_rhs = _quadratic_abc_modes(asm, sol, K) if prob.include_quadratic else None
        sol = solve_truncated_linear(prob, assembly=asm, abc_rhs_modes=abc_rhs,
                                     forcing_density=g_density if np.any(g_density) else None)
    sol.contraction_ratios = ratios
    sol.increments = increments
    return sol


def _field_at_quad(asm: _Assembly, sol: TruncatedSolution):
    """Velocity modes and gradients at the forcing points via cached kernels.

    Uses forward differences on a cached four-point stencil; the forcing is
    a quadratically small correction, so first-order gradients suffice.
    """
    prob = asm.prob
    K = prob.K
    q = asm.forcing_quad.points
    n_q = q.shape[0]
    vq = np.zeros((K + 1, 4, n_q, 3), dtype=complex)  # [mode, stencil, point, comp]
    strengths = sol.strengths
    carrier = next(p for p in sol.parts if isinstance(p, CarrierModeField))
    h = asm.quad_stencil_steps()
    for k in range(K + 1):
        if not np.any(strengths[k]):
            continue
        src, _ = asm.quad_field_matrices(k)
        vq[k] = np.einsum("nmij,mj->ni", src, strengths[k]).reshape(4, n_q, 3)
    stack = [q] + [q + h[:, None] * e for e in np.eye(3)]
    car = carrier.velocity_modes(np.concatenate(stack, axis=0)).reshape(K + 1, 4, n_q, 3)
    vq += car
    vals = vq[:, 0]
    grads = np.empty((K + 1, n_q, 3, 3), dtype=complex)
    for i in range(3):
        grads[:, :, i, :] = (vq[:, i + 1] - vals) / h[None, :, None]
    return vals, grads


def _velocity_at_abc(asm: _Assembly, sol: TruncatedSolution):
    """Velocity modes on the truncation sphere via cached value matrices."""
    K = asm.prob.K
    x = asm.x_abc
    vol = next((p for p in sol.parts if isinstance(p, VolumePotentialField)), None)
    carrier = next(p for p in sol.parts if isinstance(p, CarrierModeField))
    out = carrier.velocity_modes(x)
    for k in range(K + 1):
        if np.any(sol.strengths[k]):
            asm.solve_matrix(k)
            out[k] += np.einsum("nmij,mj->ni", asm._abc_val_src[k], sol.strengths[k])
        if vol is not None and np.any(vol.g[k]):
            asm.forcing_matrices(k)
            out[k] += np.einsum("nqij,qj->ni", asm._abc_val_quad[k], vol.qw[:, None] * vol.g[k])
    return out


def _quadratic_abc_modes(asm: _Assembly, sol: TruncatedSolution, K_out):
    """Modes of (1/2)(x/R . v) v on the truncation sphere (lagged term)."""
    x = asm.x_abc
    xh = asm.outer_quad.nodes
    vm = _velocity_at_abc(asm, sol)
    Kin = vm.shape[0] - 1
    n_t = 2 * (2 * Kin) + 2
    phases = np.arange(n_t) * (2.0 * np.pi / n_t)
    acc = np.zeros((K_out + 1, x.shape[0], 3), dtype=complex)
    for ph in phases:
        v_t = vm[0].real.copy()
        for k in range(1, Kin + 1):
            v_t += 2.0 * np.real(np.exp(1j * k * ph) * vm[k])
        term = 0.5 * np.einsum("ni,ni->n", xh, v_t)[:, None] * v_t
        for k in range(K_out + 1):
            acc[k] += term * np.exp(-1j * k * ph)
    return acc / n_t


# ---------------------------------------------------------------------------
# energy inequality


@dataclass
class EnergyReport:
    lhs: float
    rhs: float
    slack: float
    defect_bound: float
    smallness: float  # the flux-smallness quantity; < 1 required by the theory
    passed: bool


def energy_check(sol: TruncatedSolution, h_ext: ExtensionField, *, forcing_modes=None,
                 annulus=None, sphere=None, n_times=None, quad_tol=0.02,
                 precomputed=None) -> EnergyReport:
    """Quadrature of both sides of the energy inequality for theta = v - h~.

    The inequality is an identity for an exact smooth solution; the slack
    must stay above minus a defect bound assembled from the collocation
    residuals and the quadrature tolerance.  `precomputed` may carry mode
    arrays of the solution on the given quadratures (keys v_sol_ann,
    g_sol_ann, v_sol_b) to avoid re-evaluating the expensive kernels; when
    the given annulus starts above the body surface, the missing collar is
    integrated on a dedicated thin shell so the volume terms cover all of
    the truncated domain.
    """
    prob = sol.problem
    R, zeta, period = prob.R, prob.zeta, prob.data.period
    rb = prob.data.body.radius
    K = sol.n_modes - 1
    if annulus is None:
        annulus = make_annulus_quadrature(1.002 * rb, R, n_radial=5, sphere_order=6)
    if sphere is None:
        sphere = make_sphere_quadrature(8)
    if n_times is None:
        n_times = max(8, 2 * K + 2)
    ts = F.time_grid(period, n_times)
    pre = precomputed or {}

    pieces = [(annulus, pre.get("v_sol_ann"), pre.get("g_sol_ann"))]
    if annulus.inner > 1.01 * rb:
        collar = make_annulus_quadrature(1.002 * rb, annulus.inner, n_radial=4,
                                         sphere_order=annulus.sphere.order)
        pieces.append((collar, None, None))
    kk = pre["v_sol_ann"].shape[0] - 1 if "v_sol_ann" in pre else K

    piece_data = []
    for quad, v_pre, g_pre in pieces:
        apts = quad.points
        v_a = v_pre if v_pre is not None else sol.velocity_modes(apts, K_max=kk)
        gv_a = g_pre if g_pre is not None else grad_velocity_modes_fwd(sol, apts, K_max=kk)[0]
        h_a = h_ext.velocity_modes(apts)
        gh_a = grad_velocity_modes(h_ext, apts)
        dth_a = h_ext.dt_velocity_modes(apts)
        f_a = np.zeros((v_a.shape[0],) + apts.shape, dtype=complex)
        if forcing_modes is not None:
            fm = np.asarray(forcing_modes(apts), dtype=complex)
            ku = min(fm.shape[0], f_a.shape[0])
            f_a[:ku] = fm[:ku]
        piece_data.append((quad, v_a, gv_a, h_a, gh_a, dth_a, f_a))

    bpts = R * sphere.nodes
    v_b = pre.get("v_sol_b")
    if v_b is None:
        v_b = sol.velocity_modes(bpts, K_max=kk)
    h_b = h_ext.velocity_modes(bpts)
    gv_b = grad_velocity_modes_fwd(sol, bpts, K_max=kk)[0]
    p_b = sol.pressure_modes(bpts, K_max=kk)

    zn = np.linalg.norm(zeta)
    coef_R = (1.0 + s_wake(bpts, zeta)) / R
    lhs = rhs = 0.0
    theta_b_l2 = 0.0
    abc_l2 = 0.0
    op = AbcOperator(R, zeta, include_quadratic=prob.include_quadratic)
    for t in ts:
        for quad, v_a, gv_a, h_a, gh_a, dth_a, f_a in piece_data:
            va, ha = reconstruct(v_a, period, t), reconstruct(h_a, period, t)
            gva, gha = reconstruct(gv_a, period, t), reconstruct(gh_a, period, t)
            th_a = va - ha
            gth_a = gva - gha
            fa = reconstruct(f_a, period, t)
            dtha = reconstruct(dth_a, period, t)
            w = quad.weights
            lhs += np.sum(w * np.einsum("nij,nij->n", gth_a, gth_a))
            # -a(h~, theta)
            rhs -= np.sum(w * np.einsum("nij,nij->n", gha, gth_a))
            rhs += np.sum(w * np.einsum("i,nij,nj->n", zeta, gha, th_a))
            # -c(v, h~, theta), volume part
            rhs -= np.sum(w * np.einsum("ni,nij,nj->n", va, gha, th_a))
            # (f - dt h~, theta)
            rhs += np.sum(w * np.einsum("ni,ni->n", fa - dtha, th_a))

        vb, hb = reconstruct(v_b, period, t), reconstruct(h_b, period, t)
        th_b = vb - hb
        lhs += (1.0 / R + zn / 2.0) * R**2 * np.sum(sphere.weights * np.einsum("ni,ni->n", th_b, th_b))
        rhs -= R**2 * np.sum(sphere.weights * coef_R * np.einsum("ni,ni->n", hb, th_b))
        rhs += 0.5 * R**2 * np.sum(
            sphere.weights * np.einsum("ni,ni->n", vb, sphere.nodes) * np.einsum("ni,ni->n", hb, th_b)
        )
        theta_b_l2 += R**2 * np.sum(sphere.weights * np.einsum("ni,ni->n", th_b, th_b))
        gvb = reconstruct(gv_b, period, t)
        pb = reconstruct(p_b, period, t)
        bres = op.apply(vb, gvb, pb, bpts)
        abc_l2 += R**2 * np.sum(sphere.weights * np.einsum("ni,ni->n", bres, bres))

    lhs /= n_times
    rhs /= n_times
    theta_b_l2 = np.sqrt(theta_b_l2 / n_times)
    abc_l2 = np.sqrt(abc_l2 / n_times)
    defect = abc_l2 * theta_b_l2 + quad_tol * (abs(lhs) + abs(rhs)) + 1e-12
    # flux-smallness quantity: 2 sup|Phi| (C_S |sigma|_3 + 1/(8 pi R))
    flux = h_ext.flux_modes
    phi_sup = float(np.abs(flux[0]) + 2.0 * np.sum(np.abs(flux[1:])))
    sigma3 = _sigma_l3_norm(prob.data.body.radius, R)
    smallness = 2.0 * phi_sup * (sigma3 + 1.0 / (8.0 * np.pi * R))
    slack = rhs - lhs
    return EnergyReport(lhs, rhs, slack, defect, smallness, bool(slack >= -defect))


def _sigma_l3_norm(rb, R):
    """L^3 norm of sigma = grad E over the annulus (closed form)."""
    # |sigma| = 1/(4 pi r^2); int |sigma|^3 = int_rb^R (4 pi r^2) (4 pi r^2)^-3 dr
    val = (rb ** (-3) - R ** (-3)) / (3.0 * (4.0 * np.pi) ** 2)
    return val ** (1.0 / 3.0)
