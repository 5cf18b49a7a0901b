"""Time-Fourier mode fields: kernel superpositions and their evaluators.

A real T-periodic field u(t, x) is stored as complex spatial coefficients
u_k(x) for k = 0..K with the negative modes implied by conjugation,

    u(t, x) = u_0(x) + sum_{k>=1} 2 Re(e^{i omega_k t} u_k(x)).

Field objects expose `velocity_modes`, `pressure_modes`, and finite
difference gradients on (n, 3) point batches; solvers combine them by
superposition.  Gradients use the convention (grad u)_{ij} = d_i u_j.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .kernels import (
    FOUR_PI,
    ModeSpec,
    get_mode_grid,
    laplace_E,
    oseenlet_mode,
    oseenlet_steady,
    pressure_P,
    stokeslet,
)


def run_jobs(fn, jobs, threads=1):
    """Run fn(*args) over a job list, optionally on a small thread pool.

    Each job writes to a disjoint output slice, so results are identical
    regardless of scheduling.
    """
    if threads <= 1 or len(jobs) <= 1:
        for j in jobs:
            fn(*j)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(lambda j: fn(*j), jobs))


def sigma_carrier(points):
    """Potential-flow source field sigma = grad E = -x/(4 pi |x|^3)."""
    return -pressure_P(points)


def reconstruct(modes, period, t):
    """Real field values at time(s) t from complex modes (K+1, n, ...)."""
    t = np.asarray(t, dtype=float)
    omega1 = 2.0 * np.pi / period
    out = np.broadcast_to(modes[0].real, t.shape + modes[0].shape).copy()
    for k in range(1, modes.shape[0]):
        phase = np.exp(1j * k * omega1 * t).reshape(t.shape + (1,) * modes[0].ndim)
        out += 2.0 * np.real(phase * modes[k])
    return out


def mode_convolve(a_modes, b_modes, K_out=None):
    """Modes of the pointwise product of two real fields given by modes.

    (ab)_k = sum_{p+q=k} a_p b_q with a_{-p} = conj(a_p); the product is
    evaluated on a uniform time grid dense enough to be exact for the
    band-limited inputs.
    """
    Ka, Kb = a_modes.shape[0] - 1, b_modes.shape[0] - 1
    if K_out is None:
        K_out = Ka + Kb
    n_t = 2 * (Ka + Kb) + 1
    n_t = max(n_t, 2 * K_out + 1)
    ts = np.arange(n_t) * (2.0 * np.pi / n_t)  # phase grid; period drops out
    a_t = _phase_reconstruct(a_modes, ts)
    b_t = _phase_reconstruct(b_modes, ts)
    prod = a_t * b_t
    out = np.empty((K_out + 1,) + prod.shape[1:], dtype=complex)
    for k in range(K_out + 1):
        phase = np.exp(-1j * k * ts).reshape((n_t,) + (1,) * (prod.ndim - 1))
        out[k] = (prod * phase).mean(axis=0)
    return out


def _phase_reconstruct(modes, phases):
    out = np.broadcast_to(modes[0].real, phases.shape + modes[0].shape).copy()
    for k in range(1, modes.shape[0]):
        ph = np.exp(1j * k * phases).reshape(phases.shape + (1,) * modes[0].ndim)
        out = out + 2.0 * np.real(ph * modes[k])
    return out


def convective_modes(v_modes, grad_modes, K_out):
    """Modes of v . grad v from the mode arrays of v and its gradient.

    Exact for band-limited fields: the product is sampled on a phase grid
    dense enough for the doubled band and projected back.
    """
    Kin = v_modes.shape[0] - 1
    n_t = 2 * (2 * Kin) + 2
    phases = np.arange(n_t) * (2.0 * np.pi / n_t)
    n = v_modes.shape[1]
    acc = np.zeros((K_out + 1, n, 3), dtype=complex)
    for ph in phases:
        v_t = v_modes[0].real.copy()
        g_t = grad_modes[0].real.copy()
        for k in range(1, Kin + 1):
            e = np.exp(1j * k * ph)
            v_t += 2.0 * np.real(e * v_modes[k])
            g_t += 2.0 * np.real(e * grad_modes[k])
        conv = np.einsum("ni,nij->nj", v_t, g_t)
        for k in range(K_out + 1):
            acc[k] += conv * np.exp(-1j * k * ph)
    return acc / n_t


def grad_velocity_modes_fwd(field, points, step=1e-4, K_max=None):
    """One-sided finite-difference gradients; half the cost of central ones."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    h = step * (1.0 + np.linalg.norm(pts, axis=1))
    stack = [pts] + [pts + h[:, None] * e for e in np.eye(3)]
    vals = field.velocity_modes(np.concatenate(stack, axis=0), K_max=K_max)
    K1 = vals.shape[0]
    vals = vals.reshape(K1, 4, n, 3)
    out = np.empty((K1, n, 3, 3), dtype=complex)
    for i in range(3):
        out[:, :, i, :] = (vals[:, i + 1] - vals[:, 0]) / h[None, :, None]
    return out, vals[:, 0]


class ModeKernelSet:
    """Velocity/pressure kernels of the time modes for one (zeta, period)."""

    def __init__(self, zeta, period, K, r_max, tol=1e-6, threads=1):
        self.zeta = np.asarray(zeta, dtype=float)
        self.period = float(period)
        self.K = int(K)
        self.r_max = float(r_max)
        self.tol = tol
        self.threads = int(threads)
        self.zeta_norm = float(np.linalg.norm(self.zeta))

    def mode(self, k) -> ModeSpec:
        return ModeSpec(k, self.period, self.zeta)

    def velocity(self, k, disp):
        """Kernel tensor (n, 3, 3) at displacement batch disp = x - y."""
        if k == 0:
            if self.zeta_norm == 0.0:
                return stokeslet(disp).velocity
            return oseenlet_steady(disp, self.zeta).velocity
        grid = get_mode_grid(self.mode(k), self.r_max, self.tol)
        return oseenlet_mode(disp, self.mode(k), grid).velocity

    def pressure(self, disp):
        """Pressure kernel (n, 3); shared by every mode."""
        return pressure_P(disp)


class SourceModeField:
    """Superposition of fundamental solutions with per-mode strengths.

    sources: (m, 3) singularity locations (outside the flow region)
    strengths: (K+1, m, 3) complex force coefficients
    """

    def __init__(self, kernels: ModeKernelSet, sources, strengths, chunk=1024):
        self.kernels = kernels
        self.sources = np.atleast_2d(np.asarray(sources, dtype=float))
        self.strengths = np.asarray(strengths, dtype=complex)
        if self.strengths.shape[1:] != (self.sources.shape[0], 3):
            raise ValueError("strengths must have shape (K+1, n_sources, 3)")
        self.chunk = chunk

    @property
    def n_modes(self):
        return self.strengths.shape[0]

    @property
    def period(self):
        return self.kernels.period

    def velocity_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        out = np.zeros((kmax + 1, n, 3), dtype=complex)

        def job(k, sl):
            disp = (pts[sl, None, :] - self.sources[None, :, :]).reshape(-1, 3)
            ker = self.kernels.velocity(k, disp).reshape(sl.stop - sl.start, -1, 3, 3)
            out[k, sl] = np.einsum("nmij,mj->ni", ker, self.strengths[k])

        jobs = [
            (k, slice(lo, min(lo + self.chunk, n)))
            for k in range(kmax + 1)
            if np.any(self.strengths[k])
            for lo in range(0, n, self.chunk)
        ]
        run_jobs(job, jobs, self.kernels.threads)
        return out

    def pressure_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        out = np.zeros((kmax + 1, n), dtype=complex)
        disp = (pts[:, None, :] - self.sources[None, :, :]).reshape(-1, 3)
        P = self.kernels.pressure(disp).reshape(n, -1, 3)
        for k in range(kmax + 1):
            ck = self.strengths[k]
            if not np.any(ck):
                continue
            out[k] = np.einsum("nmj,mj->n", P, ck)
        return out


class CarrierModeField:
    """Flux carrier: sigma = grad E scaled by the per-mode total flux.

    Velocity Phi_k sigma solves mode k exactly with pressure
    Phi_k (-i omega_k E + zeta . sigma); an oscillating flux therefore
    carries the slowly decaying |x|^-1 pressure contribution.
    """

    def __init__(self, flux_modes, zeta, period):
        self.flux_modes = np.asarray(flux_modes, dtype=complex)
        self.zeta = np.asarray(zeta, dtype=float)
        self.period = float(period)

    @property
    def n_modes(self):
        return self.flux_modes.shape[0]

    def velocity_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        sig = sigma_carrier(pts)
        return self.flux_modes[: kmax + 1, None, None] * sig[None, :, :]

    def pressure_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        E = laplace_E(pts)
        zs = sigma_carrier(pts) @ self.zeta
        omegas = 2.0 * np.pi * np.arange(kmax + 1) / self.period
        return self.flux_modes[: kmax + 1, None] * (-1j * omegas[:, None] * E[None, :] + zs[None, :])


class VolumePotentialField:
    """Volume potential of a mode-resolved forcing over a fixed quadrature.

    Evaluation points close to a quadrature node are pushed out to a small
    mollification radius tied to the local cell size; the represented
    potential differs from the singular one at the level of the quadrature
    error itself.
    """

    def __init__(self, kernels: ModeKernelSet, quad_points, quad_weights, density_modes, chunk=1024):
        self.kernels = kernels
        self.qp = np.atleast_2d(np.asarray(quad_points, dtype=float))
        self.qw = np.asarray(quad_weights, dtype=float)
        self.g = np.asarray(density_modes, dtype=complex)
        self.chunk = chunk
        self.moll_radius = 0.35 * float(np.cbrt(np.median(self.qw)))

    @property
    def n_modes(self):
        return self.g.shape[0]

    @property
    def period(self):
        return self.kernels.period

    def velocity_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        out = np.zeros((kmax + 1, n, 3), dtype=complex)
        wg = self.qw[None, :, None] * self.g  # fold weights into densities

        def job(k, sl):
            disp = self._mollified_disp(pts[sl])
            ker = self.kernels.velocity(k, disp).reshape(sl.stop - sl.start, -1, 3, 3)
            out[k, sl] = np.einsum("nmij,mj->ni", ker, wg[k])

        jobs = [
            (k, slice(lo, min(lo + self.chunk, n)))
            for k in range(kmax + 1)
            if np.any(wg[k])
            for lo in range(0, n, self.chunk)
        ]
        run_jobs(job, jobs, self.kernels.threads)
        return out

    def _mollified_disp(self, pts):
        """Displacements with a floor that regularizes near-node evaluations."""
        disp = (pts[:, None, :] - self.qp[None, :, :]).reshape(-1, 3)
        d = np.linalg.norm(disp, axis=1)
        tiny = d < self.moll_radius
        if np.any(tiny):
            disp = disp.copy()
            safe = np.maximum(d[tiny], 1e-14)
            disp[tiny] *= (self.moll_radius / safe)[:, None]
            disp[d < 1e-12] = self.moll_radius * np.array([1.0, 0.0, 0.0])
        return disp

    def pressure_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        out = np.zeros((kmax + 1, n), dtype=complex)
        wg = self.qw[None, :, None] * self.g
        for lo in range(0, n, self.chunk):
            sl = slice(lo, min(lo + self.chunk, n))
            P = self.kernels.pressure(self._mollified_disp(pts[sl])).reshape(sl.stop - sl.start, -1, 3)
            for k in range(kmax + 1):
                if np.any(wg[k]):
                    out[k, sl] = np.einsum("nmj,mj->n", P, wg[k])
        return out


class SumModeField:
    """Pointwise sum of mode fields with equal mode counts."""

    def __init__(self, *parts):
        parts = [p for p in parts if p is not None]
        if not parts:
            raise ValueError("need at least one field")
        self.parts = parts

    @property
    def n_modes(self):
        return max(p.n_modes for p in self.parts)

    @property
    def period(self):
        return self.parts[0].period

    def velocity_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        out = np.zeros((kmax + 1, pts.shape[0], 3), dtype=complex)
        for p in self.parts:
            pv = p.velocity_modes(pts, K_max=kmax)
            out[: pv.shape[0]] += pv
        return out

    def pressure_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        out = np.zeros((kmax + 1, pts.shape[0]), dtype=complex)
        for p in self.parts:
            pv = p.pressure_modes(pts, K_max=kmax)
            out[: pv.shape[0]] += pv
        return out


class ZeroModeField:
    """The zero field, as a placeholder solution."""

    def __init__(self, period, n_modes):
        self.period = float(period)
        self.n_modes = int(n_modes)

    def velocity_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        return np.zeros((kmax + 1, pts.shape[0], 3), dtype=complex)

    def pressure_modes(self, points, K_max=None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kmax = self.n_modes - 1 if K_max is None else min(K_max, self.n_modes - 1)
        return np.zeros((kmax + 1, pts.shape[0]), dtype=complex)


def grad_velocity_modes(field, points, step=1e-5, K_max=None):
    """(grad u)_k by central differences, shape (K+1, n, 3, 3), [.., i, j] = d_i u_j.

    The step is scaled by 1 + |x| per point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    h = step * (1.0 + np.linalg.norm(pts, axis=1))
    eye = np.eye(3)
    stencil = []
    for i in range(3):
        stencil.append(pts + h[:, None] * eye[i])
        stencil.append(pts - h[:, None] * eye[i])
    vals = field.velocity_modes(np.concatenate(stencil, axis=0), K_max=K_max)
    K1 = vals.shape[0]
    vals = vals.reshape(K1, 6, n, 3)
    out = np.empty((K1, n, 3, 3), dtype=complex)
    for i in range(3):
        out[:, :, i, :] = (vals[:, 2 * i] - vals[:, 2 * i + 1]) / (2.0 * h[None, :, None])
    return out


def velocity_at(field, t, points):
    """Real velocity values u(t, x) for scalar t."""
    return reconstruct(field.velocity_modes(points), field.period, t)


def pressure_at(field, t, points):
    """Real pressure values p(t, x) for scalar t."""
    return reconstruct(field.pressure_modes(points), field.period, t)


def time_grid(period, n_times):
    """Uniform grid on one period, endpoint excluded (trapezoid = exact mean)."""
    return np.arange(n_times) * (period / n_times)
