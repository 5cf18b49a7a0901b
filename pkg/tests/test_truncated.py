"""Truncated-domain machinery: ABC, forms, block systems, extension, energy."""

import numpy as np
import pytest

from wakeflow.exterior import BoundaryDataModes, ExteriorSolveConfig, solve_exterior
from wakeflow.fields import grad_velocity_modes, sigma_carrier
from wakeflow.geometry import BodyGeometry, make_annulus_quadrature, make_sphere_quadrature
from wakeflow.truncated import (
    AbcOperator,
    TimeFourierBasis,
    TruncatedProblem,
    abc_residual,
    assemble_block_system,
    energy_check,
    flux_extension,
    form_a,
    form_b,
    form_c,
    norm_R_zeta_sq,
    picard_solve,
    rk4_periodic_orbit,
    periodic_ode_trajectory,
    smooth_step,
    smooth_step_prime,
    solve_periodic_ode,
    solve_truncated_linear,
)

from conftest import PERIOD, ZETA

import oracles

RNG = np.random.default_rng(11)


# ---------------------------------------------------------------------------
# boundary operator


def test_abc_zero_fields():
    op = AbcOperator(5.0, ZETA)
    x = 5.0 * make_sphere_quadrature(4).nodes
    n = x.shape[0]
    out = op.apply(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros(n), x)
    assert np.abs(out).max() == 0.0


def test_abc_uniform_field_zero_zeta():
    R = 4.0
    op = AbcOperator(R, np.zeros(3), include_quadratic=False)
    x = R * make_sphere_quadrature(4).nodes
    n = x.shape[0]
    v = np.tile([1.0, 0.0, 0.0], (n, 1))
    out = op.apply(v, np.zeros((n, 3, 3)), np.zeros(n), x)
    assert np.allclose(out, v / R, atol=1e-14)


def test_abc_quadratic_term_toggle():
    R = 3.0
    x = np.array([[R, 0.0, 0.0]])
    v = np.array([[2.0, 1.0, 0.0]])
    base = AbcOperator(R, np.zeros(3), include_quadratic=False).apply(v, np.zeros((1, 3, 3)), np.zeros(1), x)
    quad = AbcOperator(R, np.zeros(3), include_quadratic=True).apply(v, np.zeros((1, 3, 3)), np.zeros(1), x)
    assert np.allclose(base - quad, 0.5 * v[0, 0] * v, atol=1e-14)  # (xhat.v) v / 2


def test_abc_residual_of_exterior_solution_decays(manufactured_solution):
    sphere = make_sphere_quadrature(6)
    slopes = []
    vals = []
    for R in (4.0, 8.0, 16.0):
        op = AbcOperator(R, ZETA, include_quadratic=True)
        res = abc_residual(op, manufactured_solution, R * sphere.nodes, 0.3)
        vals.append(np.abs(res).max())
    slope = oracles.loglog_slope([4.0, 8.0, 16.0], vals)
    assert slope < -0.5  # consistent, not exact: residual decays with R


# ---------------------------------------------------------------------------
# time basis and block systems


def test_time_basis_orthonormal():
    basis = TimeFourierBasis(PERIOD, 4)
    G = basis.gram()
    assert np.abs(G - np.eye(9)).max() <= 1e-12


def test_block_system_small_example():
    B = assemble_block_system(np.array([[1.0]]), 1, 2 * np.pi)
    sol = np.linalg.solve(B, np.array([1.0, 0.0]))
    assert np.allclose(sol, [0.5, -0.5], atol=1e-14)


def test_block_system_nonsingular_for_spd():
    for trial in range(4):
        B0 = RNG.normal(size=(5, 5))
        A = B0 @ B0.T + 5 * np.eye(5)
        for k in (1, 5, 50):
            M = assemble_block_system(A, k, PERIOD)
            assert np.linalg.svd(M, compute_uv=False)[-1] > 0.0


def test_block_system_requires_positive_k():
    with pytest.raises(ValueError):
        assemble_block_system(np.eye(2), 0, PERIOD)


def test_periodic_ode_constant_forcing():
    A = np.array([[2.0, 0.3], [0.3, 1.5]])
    G0 = np.array([1.0, -2.0])
    a0, ac, as_ = solve_periodic_ode(A, G0, np.zeros((2, 2)), np.zeros((2, 2)), PERIOD)
    assert np.allclose(a0, np.linalg.solve(A, G0), atol=1e-13)
    assert np.abs(ac).max() == 0.0 and np.abs(as_).max() == 0.0


def test_periodic_ode_matches_time_stepping():
    M, K = 4, 6
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(3):
        B0 = rng.normal(size=(M, M))
        A = B0 @ B0.T + M * np.eye(M)
        G0 = rng.normal(size=M)
        Gc = rng.normal(size=(K, M))
        Gs = rng.normal(size=(K, M))
        a0, ac, as_ = solve_periodic_ode(A, G0, Gc, Gs, PERIOD)
        basis = TimeFourierBasis(PERIOD, K)

        def G_fn(t):
            S = basis.sample(np.array([t]))[:, 0]
            coef = np.vstack([G0[None, :], np.empty((2 * K, M))])
            coef[1::2] = Gc
            coef[2::2] = Gs
            return S @ coef

        traj = rk4_periodic_orbit(A, G_fn, PERIOD, steps_per_period=2048, n_periods=50)
        times = np.linspace(0.0, PERIOD, traj.shape[0])
        ref = periodic_ode_trajectory(a0, ac, as_, PERIOD, times)
        worst = max(worst, float(np.abs(traj - ref).max() / np.abs(ref).max()))
    assert worst <= 1e-6


def test_periodic_ode_high_mode_bound():
    # for SPD A and omega_k > |A| the response obeys |alpha_k| <= 2 T/(2 pi k) |G_k|
    M = 4
    rng = np.random.default_rng(5)
    B0 = rng.normal(size=(M, M))
    A = B0 @ B0.T + np.eye(M)
    nrmA = np.linalg.norm(A, 2)
    K = 24
    Gc = rng.normal(size=(K, M))
    Gs = rng.normal(size=(K, M))
    _, ac, as_ = solve_periodic_ode(A, np.zeros(M), Gc, Gs, PERIOD)
    for k in range(1, K + 1):
        wk = 2 * np.pi * k / PERIOD
        if wk <= nrmA:
            continue
        lhs = np.sqrt(np.linalg.norm(ac[k - 1]) ** 2 + np.linalg.norm(as_[k - 1]) ** 2)
        rhs = 2.0 * (PERIOD / (2 * np.pi * k)) * np.sqrt(
            np.linalg.norm(Gc[k - 1]) ** 2 + np.linalg.norm(Gs[k - 1]) ** 2
        )
        assert lhs <= rhs * (1 + 1e-12)


# ---------------------------------------------------------------------------
# divergence-free extension


def test_smooth_step_profile():
    assert smooth_step(np.array([-0.2, 0.0]))[1] == 0.0
    assert smooth_step(np.array([1.0, 1.3]))[0] == 1.0
    t = np.linspace(0.05, 0.95, 19)
    fd = (smooth_step(t + 1e-6) - smooth_step(t - 1e-6)) / 2e-6
    assert np.abs(fd - smooth_step_prime(t)).max() <= 1e-5


def test_extension_reproduces_carrier_data(body, surface_quad):
    pts = body.radius * surface_quad.nodes
    phi0 = 1.3
    data = BoundaryDataModes.steady(phi0 * sigma_carrier(pts), body, surface_quad, PERIOD)
    ext = flux_extension(data)
    assert np.abs(ext.strengths).max() <= 1e-10  # remainder vanishes
    X = np.array([[1.5, 0.2, -0.1], [3.0, 0.0, 0.0]])
    got = ext.velocity_modes(X)[0].real
    assert np.allclose(got, phi0 * sigma_carrier(X), atol=1e-10)


def test_extension_trace_and_divergence(body, surface_quad, manufactured_truth):
    pts = body.radius * surface_quad.nodes
    modes = manufactured_truth.velocity_modes(pts)
    modes = modes + 0.05 * sigma_carrier(pts)[None, :, :]  # add some flux
    data = BoundaryDataModes(body, surface_quad, PERIOD, modes)
    ext = flux_extension(data)
    assert ext.trace_residual <= 1e-6
    got = ext.velocity_modes(pts)
    assert np.abs(got - modes).max() <= 1e-6
    # divergence-free in the collar (and everywhere)
    worst = 0.0
    for x in (np.array([1.3, 0.4, 0.2]), np.array([0.0, 1.55, -0.3]), np.array([1.1, -1.2, 0.4])):
        div = oracles.fd_divergence(lambda y: ext.velocity_modes(y[None, :])[0, 0].real, x, h=1e-5)
        worst = max(worst, abs(div))
    assert worst <= 1e-6


def test_extension_support(body, surface_quad, manufactured_truth):
    pts = body.radius * surface_quad.nodes
    data = BoundaryDataModes(body, surface_quad, PERIOD, manufactured_truth.velocity_modes(pts))
    ext = flux_extension(data)
    X = np.array([[2.1, 0.0, 0.0], [0.0, 3.0, 1.0]])
    sigma_part = ext.flux_modes[:, None, None] * sigma_carrier(X)[None, :, :]
    assert np.abs(ext.velocity_modes(X) - sigma_part).max() <= 1e-14


def test_extension_collar_must_fit():
    body = BodyGeometry(1.0)
    quad = make_sphere_quadrature(8)
    pts = body.radius * quad.nodes
    data = BoundaryDataModes.steady(np.tile([1.0, 0, 0], (pts.shape[0], 1)), body, quad, PERIOD)
    with pytest.raises(ValueError):
        flux_extension(data, R=1.5)


# ---------------------------------------------------------------------------
# forms a, b, c


def _bump_field(seed, rb=1.0):
    """Random solenoidal field vanishing (with derivative) on the body surface.

    v = curl(chi G) with an affine G and the analytic cutoff
    chi = (1 - (rb/r)^2)^3, so Gauss quadrature resolves it spectrally.
    """
    rng = np.random.default_rng(seed)
    C = rng.normal(size=(3, 3))
    c0 = rng.normal(size=3)

    def G(pts):
        return c0 + pts @ C.T

    curl_const = np.array([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])

    def chi(r):
        return (1.0 - (rb / r) ** 2) ** 3

    def chi_p(r):
        return 3.0 * (1.0 - (rb / r) ** 2) ** 2 * (2.0 * rb**2 / r**3)

    def v(pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=1)
        xh = pts / r[:, None]
        return chi(r)[:, None] * curl_const[None, :] + chi_p(r)[:, None] * np.cross(xh, G(pts))

    def grad_v(pts):
        pts = np.atleast_2d(pts)
        out = np.empty((len(pts), 3, 3))
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            out[:, i, :] = (v(pts + e) - v(pts - e)) / (2 * h)
        return out

    return v, grad_v


def test_form_c_skew_identity():
    R = 4.0
    annulus = make_annulus_quadrature(1.0, R, n_radial=20, sphere_order=12)
    sphere = make_sphere_quadrature(12)
    worst = 0.0
    for seed in range(10):
        u, _ = _bump_field(seed)
        v, gv = _bump_field(seed + 100)
        pts = annulus.points
        scale = float(
            np.sum(annulus.weights * np.linalg.norm(u(pts), axis=1)
                   * np.linalg.norm(gv(pts).reshape(-1, 9), axis=1) * np.linalg.norm(v(pts), axis=1))
        )
        val = form_c(u, v, gv, v, R=R, annulus=annulus, sphere=sphere)
        worst = max(worst, abs(val) / scale)
        val_same = form_c(v, v, gv, v, R=R, annulus=annulus, sphere=sphere)
        worst = max(worst, abs(val_same) / scale)
    assert worst <= 1e-6


def test_form_a_norm_identity():
    R = 4.0
    annulus = make_annulus_quadrature(1.0, R, n_radial=20, sphere_order=12)
    sphere = make_sphere_quadrature(12)
    for seed in (0, 7):
        v, gv = _bump_field(seed)
        a_vv = form_a(v, gv, v, gv, R=R, zeta=ZETA, annulus=annulus, sphere=sphere)
        nrm = norm_R_zeta_sq(v, gv, R=R, zeta=ZETA, annulus=annulus, sphere=sphere)
        assert abs(a_vv - nrm) / nrm <= 1e-10


def test_form_b_vanishes_for_solenoidal():
    R = 3.0
    annulus = make_annulus_quadrature(1.0, R, n_radial=16, sphere_order=10)
    v, gv = _bump_field(3)

    def div_v(pts):
        g = gv(pts)
        return np.einsum("nii->n", g)

    p = lambda pts: np.linalg.norm(pts, axis=1) ** -1.0
    val = form_b(div_v, p, annulus=annulus)
    assert abs(val) <= 1e-8


# ---------------------------------------------------------------------------
# truncated solves


@pytest.fixture(scope="module")
def linear_solution(manufactured_data):
    prob = TruncatedProblem(data=manufactured_data, R=8.0, zeta=ZETA, K=2, threads=2)
    return prob, solve_truncated_linear(prob)


def test_truncated_linear_self_residuals(linear_solution):
    prob, sol = linear_solution
    assert sol.residuals.sigma_max <= 1e-6
    assert sol.residuals.abc_max <= 1e-6


def test_truncated_linear_offnode_abc_residual(linear_solution):
    prob, sol = linear_solution
    op = AbcOperator(prob.R, ZETA, include_quadratic=False)
    probe = prob.R * make_sphere_quadrature(7).nodes  # off the collocation nodes
    res = abc_residual(op, sol, probe, 0.2)
    assert np.abs(res).max() <= 1e-5


def test_truncated_zero_data(body, surface_quad):
    modes = np.zeros((2, surface_quad.nodes.shape[0], 3), dtype=complex)
    data = BoundaryDataModes(body, surface_quad, PERIOD, modes)
    sol = solve_truncated_linear(TruncatedProblem(data=data, R=6.0, zeta=ZETA))
    assert np.abs(sol.strengths).max() == 0.0


def test_truncated_steady_data_keeps_modes_steady(body, surface_quad):
    # steady data with zeta = 0 reduces to one Stokes solve: the time modes
    # decouple, so every k != 0 slot stays exactly zero
    pts = body.radius * surface_quad.nodes
    data = BoundaryDataModes.steady(np.tile([0.01, 0.0, 0.003], (pts.shape[0], 1)), body, surface_quad, PERIOD)
    prob = TruncatedProblem(data=data, R=6.0, zeta=np.zeros(3), K=3)
    sol = solve_truncated_linear(prob)
    assert np.abs(sol.strengths[1:]).max() == 0.0
    assert np.all(sol.strengths[0].imag == 0.0)  # real Stokes coefficients
    assert sol.residuals.sigma_max <= 2e-6
    assert sol.residuals.abc_max <= 1e-4


def test_picard_zero_data_one_step(body, surface_quad):
    modes = np.zeros((1, surface_quad.nodes.shape[0], 3), dtype=complex)
    data = BoundaryDataModes(body, surface_quad, PERIOD, modes)
    sol = picard_solve(TruncatedProblem(data=data, R=6.0, zeta=ZETA), max_iter=3)
    assert np.abs(sol.strengths).max() == 0.0
    assert len(sol.increments) <= 1


@pytest.fixture(scope="module")
def picard_solution(study_reference):
    prob = TruncatedProblem(data=study_reference.data, R=8.0, zeta=ZETA,
                            forcing_modes=study_reference.forcing_modes, K=4, threads=2)
    return prob, picard_solve(prob, max_iter=6, tol=1e-12)


def test_picard_contracts(picard_solution):
    _, sol = picard_solution
    assert len(sol.contraction_ratios) >= 1
    assert all(r < 0.5 for r in sol.contraction_ratios)


def test_picard_iterates_divergence_free(picard_solution):
    _, sol = picard_solution
    worst = 0.0
    for x in (np.array([3.0, 1.0, 0.5]), np.array([-2.0, 0.5, 1.5])):
        div = oracles.fd_divergence(lambda y: sol.velocity(0.2, y[None, :])[0], x)
        worst = max(worst, abs(div))
    assert worst <= 1e-5


def test_energy_inequality(picard_solution, study_reference):
    prob, sol = picard_solution
    ext = flux_extension(study_reference.data)
    rep = energy_check(sol, ext, forcing_modes=study_reference.forcing_modes)
    assert rep.passed
    assert rep.slack >= -rep.defect_bound
    assert rep.smallness < 1.0


def test_energy_zero_solution(body, surface_quad):
    modes = np.zeros((1, surface_quad.nodes.shape[0], 3), dtype=complex)
    data = BoundaryDataModes(body, surface_quad, PERIOD, modes)
    sol = solve_truncated_linear(TruncatedProblem(data=data, R=6.0, zeta=ZETA))
    ext = flux_extension(data)
    rep = energy_check(sol, ext)
    assert abs(rep.lhs) <= 1e-20 and abs(rep.rhs) <= 1e-20


def test_norm_identity_on_theta(picard_solution, study_reference):
    # a(theta, theta) equals the (R,|zeta|) norm for fields vanishing on the body
    prob, sol = picard_solution
    ext = flux_extension(study_reference.data)
    R = prob.R
    annulus = make_annulus_quadrature(1.001, R, n_radial=12, sphere_order=10)
    sphere = make_sphere_quadrature(12)

    def theta(pts):
        return (sol.velocity_modes(pts, K_max=1) - ext.velocity_modes(pts))[0].real

    # finite differences directly on the steady part
    def gtheta(pts):
        h = 1e-5
        out = np.empty((len(pts), 3, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            out[:, i, :] = (theta(pts + e) - theta(pts - e)) / (2 * h)
        return out

    a_tt = form_a(theta, gtheta, theta, gtheta, R=R, zeta=ZETA, annulus=annulus, sphere=sphere)
    nrm = norm_R_zeta_sq(theta, gtheta, R=R, zeta=ZETA, annulus=annulus, sphere=sphere)
    assert abs(a_tt - nrm) / max(nrm, 1e-30) <= 1e-6


def test_hardy_type_bound_stable_constant():
    # int |u|^2 / |x|^2 over the annulus <= C^2 |u|^2_(T,R) with stable C
    sphere = make_sphere_quadrature(10)
    consts = []
    for R in (4.0, 8.0, 16.0):
        annulus = make_annulus_quadrature(1.0, R, n_radial=16, sphere_order=10)
        u = lambda pts: np.column_stack([1.0 / np.linalg.norm(pts, axis=1)] * 3) / np.sqrt(3)

        def gu(pts):
            h = 1e-6
            out = np.empty((len(pts), 3, 3))
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                out[:, i, :] = (u(pts + e) - u(pts - e)) / (2 * h)
            return out

        pts = annulus.points
        lhs = np.sum(annulus.weights * np.einsum("ni,ni->n", u(pts), u(pts)) / np.linalg.norm(pts, axis=1) ** 2)
        nrm = norm_R_zeta_sq(u, gu, R=R, zeta=np.zeros(3), annulus=annulus, sphere=sphere)
        consts.append(np.sqrt(lhs / nrm))
    mid = consts[1]
    assert all(abs(c - mid) / mid <= 0.2 for c in consts)
