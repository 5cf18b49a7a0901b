"""Command-line entry point: kernel verification suites, solves, and studies.

Configuration files are flat key=value text with [section] headers; all
physical parameters are dimensionless (unit kinematic viscosity).  Results
are written as CSV with a versioned comment header, plus a JSON report
carrying the full run configuration for reproducibility.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict, dataclass, field as dfield

import numpy as np

from . import kernels as KK
from .exterior import BoundaryDataModes, ExteriorSolveConfig, solve_exterior, verify_exterior_decay
from .geometry import BodyGeometry, make_sphere_quadrature
from .harness import StudyConfig, flux_dichotomy_study, make_reference, run_truncation_study
from .kernels import ModeSpec, decay_slope, get_mode_grid, oseenlet_mode, oseenlet_steady, stokeslet, surface_J
from .truncated import TruncatedProblem, picard_solve, rk4_periodic_orbit, solve_periodic_ode

CSV_VERSION = "wakeflow-study-v1"


@dataclass
class RunConfig:
    """Everything a run needs; mirrors the study configuration plus I/O."""

    zeta: tuple = (0.5, 0.0, 0.0)
    period: float = 2.0 * np.pi
    modes: int = 4
    body_radius: float = 1.0
    data_spec: str = "manufactured"
    amplitude: float = 0.01
    flux_amplitude: float = 0.01
    radii: tuple = (4.0, 8.0, 16.0, 32.0)
    R: float = 8.0
    sigma_order: int = 12
    outer_order: int = 12
    n_inner: int = 128
    n_outer: int = 72
    n_sources: int = 256
    err_modes: int = 1
    seed: int = 7
    threads: int = 1
    out_dir: str = "."

    @classmethod
    def from_file(cls, path):
        cp = configparser.ConfigParser()
        with open(path) as fh:
            cp.read_file(fh)
        cfg = cls()

        def get(section, key, conv, default):
            if cp.has_option(section, key):
                return conv(cp.get(section, key))
            return default

        vec = lambda s: tuple(float(v) for v in s.split(","))
        cfg.zeta = get("flow", "zeta", vec, cfg.zeta)
        cfg.period = get("flow", "period", float, cfg.period)
        cfg.modes = get("flow", "modes", int, cfg.modes)
        cfg.body_radius = get("body", "radius", float, cfg.body_radius)
        cfg.data_spec = get("data", "spec", str, cfg.data_spec)
        cfg.amplitude = get("data", "amplitude", float, cfg.amplitude)
        cfg.flux_amplitude = get("data", "flux_amplitude", float, cfg.flux_amplitude)
        cfg.radii = get("study", "radii", vec, cfg.radii)
        cfg.err_modes = get("study", "err_modes", int, cfg.err_modes)
        cfg.R = get("truncated", "radius", float, cfg.R)
        cfg.sigma_order = get("discretization", "sigma_order", int, cfg.sigma_order)
        cfg.outer_order = get("discretization", "outer_order", int, cfg.outer_order)
        cfg.n_inner = get("discretization", "n_inner", int, cfg.n_inner)
        cfg.n_outer = get("discretization", "n_outer", int, cfg.n_outer)
        cfg.n_sources = get("discretization", "n_sources", int, cfg.n_sources)
        cfg.seed = get("run", "seed", int, cfg.seed)
        cfg.threads = get("run", "threads", int, cfg.threads)
        return cfg

    def study_config(self) -> StudyConfig:
        return StudyConfig(
            zeta=self.zeta, period=self.period, K=self.modes, body_radius=self.body_radius,
            data_spec=self.data_spec, amplitude=self.amplitude, flux_amplitude=self.flux_amplitude,
            radii=self.radii, sigma_order=self.sigma_order, outer_order=self.outer_order,
            n_inner=self.n_inner, n_outer=self.n_outer, K_err=self.err_modes,
            threads=self.threads, seed=self.seed,
        )


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "zeta", None):
        cfg.zeta = tuple(float(v) for v in args.zeta.split(","))
    if getattr(args, "period", None):
        cfg.period = args.period
    if getattr(args, "modes", None):
        cfg.modes = args.modes
    if getattr(args, "radii", None):
        cfg.radii = tuple(float(v) for v in args.radii.split(","))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    return cfg


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    return _apply_overrides(cfg, args)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return str(obj)


# ---------------------------------------------------------------------------
# kernel verification suites


def _suite_decay(cfg: RunConfig):
    zeta = np.array([1.0, 0.0, 0.0])
    radii = np.geomspace(10.0, 100.0, 7)
    checks = []

    def steady_mag(x):
        return np.linalg.norm(oseenlet_steady(x, zeta).velocity)

    checks.append(("oseenlet_wake_slope", decay_slope(steady_mag, [-1, 0, 0], radii), -1.0, 0.1))
    checks.append(("oseenlet_front_slope", decay_slope(steady_mag, [1, 0, 0], radii), -2.0, 0.1))

    mb = ModeSpec(1, cfg.period, np.array([0.5, 0.0, 0.0]))
    r2 = np.geomspace(2.0, 20.0, 6)

    def perp_mag(x):
        vals = [np.linalg.norm(KK.gamma_perp(t, x, mb, 3)) for t in np.linspace(0, cfg.period, 8, endpoint=False)]
        return max(vals)

    checks.append(("periodic_part_slope", decay_slope(perp_mag, [0, 1, 0], r2), -3.0, 0.3))

    def grad_mag(x):
        h = 1e-5 * (1 + np.linalg.norm(x))
        acc = 0.0
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            acc += np.linalg.norm(oseenlet_steady(x + e, zeta).velocity - oseenlet_steady(x - e, zeta).velocity) ** 2
        return np.sqrt(acc) / (2 * h)

    checks.append(("oseenlet_grad_transverse_slope", decay_slope(grad_mag, [0, 1, 0], radii), -3.0, 0.3))
    return checks


def _suite_residual(cfg: RunConfig):
    rng = np.random.default_rng(cfg.seed)
    zeta = np.array([0.5, 0.0, 0.0])
    checks = []
    pts = rng.normal(size=(40, 3))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * rng.uniform(1.0, 10.0, (40, 1))
    h = 1e-4
    worst_div = 0.0
    for x in pts:
        div = np.zeros(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            div += (oseenlet_steady(x + e, zeta).velocity[i] - oseenlet_steady(x - e, zeta).velocity[i]) / (2 * h)
        worst_div = max(worst_div, float(np.abs(div).max()))
    checks.append(("steady_divergence", worst_div, 0.0, 1e-6))

    worst = 0.0
    for x in pts[:15]:
        res = _steady_pde_residual(x, zeta)
        worst = max(worst, res)
    checks.append(("steady_pde_residual", worst, 0.0, 1e-3))

    m = ModeSpec(1, cfg.period, zeta)
    grid = get_mode_grid(m, 12.0)
    worst_div_m = 0.0
    for x in pts[:10]:
        if np.linalg.norm(x) > 10:
            continue
        div = np.zeros(3, dtype=complex)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            div += (oseenlet_mode(x + e, m, grid).velocity[i] - oseenlet_mode(x - e, m, grid).velocity[i]) / (2 * h)
        worst_div_m = max(worst_div_m, float(np.abs(div).max()))
    checks.append(("mode_divergence", worst_div_m, 0.0, 1e-4))
    return checks


def _steady_pde_residual(x, zeta, h=1e-3):
    eye = np.eye(3)
    G0 = oseenlet_steady(x, zeta).velocity
    lap = np.zeros_like(G0)
    conv = np.zeros_like(G0)
    gradP = np.zeros((3, 3))
    for i in range(3):
        Gp = oseenlet_steady(x + h * eye[i], zeta).velocity
        Gm = oseenlet_steady(x - h * eye[i], zeta).velocity
        lap += (Gp + Gm - 2 * G0) / h**2
        conv += zeta[i] * (Gp - Gm) / (2 * h)
        gradP[i] = (KK.pressure_P(x + h * eye[i]) - KK.pressure_P(x - h * eye[i])) / (2 * h)
    return float(np.abs(-lap - conv + gradP).max())


def _suite_jlaw(cfg: RunConfig):
    quad = make_sphere_quadrature(24)
    zeta = np.array([1.0, 0.0, 0.0])
    checks = []
    checks.append(("J_2_0_is_area_free", surface_J(2, 0, 7.0, zeta, quad), 4 * np.pi, 1e-8))
    Rs = np.array([10.0, 20.0, 40.0, 80.0])
    js = [surface_J(3, 3, R, zeta, quad) for R in Rs]
    slope = float(np.polyfit(np.log(Rs), np.log(js), 1)[0])
    checks.append(("J_3_3_slope", slope, -2.0, 0.1))
    return checks


def cmd_kernels(args) -> int:
    cfg = _load_config(args)
    if args.action == "eval":
        x = np.array([float(v) for v in args.point.split(",")])
        zeta = np.asarray(cfg.zeta, dtype=float)
        if args.mode == 0:
            val = stokeslet(x) if np.linalg.norm(zeta) == 0 else oseenlet_steady(x, zeta)
        else:
            m = ModeSpec(args.mode, cfg.period, zeta)
            val = oseenlet_mode(x, m, get_mode_grid(m, float(np.linalg.norm(x)) + 1.0))
        print("velocity kernel:")
        print(np.array2string(val.velocity, precision=8))
        print("pressure kernel:", np.array2string(val.pressure, precision=8))
        return 0
    # verify
    suites = {"decay": _suite_decay, "residual": _suite_residual, "jlaw": _suite_jlaw}
    names = list(suites) if args.suite == "all" else [args.suite]
    report = {"config": asdict(cfg), "suite": args.suite, "checks": []}
    ok = True
    for name in names:
        for label, value, expect, tol in suites[name](cfg):
            passed = abs(value - expect) <= tol
            ok = ok and passed
            report["checks"].append(
                {"name": label, "value": value, "expect": expect, "tol": tol, "pass": bool(passed)}
            )
            print(f"{'PASS' if passed else 'FAIL'} {label}: {value:.6g} (expect {expect:g} +- {tol:g})")
    if args.out:
        _write_json(args.out, report)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# solves


def _build_data(cfg: RunConfig):
    scfg = cfg.study_config()
    ref = make_reference(scfg)
    return ref, scfg


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    ref, scfg = _build_data(cfg)
    zeta = np.asarray(cfg.zeta, dtype=float)
    if args.problem == "exterior":
        sol = solve_exterior(ref.data, zeta, ExteriorSolveConfig(n_sources=cfg.n_sources))
        payload = {
            "config": asdict(cfg),
            "residuals": [
                {"k": r.k, "residual_max": r.residual_max, "condition": r.condition, "skipped": r.skipped}
                for r in sol.reports
            ],
            "mode_coefficient_decay": sol.mode_coefficient_decay(),
        }
    else:
        prob = TruncatedProblem(
            data=ref.data, R=cfg.R, zeta=zeta, forcing_modes=ref.forcing_modes, K=cfg.modes,
            outer_order=cfg.outer_order, n_inner=cfg.n_inner, n_outer=cfg.n_outer, threads=cfg.threads,
        )
        sol = picard_solve(prob)
        payload = {
            "config": asdict(cfg),
            "residuals": {
                "sigma_max": sol.residuals.sigma_max,
                "abc_max": sol.residuals.abc_max,
                "condition": sol.residuals.condition,
            },
            "contraction_ratios": sol.contraction_ratios,
        }
    if args.eval:
        x = np.array([float(v) for v in args.eval.split(",")])
        t = args.t
        u = sol.velocity(t, x[None, :])[0]
        p = sol.pressure(t, x[None, :])[0]
        print(f"u({t:g}, {args.eval}) = {np.array2string(u, precision=8)}")
        print(f"p({t:g}, {args.eval}) = {p:.8e}")
        payload["eval"] = {"t": t, "x": x.tolist(), "u": u.tolist(), "p": float(p)}
    if args.out:
        _write_json(args.out, payload)
    print(f"boundary residual: {payload['residuals']!r}")
    return 0


# ---------------------------------------------------------------------------
# studies


def cmd_study(args) -> int:
    cfg = _load_config(args)
    scfg = cfg.study_config()
    if args.kind == "truncation":
        result = run_truncation_study(scfg, verbose=True)
        lines = [f"# {CSV_VERSION} truncation data_spec={scfg.data_spec}"]
        lines += result.table().splitlines()
        text = "\n".join(lines) + "\n"
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
            _write_json(args.out + ".json", {
                "config": asdict(cfg),
                "rows": [vars(r) for r in result.rows],
                "slope": result.slope, "constant": result.constant, "r2": result.r2,
                "chat": result.chat, "monotone": result.monotone, "metadata": result.metadata,
            })
        else:
            print(text)
        print(f"fitted slope {result.slope:.3f}, Chat {result.chat:.4g}, monotone {result.monotone}")
        ok = result.monotone and result.slope <= -0.4 and all(not r.failed for r in result.rows)
        return 0 if ok else 1
    # flux dichotomy
    rep = flux_dichotomy_study(scfg, verbose=True)
    payload = {
        "config": asdict(cfg),
        "constant_flux": vars(rep.constant_flux_decay),
        "oscillating": vars(rep.oscillating_decay),
        "oscillating_rows": rep.oscillating_rows,
        "oscillating_I6_slope": rep.oscillating_I6_slope,
        "notes": rep.notes,
    }
    if args.out:
        _write_json(args.out, payload)
    print(f"constant-flux p_perp slope {rep.constant_flux_decay.slope_p_perp:.3f} (expect -2)")
    print(f"oscillating  p_perp slope {rep.oscillating_decay.slope_p_perp:.3f} (expect -1)")
    ok = rep.constant_flux_decay.passed and rep.oscillating_decay.passed
    return 0 if ok else 1


def cmd_ode(args) -> int:
    cfg = _load_config(args)
    rng = np.random.default_rng(cfg.seed)
    M, K = 4, 6
    period = cfg.period
    worst = 0.0
    rows = []
    for trial in range(args.trials):
        B = rng.normal(size=(M, M))
        A = B @ B.T + M * np.eye(M)
        G0 = rng.normal(size=M)
        Gc = rng.normal(size=(K, M))
        Gs = rng.normal(size=(K, M))
        a0, ac, as_ = solve_periodic_ode(A, G0, Gc, Gs, period)
        from .truncated import TimeFourierBasis, periodic_ode_trajectory

        basis = TimeFourierBasis(period, K)

        def G_fn(t):
            S = basis.sample(np.array([t]))[:, 0]
            coef = np.vstack([G0[None, :], np.empty((2 * K, M))])
            coef[1::2] = Gc
            coef[2::2] = Gs
            return S @ coef

        traj = rk4_periodic_orbit(A, G_fn, period, steps_per_period=2048, n_periods=50)
        times = np.linspace(0.0, period, traj.shape[0])
        ref = periodic_ode_trajectory(a0, ac, as_, period, times)
        rel = float(np.abs(traj - ref).max() / np.abs(ref).max())
        worst = max(worst, rel)
        rows.append({"trial": trial, "rel_err": rel})
        print(f"trial {trial}: rel err {rel:.3e}")
    print(f"worst rel err over {args.trials} systems: {worst:.3e}")
    if args.out:
        _write_json(args.out, {"config": asdict(cfg), "rows": rows, "worst": worst})
    return 0 if worst <= 1e-6 else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wakeflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file with [section] headers")
        sp.add_argument("--out", help="output path (json or csv)")
        sp.add_argument("--zeta", help="translation velocity x,y,z")
        sp.add_argument("--period", type=float, help="time period")
        sp.add_argument("--modes", type=int, help="number of time modes K")
        sp.add_argument("--radii", help="comma-separated truncation radii")
        sp.add_argument("--seed", type=int, help="random seed for sample points")
        sp.add_argument("--threads", type=int, help="worker threads")

    pk = sub.add_parser("kernels", help="evaluate or verify the fundamental solutions")
    pk.add_argument("action", choices=["eval", "verify"])
    pk.add_argument("--suite", choices=["decay", "residual", "jlaw", "all"], default="all")
    pk.add_argument("--point", default="1,0,0", help="evaluation point x,y,z")
    pk.add_argument("--mode", type=int, default=0, help="time mode index (0 = steady)")
    common(pk)
    pk.set_defaults(fn=cmd_kernels)

    ps = sub.add_parser("solve", help="solve the exterior or truncated problem")
    ps.add_argument("problem", choices=["exterior", "truncated"])
    ps.add_argument("--eval", help="evaluation point x,y,z")
    ps.add_argument("--t", type=float, default=0.0, help="evaluation time")
    common(ps)
    ps.set_defaults(fn=cmd_solve)

    pt = sub.add_parser("study", help="truncation-error or flux-dichotomy study")
    pt.add_argument("kind", choices=["truncation", "flux-dichotomy"])
    common(pt)
    pt.set_defaults(fn=cmd_study)

    po = sub.add_parser("ode", help="block systems versus time stepping")
    po.add_argument("action", choices=["block-vs-step"])
    po.add_argument("--trials", type=int, default=10)
    common(po)
    po.set_defaults(fn=cmd_ode)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.fn(args)
    except (ValueError, OSError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
