"""Time-periodic Oseen flow past a translating body.

Fundamental-solution kernels, a fundamental-solution collocation solver for
the exterior problem, a truncated-domain solver with an artificial boundary
condition on the truncation sphere, and a harness measuring the truncation
error against the R^(-1/2) law.
"""

from .kernels import (
    KernelValue,
    ModeSpec,
    NewtonianPotentialGrid,
    WakeWeight,
    decay_slope,
    gamma_perp,
    get_mode_grid,
    laplace_E,
    mode_scalar_kernel,
    oseenlet_mode,
    oseenlet_steady,
    pressure_P,
    s_wake,
    stokeslet,
    surface_J,
    weight_nu,
)
from .geometry import (
    AnnulusQuadrature,
    BodyGeometry,
    SphereQuadrature,
    make_annulus_quadrature,
    make_sphere_quadrature,
    place_sources,
    surface_integral,
    volume_integral,
)
from .exterior import (
    BoundaryDataModes,
    ExteriorSolveConfig,
    conv_boundary,
    conv_volume,
    flux,
    solve_exterior,
    solve_exterior_mode,
    verify_exterior_decay,
)
from .truncated import (
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
    picard_solve,
    rk4_periodic_orbit,
    solve_periodic_ode,
    solve_truncated_linear,
)
from .fixedpoint import (
    exterior_picard,
    nonlinear_term,
    nonlinear_weighted_bound,
    xk_norm,
)
from .harness import (
    StudyConfig,
    error_terms_diagnostic,
    fit_rate,
    flux_dichotomy_study,
    make_reference,
    run_truncation_study,
)

__all__ = [
    "KernelValue",
    "ModeSpec",
    "NewtonianPotentialGrid",
    "WakeWeight",
    "decay_slope",
    "gamma_perp",
    "get_mode_grid",
    "laplace_E",
    "mode_scalar_kernel",
    "oseenlet_mode",
    "oseenlet_steady",
    "pressure_P",
    "s_wake",
    "stokeslet",
    "surface_J",
    "weight_nu",
    "AnnulusQuadrature",
    "BodyGeometry",
    "SphereQuadrature",
    "make_annulus_quadrature",
    "make_sphere_quadrature",
    "place_sources",
    "surface_integral",
    "volume_integral",
]
