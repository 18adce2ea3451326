"""Numerical toolkit for backward SDEs driven by Lévy processes with locally Lipschitz generators."""

__version__ = "0.1.0"

from .errors import ConfigurationError, DomainError, LevyBSDEError, NumericalError, StabilityError
from .levy import (
    LevyTriplet,
    PathBundle,
    TimeGrid,
    discretize_density,
    kappa,
    kappa_n,
    sample_paths,
    shift_bundle,
    shift_path,
)
from .generator import (
    BoundCertificate,
    GeneratorSpec,
    TerminalSpec,
    check_comparison_condition,
    compute_bounds,
    eval_G,
    smooth_clamp,
    truncate_generator,
)
from .families import make_generator, make_terminal
from .solver import (
    DiscreteSolution,
    ForwardSpec,
    PolynomialBasis,
    closed_form_linear,
    solve_markov_dp,
    solve_picard_regression,
)
from .verify import check_bounds, check_comparison, sandwich_envelopes
from .malliavin import difference_derivative, identify_ZU, solve_derivative_bsde
from .hgen import H_alpha, HGeneratorSpec, build_cutoff_generator, exponential_utility_hspec, solve_H_limit
from .pdie import PdieGrid, check_forward_conditions, cross_validate, solve_pdie
