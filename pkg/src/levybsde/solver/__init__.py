from .closed_form import closed_form_linear
from .markov import gauss_hermite_standard, jump_branches, solve_markov_dp
from .picard import HatBasis, PolynomialBasis, martingale_residual, picard_core, solve_picard_regression
from .types import DiscreteSolution, ForwardSpec

__all__ = [
    "DiscreteSolution",
    "ForwardSpec",
    "HatBasis",
    "PolynomialBasis",
    "closed_form_linear",
    "gauss_hermite_standard",
    "jump_branches",
    "martingale_residual",
    "picard_core",
    "solve_markov_dp",
    "solve_picard_regression",
]
