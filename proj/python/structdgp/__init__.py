"""Deep Gaussian processes with structured variational posteriors."""

from ._core import (
    DegenerateWeights,
    DimensionMismatch,
    Error,
    IndexOutOfRange,
    Model,
    NotPositiveDefinite,
    NumericalFailure,
    Structure,
    TooLarge,
    cholesky,
    exact_gp_lml,
    kmat,
    make_split,
    nonzero_count,
    parse_structure,
    toy_sinusoid,
)

__all__ = [
    "DegenerateWeights",
    "DimensionMismatch",
    "Error",
    "IndexOutOfRange",
    "Model",
    "NotPositiveDefinite",
    "NumericalFailure",
    "Structure",
    "TooLarge",
    "cholesky",
    "exact_gp_lml",
    "kmat",
    "make_split",
    "nonzero_count",
    "parse_structure",
    "toy_sinusoid",
]
