"""Data-space inversion with recurrent autoencoders and ensemble samplers."""

from .core import (DataSchema, DataVector, Ensemble, NumericalError, ObservationSet, SchemaError,
                   centered_data_matrix, ensemble_mean, make_rng, perturb_observations, select_hm)

__version__ = "0.1.0"

__all__ = [
    "DataSchema",
    "DataVector",
    "Ensemble",
    "NumericalError",
    "ObservationSet",
    "SchemaError",
    "centered_data_matrix",
    "ensemble_mean",
    "make_rng",
    "perturb_observations",
    "select_hm",
]
