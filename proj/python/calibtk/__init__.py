"""Confidence-calibration toolkit.

Prediction-quality metrics (NLL, Brier, label error, ECE, E99), temperature
and novelty-weighted scaling, ensemble combination, and a 2D toy benchmark
with familiar/novel regions. Thin wrapper over the C++ core.
"""

try:
    from ._core import (
        Calibrator,
        InputError,
        PredictionSet,
        ProbabilitySet,
        __version__,
        combine,
        ensemble_of_calibrated,
        evaluate,
        evaluate_by_group,
        fit_novelty_percentiles,
        fit_novelty_scaling,
        fit_shared_temperature,
        fit_temperature,
        percent_reduction,
        run_toy,
        to_probabilities,
        toy_default_spec,
    )
except ImportError:  # development tree: cmake leaves _core beside the package
    from _core import (
        Calibrator,
        InputError,
        PredictionSet,
        ProbabilitySet,
        __version__,
        combine,
        ensemble_of_calibrated,
        evaluate,
        evaluate_by_group,
        fit_novelty_percentiles,
        fit_novelty_scaling,
        fit_shared_temperature,
        fit_temperature,
        percent_reduction,
        run_toy,
        to_probabilities,
        toy_default_spec,
    )

__all__ = [
    "Calibrator",
    "InputError",
    "PredictionSet",
    "ProbabilitySet",
    "__version__",
    "combine",
    "ensemble_of_calibrated",
    "evaluate",
    "evaluate_by_group",
    "fit_novelty_percentiles",
    "fit_novelty_scaling",
    "fit_shared_temperature",
    "fit_temperature",
    "percent_reduction",
    "run_toy",
    "to_probabilities",
    "toy_default_spec",
]
