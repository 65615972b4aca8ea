"""Safety performance functions for rural two-lane road segments.

Crash-rate summaries, HSM calibration, Poisson and negative binomial SPFs,
random-parameter models by simulated maximum likelihood, and out-of-sample
comparison.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .calibration import (
    CalibrationResult,
    RateSummary,
    calibrated_prediction,
    calibration_factor,
    crash_rate_per_mile,
    crash_rate_vmt,
    hsm_base_prediction,
    rate_summary,
)
from .data import (
    Dataset,
    DesignMatrix,
    ModelSpec,
    SegmentRecord,
    build_design,
    load_segments,
    make_dataset,
    split,
    write_segments,
)
from .errors import ComputationError, InputError, OptimizationError, SpfError, ValidationError
from .evaluate import (
    FittedModel,
    HsmModel,
    compare,
    gof,
    gof_values,
    load_model,
    predict,
    save_model,
    synth_generate,
    validate,
)
from .likelihood import FixedParams, fixed_loglik, nb_loglik, poisson_loglik
from .mixed import MixedParams, fit_random, halton, inv_normal_cdf, make_draws, simulated_loglik
from .optimize import FitResult, fit_fixed, lr_test, maximize, overdispersion_test

__all__ = [name for name in dir() if not name.startswith("_") and name != "annotations"]
