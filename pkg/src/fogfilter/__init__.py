"""Unit-count inference under partial observation for RTS openings.

A strategy HMM drives zero-inflated Poisson production; true counts evolve by
binomial survival; scouting yields beta-binomial observations whose detection
rate depends on effort. Inference is a Rao-Blackwellized particle filter.
"""

from .baseline import BaselineTables, baseline_predict, fit_baseline
from .generative import (
    EpochRecord,
    GameTrace,
    GenConfig,
    demo_params,
    effort_schedule,
    generate_dataset,
    generate_game,
)
from .inference import (
    FilterError,
    FilterOutput,
    ParticleSet,
    count_predict,
    count_update,
    exact_filter_small,
    predict_forward,
    rbpf_filter,
)
from .model import (
    ModelParams,
    ObsDistParams,
    ObsRegressionCoeffs,
    StrategyParams,
    UnitTypeCatalog,
    betabin_pmf,
    link_obs_params,
    zip_pmf,
)
from .training import EMConfig, FitReport, em_fit, fit_model, forward_backward, heldout_loglik

__version__ = "0.1.0"
