"""Bayesian disease mapping with CAR priors on multiple-membership data.

The package covers the full workflow: adjacency graphs and conditional
autoregressive priors (:mod:`carmm.graph`, :mod:`carmm.car`),
multiple-membership matrices and their identifiability structure
(:mod:`carmm.membership`), model assembly with exact gradients
(:mod:`carmm.model`), Hamiltonian Monte Carlo (:mod:`carmm.sampler`),
convergence and calibration diagnostics (:mod:`carmm.diagnostics`,
:mod:`carmm.sbc`), and predictive scoring (:mod:`carmm.scoring`).  The
``carmm`` command line tool wraps simulate / fit / sbc / score
pipelines over CSV + JSON bundles.
"""

__version__ = "0.1.0"

from .car import (
    CarPair,
    CarParams,
    CarPrior,
    build_precision,
    car_log_density,
    extract_car_pair,
    icar_log_density_unnormalized,
    log_det_precision,
    sample_prior,
    validate_car_pair,
)
from .diagnostics import (
    SbcRank,
    coverage_interval_check,
    effective_sample_size,
    rank_statistic,
    split_rhat,
)
from .graph import AdjacencyGraph, make_grid, morans_i, second_order_neighbours
from .membership import (
    MembershipMatrix,
    generalized_inverse_family,
    left_inverse,
    mm_log_relative_risk,
    pushforward_covariance,
    recover_areal_covariance,
    simulate_membership_matrix,
)
from .model import (
    ModelSpec,
    ParamVector,
    PriorConfig,
    log_likelihood,
    log_posterior,
    log_posterior_and_gradient,
    log_prior,
    negbin_log_likelihood,
    poisson_log_likelihood,
)
from .sampler import PosteriorSamples, SamplerConfig, run_chains
from .sbc import SbcStudyConfig, SbcStudyResult, bias_metrics, rhat_filter, run_study, sbc_replicate
from .scoring import (
    ScoreReport,
    dss_mean,
    elpd_diff,
    exceedance_prob,
    marginal_ppp,
    mixed_ppp,
    psis_loo_elpd,
    quintile_risk_profile,
    rps_mean,
)
