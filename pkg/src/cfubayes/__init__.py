"""Bayesian analysis of microbial colony counts from dilution series.

The observation model is the binomial thinning cascade of the experimental
procedure itself, collapsed to Bi(n0, s*) per drop; repetitions share a
gamma hierarchy on the log abundances, labs share a second hierarchy, and
everything is estimated exactly (discrete posteriors, Bayes factors) or by
a self-adjusting MCMC (the t-walk).
"""

from .design import (
    DataError,
    DilutionDesign,
    Experiment,
    Priors,
    RepetitionCounts,
    crude_abundance,
    load_design,
    load_experiment,
    load_lab_experiments,
    log_density_shift,
    save_design,
    save_experiment,
)
from .exactpost import (
    BayesFactorResult,
    DiscretePosterior,
    bayes_factor,
    free_posterior,
    lod,
    log_marginal,
    per_tube_bayes_factors,
)
from .hier import (
    ClassicalSummary,
    HierParams,
    PosteriorChain,
    activation_probability,
    classical_summary,
    fit,
    log_posterior,
    log_reduction,
    summarize,
)
from .interlab import (
    InterLabChain,
    InterLabParams,
    fit_interlab,
    interlab_log_posterior,
    reproducibility_metrics,
)
from .kernels import (
    SuccessProb,
    log_betabinomial_pmf,
    log_hier_density,
    log_n0_density,
    neutral_lambda,
    rep_log_likelihood,
    success_prob,
)
from .mcmc import Chain, DiagnosticError, chain_to_csv, ess, iat, sample
from .sim import (
    CascadeRealization,
    StudyReport,
    all_vs_first_study,
    first_countable_dilution,
    realization_to_rep,
    simulate_cascade,
)
from .specfun import log_binomial_coeff, log_binomial_pmf, log_binomial_sf, log_sum_exp

__version__ = "0.1.0"
