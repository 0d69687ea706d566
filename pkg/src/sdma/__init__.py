"""Single-dataset meta-analysis.

Pools many effect estimates computed from one shared dataset by tempering
each estimate's likelihood with a fractional weight, so that the data's
information enters the pooled effect at most once.
"""

__version__ = "0.1.0"

from .bayes import (  # noqa: E402
    BayesFit,
    PriorSpec,
    TauPosterior,
    bf_effect_savage_dickey,
    bf_heterogeneity,
    fit_bayes_sd,
    fit_bayes_standard,
    marginal_loglik_given_tau,
    tau_posterior,
    unit_information_prior,
)
from .classical import (  # noqa: E402
    RemlResult,
    fit_sd_common,
    fit_sd_random,
    fit_standard_common,
    fit_standard_random,
    q_profile_ci,
    q_test,
    reml_tau,
)
from .data import (  # noqa: E402
    ClassicalFit,
    EstimateRecord,
    EstimateSet,
    WeightScheme,
    custom_weights,
    equal_weights,
    team_split_weights,
    validate_set,
)
