"""Consensus-based collaborative Bayesian optimisation."""

from .acquisition import (
    AcquisitionConfig,
    UtilityValue,
    expected_improvement,
    knowledge_gradient,
    maximize_utility,
)
from .benchmarks import (
    BlackBoxProblem,
    average_gap,
    gap_metric,
    heterogenize,
    make_problem,
    observe,
    sample_hetero,
    theorem1_bound,
)
from .clients import RunHistory, exchange_round, run_cboc, run_individual
from .consensus import (
    ConsensusScheme,
    consensus_combine,
    leader_step,
    repair_doubly_stochastic,
    uniform_step,
)
from .gp import (
    Dataset,
    GaussianProcess,
    GPHyperparameters,
    fit_hyperparameters,
    log_marginal_likelihood,
    posterior,
)

__all__ = [
    "AcquisitionConfig",
    "BlackBoxProblem",
    "ConsensusScheme",
    "Dataset",
    "GPHyperparameters",
    "GaussianProcess",
    "RunHistory",
    "UtilityValue",
    "average_gap",
    "consensus_combine",
    "exchange_round",
    "expected_improvement",
    "fit_hyperparameters",
    "gap_metric",
    "heterogenize",
    "knowledge_gradient",
    "leader_step",
    "log_marginal_likelihood",
    "make_problem",
    "maximize_utility",
    "observe",
    "posterior",
    "repair_doubly_stochastic",
    "run_cboc",
    "run_individual",
    "sample_hetero",
    "theorem1_bound",
    "uniform_step",
]
