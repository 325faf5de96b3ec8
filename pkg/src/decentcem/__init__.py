"""Cross-entropy method optimizers, decentralized CEM ensembles and MPC planners."""

from .cem import CemConfig, CemResult, cem_iterate, cem_run, elite_select, instance_rng
from .decent import DecentResult, EnsembleConfig, decent_run, make_inits, select_best, split_budget
from .distributions import DiagonalGaussian, EliteSet, GaussianMixture, fit_gaussian_mle, sample
from .estimators import CEMGMMOptimizer, CEMOptimizer, DecentCEMOptimizer

__all__ = [
    "CEMGMMOptimizer",
    "CEMOptimizer",
    "CemConfig",
    "CemResult",
    "DecentCEMOptimizer",
    "DecentResult",
    "DiagonalGaussian",
    "EliteSet",
    "EnsembleConfig",
    "GaussianMixture",
    "cem_iterate",
    "cem_run",
    "decent_run",
    "elite_select",
    "fit_gaussian_mle",
    "instance_rng",
    "make_inits",
    "sample",
    "select_best",
    "split_budget",
]
