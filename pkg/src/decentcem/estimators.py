"""scikit-learn style front-ends for the optimizers.

The estimators carry hyperparameters as constructor arguments, so they work
with ``get_params`` / ``set_params`` / ``clone`` and with
``sklearn.model_selection.ParameterGrid`` for sweeps. ``fit`` takes the
objective instead of a data matrix and stores the outcome in trailing
underscore attributes::

    opt = DecentCEMOptimizer(population=200, n_instances=10, lower=-7.5, upper=7.5)
    opt.fit(objective)
    opt.solution_
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cem import CemConfig, cem_run
from .decent import EnsembleConfig, decent_run, make_inits
from .distributions import DiagonalGaussian, GaussianMixture
from .exceptions import ConfigError


def _box(lower, upper):
    if lower is None or upper is None:
        raise ConfigError("a default initialization needs both lower and upper bounds")
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    if np.any(hi <= lo):
        raise ConfigError("upper must exceed lower in every coordinate")
    return lo, hi


class _CEMBase(BaseEstimator):
    def _cem_config(self, **overrides) -> CemConfig:
        params = dict(
            population=self.population,
            elite_ratio=self.elite_ratio,
            alpha=self.alpha,
            min_variance=self.min_variance,
            max_iters=self.max_iters,
            stall_iters=self.stall_iters,
            stall_tol=self.stall_tol,
            output_mode=self.output_mode,
            lower=self.lower,
            upper=self.upper,
        )
        params.update(overrides)
        return CemConfig(**params)

    def _store(self, result):
        self.result_ = result
        self.solution_ = result.solution
        self.expected_value_ = result.expected_value
        self.best_value_ = result.best_value
        self.n_iter_ = result.iters_used
        return self

    def evaluate(self, objective) -> float:
        """Value of the fitted solution under ``objective``."""
        check_is_fitted(self, "solution_")
        return float(np.asarray(objective(self.solution_[None]))[0])


class CEMOptimizer(_CEMBase):
    """Cross-entropy method with a diagonal Gaussian.

    Without ``init_mean`` the search starts at the centre of the box with
    variance ``(width / 4) ** 2``.
    """

    def __init__(
        self,
        population=100,
        elite_ratio=0.1,
        alpha=0.1,
        min_variance=1e-3,
        max_iters=100,
        stall_iters=3,
        stall_tol=1e-4,
        output_mode="mean",
        lower=None,
        upper=None,
        init_mean=None,
        init_variance=None,
        random_state=0,
    ):
        self.population = population
        self.elite_ratio = elite_ratio
        self.alpha = alpha
        self.min_variance = min_variance
        self.max_iters = max_iters
        self.stall_iters = stall_iters
        self.stall_tol = stall_tol
        self.output_mode = output_mode
        self.lower = lower
        self.upper = upper
        self.init_mean = init_mean
        self.init_variance = init_variance
        self.random_state = random_state

    def initial_distribution(self) -> DiagonalGaussian:
        if self.init_mean is not None:
            var = 1.0 if self.init_variance is None else self.init_variance
            return DiagonalGaussian(self.init_mean, var)
        lo, hi = _box(self.lower, self.upper)
        var = ((hi - lo) / 4) ** 2 if self.init_variance is None else self.init_variance
        return DiagonalGaussian((lo + hi) / 2, var)

    def fit(self, objective, record_history=False):
        result = cem_run(
            self.initial_distribution(),
            objective,
            self._cem_config(),
            self.random_state,
            record_history=record_history,
        )
        return self._store(result)


class CEMGMMOptimizer(_CEMBase):
    """Cross-entropy method with a Gaussian-mixture sampling distribution.

    Components start evenly spread over the box, each with variance
    ``(width / (2 * n_components)) ** 2`` and equal weight. ``output_mode``
    accepts ``'s'`` (mean of a weight-sampled component) and ``'m'`` (mean of
    the best-scoring component) besides the generic modes.
    """

    def __init__(
        self,
        population=100,
        n_components=5,
        kappa=0.5,
        em_iters=3,
        elite_ratio=0.1,
        alpha=0.1,
        min_variance=1e-3,
        max_iters=100,
        stall_iters=3,
        stall_tol=1e-4,
        output_mode="m",
        lower=None,
        upper=None,
        random_state=0,
    ):
        self.population = population
        self.n_components = n_components
        self.kappa = kappa
        self.em_iters = em_iters
        self.elite_ratio = elite_ratio
        self.alpha = alpha
        self.min_variance = min_variance
        self.max_iters = max_iters
        self.stall_iters = stall_iters
        self.stall_tol = stall_tol
        self.output_mode = output_mode
        self.lower = lower
        self.upper = upper
        self.random_state = random_state

    def initial_distribution(self) -> GaussianMixture:
        lo, hi = _box(self.lower, self.upper)
        c = int(self.n_components)
        comps = make_inits("uniform_spread", c, lo, hi)
        return GaussianMixture(tuple(comps), np.full(c, 1.0 / c))

    def fit(self, objective, record_history=False):
        cfg = self._cem_config(kappa=self.kappa, em_iters=self.em_iters)
        result = cem_run(
            self.initial_distribution(), objective, cfg, self.random_state, record_history
        )
        return self._store(result)


class DecentCEMOptimizer(_CEMBase):
    """Ensemble of independent CEM instances sharing one sample budget.

    ``population`` is the *total* budget; instance ``i`` gets its share from
    :func:`decentcem.decent.split_budget`. After fitting, ``selected_index_``
    names the winning instance and ``instance_results_`` holds all of them.
    """

    def __init__(
        self,
        population=100,
        n_instances=5,
        init_scheme="uniform_spread",
        elite_ratio=0.1,
        alpha=0.1,
        min_variance=1e-3,
        max_iters=100,
        stall_iters=3,
        stall_tol=1e-4,
        output_mode="mean",
        lower=None,
        upper=None,
        random_state=0,
    ):
        self.population = population
        self.n_instances = n_instances
        self.init_scheme = init_scheme
        self.elite_ratio = elite_ratio
        self.alpha = alpha
        self.min_variance = min_variance
        self.max_iters = max_iters
        self.stall_iters = stall_iters
        self.stall_tol = stall_tol
        self.output_mode = output_mode
        self.lower = lower
        self.upper = upper
        self.random_state = random_state

    def ensemble_config(self) -> EnsembleConfig:
        return EnsembleConfig(
            num_instances=self.n_instances,
            total_population=self.population,
            per_instance_cfg=self._cem_config(),
            init_scheme=self.init_scheme,
            seed_base=int(self.random_state),
        )

    def fit(self, objective, inits=None, record_history=False):
        out = decent_run(self.ensemble_config(), inits, objective, record_history=record_history)
        self.selected_index_ = out.selected_index
        self.instance_results_ = out.instance_results
        self.shares_ = out.shares
        return self._store(out.result)
