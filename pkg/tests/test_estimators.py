import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from decentcem.cem import CemConfig, cem_run, instance_rng
from decentcem.distributions import DiagonalGaussian, GaussianMixture
from decentcem.estimators import CEMGMMOptimizer, CEMOptimizer, DecentCEMOptimizer
from decentcem.exceptions import ConfigError
from decentcem.objectives import MOTIVATIONAL, grid_oracle

BOX = dict(lower=-7.5, upper=7.5)


def test_cem_matches_functional_api():
    opt = CEMOptimizer(population=100, random_state=3, **BOX).fit(MOTIVATIONAL)
    ref = cem_run(DiagonalGaussian([0.0], (15.0 / 4) ** 2), MOTIVATIONAL,
                  CemConfig(population=100, **BOX), instance_rng(3, 0))
    assert opt.result_ == ref
    np.testing.assert_array_equal(opt.solution_, ref.solution)


def test_custom_init():
    opt = CEMOptimizer(init_mean=[5.0], init_variance=0.1, **BOX).fit(MOTIVATIONAL)
    assert abs(opt.solution_[0] - grid_oracle(MOTIVATIONAL)[0]) < 0.05


def test_needs_bounds_for_default_init():
    with pytest.raises(ConfigError):
        CEMOptimizer().fit(MOTIVATIONAL)


def test_gmm_initial_components_spread():
    opt = CEMGMMOptimizer(n_components=3, lower=-3.0, upper=3.0)
    init = opt.initial_distribution()
    assert isinstance(init, GaussianMixture)
    np.testing.assert_allclose(init.means[:, 0], [-2.0, 0.0, 2.0])


def test_gmm_fit_runs():
    opt = CEMGMMOptimizer(population=200, n_components=5, **BOX).fit(MOTIVATIONAL)
    assert np.isfinite(opt.expected_value_)
    assert -7.5 <= opt.solution_[0] <= 7.5


def test_decent_attributes():
    opt = DecentCEMOptimizer(population=100, n_instances=3, **BOX).fit(MOTIVATIONAL)
    assert opt.shares_ == [34, 33, 33]
    assert len(opt.instance_results_) == 3
    assert opt.result_ is opt.instance_results_[opt.selected_index_]


def test_clone_and_set_params():
    opt = DecentCEMOptimizer(population=200, n_instances=5, **BOX)
    twin = clone(opt).set_params(n_instances=8)
    assert twin.get_params()["n_instances"] == 8
    assert opt.n_instances == 5


def test_evaluate_requires_fit():
    with pytest.raises(NotFittedError):
        CEMOptimizer(**BOX).evaluate(MOTIVATIONAL)


def test_evaluate_scores_the_solution():
    opt = CEMOptimizer(**BOX).fit(MOTIVATIONAL)
    assert opt.evaluate(MOTIVATIONAL) == pytest.approx(MOTIVATIONAL(opt.solution_[None])[0])
