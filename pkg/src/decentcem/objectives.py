"""One-dimensional multimodal benchmark and its hyperparameter sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone
from sklearn.model_selection import ParameterGrid

from .estimators import CEMGMMOptimizer, CEMOptimizer, DecentCEMOptimizer

SHARED_DEFAULTS = dict(elite_ratio=0.1, alpha=0.1, min_variance=1e-3, max_iters=100)

# best settings per total population for the multimodal task
BEST_GMM = {
    100: dict(n_components=10, kappa=0.25, output_mode="m"),
    200: dict(n_components=8, kappa=0.5, output_mode="m"),
    500: dict(n_components=8, kappa=0.25, output_mode="m"),
    1000: dict(n_components=8, kappa=0.5, output_mode="s"),
}
BEST_DECENT = {100: 10, 200: 10, 500: 10, 1000: 8}


def eval_motivational(x):
    """``sin(x) + sin(10 x / 3)``, the cost to minimize."""
    x = np.asarray(x, dtype=float)
    return np.sin(x) + np.sin(10.0 * x / 3.0)


@dataclass(frozen=True)
class Objective1D:
    """A cost on ``[lower, upper]``; calling the object returns the negated
    cost so it plugs straight into the maximizing optimizers."""

    lower: float
    upper: float
    eval: object = eval_motivational

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower must be below upper")

    def cost(self, x):
        return self.eval(x)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return -self.eval(x.reshape(x.shape[0], -1)[:, 0])


MOTIVATIONAL = Objective1D(-7.5, 7.5, eval_motivational)


def grid_oracle(obj: Objective1D, points: int = 10**6) -> tuple[float, float]:
    """Exhaustive search of the cost on a uniform grid; returns ``(x*, f*)``."""
    if points < 2:
        raise ValueError("need at least two grid points")
    grid = np.linspace(obj.lower, obj.upper, int(points))
    cost = obj.cost(grid)
    i = int(np.argmin(cost))
    return float(grid[i]), float(cost[i])


_OPTIMIZERS = {"cem": CEMOptimizer, "cem_gmm": CEMGMMOptimizer, "decent_cem": DecentCEMOptimizer}


def make_optimizer(method: str, population: int, seed: int, obj=MOTIVATIONAL, shared=None,
                   **params):
    """Optimizer for one sweep cell; ``shared`` (default :data:`SHARED_DEFAULTS`)
    holds the settings common to all methods and ``params`` the cell's own."""
    if method not in _OPTIMIZERS:
        raise ValueError(f"unknown method {method!r}")
    base = dict(SHARED_DEFAULTS if shared is None else shared, population=population,
                lower=obj.lower, upper=obj.upper, random_state=seed)
    return _OPTIMIZERS[method](**{**base, **params})


def best_config(method: str, population: int) -> dict:
    if method == "cem_gmm":
        return dict(BEST_GMM[population])
    if method == "decent_cem":
        return {"n_instances": BEST_DECENT[population]}
    return {}


@dataclass
class SweepSpec:
    """Grid of methods x population sizes x per-method hyperparameters."""

    population_sizes: list = field(default_factory=lambda: [100, 200, 500, 1000])
    grids: dict = field(
        default_factory=lambda: {
            "cem": {},
            "cem_gmm": {
                "n_components": [3, 5, 8, 10],
                "kappa": [0.25, 0.5],
                "output_mode": ["s", "m"],
            },
            "decent_cem": {"n_instances": [3, 5, 8, 10]},
        }
    )
    runs: int = 10
    seed_base: int = 0
    shared: dict | None = None

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    def cells(self):
        for method, grid in self.grids.items():
            for pop in self.population_sizes:
                for params in ParameterGrid(grid):
                    yield method, int(pop), dict(params)


def format_params(params: dict) -> str:
    return ";".join(f"{k}={params[k]}" for k in sorted(params))


def run_cell(method, population, params, runs, seed_base=0, obj=MOTIVATIONAL, shared=None):
    """Run one sweep cell ``runs`` times; returns one row dict per run.

    Only the ``fit`` call is timed.
    """
    rows = []
    template = make_optimizer(method, population, seed_base, obj, shared, **params)
    for run in range(runs):
        opt = clone(template).set_params(random_state=seed_base + run)
        t0 = time.perf_counter()
        try:
            opt.fit(obj)
        except Exception:  # a failed run is a missing cell, not a failed sweep
            rows.append(dict(method=method, pop=population, params=format_params(params),
                             run=run, solution=float("nan"), final_cost=float("nan"),
                             wall_ms=float("nan")))
            continue
        wall = (time.perf_counter() - t0) * 1e3
        x = float(opt.solution_[0])
        rows.append(dict(method=method, pop=population, params=format_params(params),
                         run=run, solution=x, final_cost=float(obj.cost(opt.solution_[0])),
                         wall_ms=wall))
    return rows


def run_sweep(spec: SweepSpec, obj=MOTIVATIONAL, jobs: int = 1) -> list[dict]:
    cells = list(spec.cells())
    if jobs and jobs > 1:
        from joblib import Parallel, delayed

        chunks = Parallel(n_jobs=jobs)(
            delayed(run_cell)(m, p, prm, spec.runs, spec.seed_base, obj, spec.shared)
            for m, p, prm in cells
        )
    else:
        chunks = [run_cell(m, p, prm, spec.runs, spec.seed_base, obj, spec.shared)
                  for m, p, prm in cells]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r["method"], r["pop"], r["params"], r["run"]))
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Best hyperparameters per (method, population) by mean final cost."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], r["pop"], r["params"]), []).append(r)
    best: dict = {}
    for (method, pop, params), rs in sorted(groups.items()):
        costs = np.array([r["final_cost"] for r in rs], dtype=float)
        mean = float(np.nanmean(costs)) if np.any(np.isfinite(costs)) else float("inf")
        cand = dict(method=method, pop=pop, params=params, mean_cost=mean,
                    min_cost=float(np.nanmin(costs)), max_cost=float(np.nanmax(costs)),
                    total_ms=float(np.nansum([r["wall_ms"] for r in rs])))
        key = (method, pop)
        if key not in best or mean < best[key]["mean_cost"]:
            best[key] = cand
    return [best[k] for k in sorted(best)]
