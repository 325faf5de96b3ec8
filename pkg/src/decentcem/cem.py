"""Single-instance cross-entropy method and the annealed NEF variant.

Objectives are *maximized*. An objective is any callable mapping an
``(n, d)`` array of candidates to ``n`` values. Objectives that need their
own randomness (e.g. a model rollout that picks an ensemble member per
candidate) expose an integer attribute ``noise_dim``; they are then called as
``objective(x, u)`` where ``u`` holds ``(n, noise_dim)`` uniforms drawn from
the owning instance's stream right after the candidates themselves.

The Gaussian code path is written for a *batch* of independent instances
(:func:`run_gaussian_batch`), which is what the ensemble optimizer uses; a
single run is simply a batch of one. Every instance draws only from its own
generator and all reductions are per-row, so an instance's trajectory does
not depend on which other instances share its batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .distributions import (
    DiagonalGaussian,
    Distribution,
    EliteSet,
    GaussianMixture,
    _blend,
    batch_moments,
    fit_gmm_weighted,
    sample,
    smooth_update,
)
from .exceptions import ConfigError, NoValidSampleError

OUTPUT_MODES = ("mean", "sampled", "best_observed", "best_component")
_MODE_ALIASES = {"s": "sampled", "m": "best_component", "best": "best_observed"}

NEF_MAX_SAMPLES = 10**6


def instance_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Generator for instance ``index`` of a run seeded with ``seed``.

    Streams for distinct indices are statistically independent
    (``SeedSequence`` spawn keys), and a plain integer passed to
    :func:`cem_run` maps to index 0 so a one-instance ensemble and a bare run
    see the same numbers.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return instance_rng(int(rng), 0)


@dataclass
class CemConfig:
    """Budget and update rule of one CEM instance.

    ``lower``/``upper`` declare the box the candidates are clamped into before
    evaluation (scalars or length-``d`` arrays, ``None`` for unbounded).
    ``kappa`` and ``em_iters`` only matter for mixture distributions.
    """

    population: int = 100
    elite_ratio: float = 0.1
    alpha: float = 0.1
    min_variance: float = 1e-3
    max_iters: int = 100
    stall_iters: int = 3
    stall_tol: float = 1e-4
    output_mode: str = "mean"
    lower: object = None
    upper: object = None
    kappa: float = 0.5
    em_iters: int = 3

    def __post_init__(self):
        self.output_mode = _MODE_ALIASES.get(self.output_mode, self.output_mode)
        self.validate()

    def validate(self):
        if int(self.population) < 1:
            raise ConfigError(f"population must be >= 1, got {self.population}")
        if not 0.0 < self.elite_ratio < 1.0:
            raise ConfigError(f"elite_ratio must lie in (0, 1), got {self.elite_ratio}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.min_variance < 0:
            raise ConfigError("min_variance must be non-negative")
        if int(self.max_iters) < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if int(self.stall_iters) < 1:
            raise ConfigError("stall_iters must be >= 1")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in [0, 1], got {self.kappa}")
        if int(self.em_iters) < 1:
            raise ConfigError("em_iters must be >= 1")

    @property
    def n_elites(self) -> int:
        return n_elites(self.population, self.elite_ratio)


def n_elites(population: int, elite_ratio: float) -> int:
    # guard against ceil(0.1 * 100) == 11 from float noise
    return max(1, math.ceil(round(elite_ratio * population, 9)))


@dataclass(eq=False)
class CemResult:
    """Outcome of one CEM run."""

    final_dist: Distribution
    solution: np.ndarray
    expected_value: float
    best_sample: np.ndarray
    best_value: float
    iters_used: int
    n_evaluations: int = 0
    thresholds: list = field(default_factory=list)
    history: list | None = None

    def __eq__(self, other):
        if not isinstance(other, CemResult):
            return NotImplemented
        return (
            self.final_dist == other.final_dist
            and np.array_equal(self.solution, other.solution)
            and _same_float(self.expected_value, other.expected_value)
            and np.array_equal(self.best_sample, other.best_sample)
            and _same_float(self.best_value, other.best_value)
            and self.iters_used == other.iters_used
            and self.n_evaluations == other.n_evaluations
            and self.thresholds == other.thresholds
        )


def _same_float(a, b) -> bool:
    return (a == b) or (math.isnan(a) and math.isnan(b))


def elite_select(values, elite_ratio: float) -> tuple[np.ndarray, float]:
    """Indices of the top ``ceil(rho * N)`` values and the threshold v_th.

    Ties are broken toward the lower sample index; ``-inf`` (and NaN, which is
    treated as ``-inf``) never precedes a finite value.
    """
    v = _sanitize(np.asarray(values, dtype=float))
    if v.ndim != 1 or v.size == 0:
        raise ValueError("values must be a non-empty vector")
    if not np.any(np.isfinite(v)):
        raise NoValidSampleError("every sample scored -inf")
    k = n_elites(v.size, elite_ratio)
    idx, th = top_k_rows(v[None], k)
    return idx[0], float(th[0])


def top_k_rows(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-``k`` indices (ascending index order) and the k-th best value.

    Equivalent to a stable descending sort truncated at ``k``, but linear time:
    everything strictly above the k-th value is taken, then the lowest-index
    ties fill the remaining slots.
    """
    rows, n = values.shape
    if k >= n:
        return np.broadcast_to(np.arange(n), (rows, n)).copy(), values.min(axis=1)
    neg = -values
    kth = np.partition(neg, k - 1, axis=1)[:, k - 1 : k]
    above = neg < kth
    tied = neg == kth
    need = k - above.sum(axis=1, keepdims=True)
    take = above | (tied & (np.cumsum(tied, axis=1) <= need))
    idx = np.nonzero(take)[1].reshape(rows, k)
    return idx, -kth[:, 0]


def _sanitize(values: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(values), -np.inf, values)


def _bounds(cfg, dim):
    lo = None if cfg.lower is None else np.broadcast_to(np.asarray(cfg.lower, dtype=float), (dim,))
    hi = None if cfg.upper is None else np.broadcast_to(np.asarray(cfg.upper, dtype=float), (dim,))
    return lo, hi


def _clamp(x, lo, hi):
    if lo is not None:
        x = np.maximum(x, lo)
    if hi is not None:
        x = np.minimum(x, hi)
    return x


def evaluate(objective, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Evaluate ``objective`` on rows of ``x``, drawing its noise from ``rng``."""
    noise_dim = int(getattr(objective, "noise_dim", 0) or 0)
    if noise_dim:
        values = objective(x, rng.random((x.shape[0], noise_dim)))
    else:
        values = objective(x)
    values = np.asarray(values, dtype=float).reshape(x.shape[0])
    return _sanitize(values)


# --------------------------------------------------------------------------
# Gaussian engine
# --------------------------------------------------------------------------


@dataclass
class _Step:
    samples: np.ndarray      # (A, n, d)
    values: np.ndarray       # (A, n)
    elite_idx: list          # per-instance index arrays
    thresholds: np.ndarray   # (A,)
    means: np.ndarray        # (A, d) after smoothing
    variances: np.ndarray    # (A, d) after smoothing
    failed: np.ndarray       # (A,) bool, no finite value in the batch


def _gaussian_step(means, variances, rngs, n, objective, cfg, lo, hi) -> _Step:
    a_count, dim = means.shape
    std = np.sqrt(variances)
    x = np.empty((a_count, n, dim))
    for j, rng in enumerate(rngs):
        x[j] = means[j] + std[j] * rng.standard_normal((n, dim))
    x = _clamp(x, lo, hi)

    noise_dim = int(getattr(objective, "noise_dim", 0) or 0)
    if noise_dim:
        u = np.stack([rng.random((n, noise_dim)) for rng in rngs])
        raw = objective(x.reshape(-1, dim), u.reshape(-1, noise_dim))
    else:
        raw = objective(x.reshape(-1, dim))
    values = _sanitize(np.asarray(raw, dtype=float).reshape(a_count, n))

    k = n_elites(n, cfg.elite_ratio)
    order, thresholds = top_k_rows(values, k)
    elites = np.take_along_axis(x, order[:, :, None], axis=1)
    fit_mean, fit_var = batch_moments(elites)
    elite_idx = list(order)
    failed = ~np.isfinite(values).any(axis=1)

    # rows with fewer than k finite values: drop the -inf samples from the fit
    short = np.flatnonzero(~np.isfinite(thresholds) & ~failed)
    for j in short:
        keep = order[j][np.isfinite(values[j, order[j]])]
        m, v = batch_moments(x[j, keep][None])
        fit_mean[j], fit_var[j] = m[0], v[0]
        thresholds[j] = values[j, keep].min()
        elite_idx[j] = keep

    fit_var = np.maximum(fit_var, cfg.min_variance)
    new_means = _blend(fit_mean, means, cfg.alpha)
    new_vars = _blend(fit_var, variances, cfg.alpha)
    new_means[failed] = means[failed]
    new_vars[failed] = variances[failed]
    return _Step(x, values, elite_idx, thresholds, new_means, new_vars, failed)


def run_gaussian_batch(
    inits: Sequence[DiagonalGaussian],
    objective,
    cfg: CemConfig,
    rngs: Sequence[np.random.Generator],
    population: int | None = None,
    record_history: bool = False,
) -> list:
    """Run independent Gaussian CEM instances in lockstep.

    All instances draw ``population`` candidates per iteration (default
    ``cfg.population``) and each stops on its own stall rule. Returns one
    :class:`CemResult` per instance, or a :class:`NoValidSampleError` instance
    in place of a result when that instance never saw a finite value.
    """
    n = int(cfg.population if population is None else population)
    count = len(inits)
    if count == 0:
        return []
    dim = inits[0].dim
    lo, hi = _bounds(cfg, dim)
    means = np.stack([d.mean for d in inits]).astype(float)
    variances = np.maximum(np.stack([d.variance for d in inits]).astype(float), cfg.min_variance)

    active = np.ones(count, dtype=bool)
    errors: list = [None] * count
    stall = np.zeros(count, dtype=int)
    iters = np.zeros(count, dtype=int)
    best_val = np.full(count, -np.inf)
    best_x = means.copy()
    last_values = [None] * count
    thresholds: list = [[] for _ in range(count)]
    history = [[] for _ in range(count)] if record_history else None

    for _ in range(int(cfg.max_iters)):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        step = _gaussian_step(
            means[idx], variances[idx], [rngs[i] for i in idx], n, objective, cfg, lo, hi
        )
        for j, i in enumerate(idx):
            iters[i] += 1
            if step.failed[j]:
                errors[i] = NoValidSampleError(f"instance {i}: every sample scored -inf")
                active[i] = False
                continue
            row = step.values[j]
            top = int(np.argmax(row))
            if row[top] > best_val[i]:
                best_val[i] = row[top]
                best_x[i] = step.samples[j, top]
            last_values[i] = row
            thresholds[i].append(float(step.thresholds[j]))
            if record_history:
                history[i].append(
                    {
                        "iteration": int(iters[i]),
                        "dist": DiagonalGaussian(means[i].copy(), variances[i].copy()),
                        "samples": step.samples[j].copy(),
                        "values": row.copy(),
                        "elites": np.asarray(step.elite_idx[j]).copy(),
                    }
                )
        change = np.max(np.abs(step.means - means[idx]), axis=1)
        ok = ~step.failed
        means[idx[ok]] = step.means[ok]
        variances[idx[ok]] = step.variances[ok]
        moved = change >= cfg.stall_tol
        stall[idx] = np.where(moved, 0, stall[idx] + 1)
        active[idx[stall[idx] >= cfg.stall_iters]] = False

    results: list = []
    for i in range(count):
        if errors[i] is not None:
            results.append(errors[i])
            continue
        dist = DiagonalGaussian(means[i], variances[i])
        solution = _gaussian_solution(dist, cfg, best_x[i], rngs[i], lo, hi)
        results.append(
            CemResult(
                final_dist=dist,
                solution=solution,
                expected_value=float(np.mean(last_values[i])),
                best_sample=best_x[i].copy(),
                best_value=float(best_val[i]),
                iters_used=int(iters[i]),
                n_evaluations=int(iters[i]) * n,
                thresholds=thresholds[i],
                history=history[i] if record_history else None,
            )
        )
    return results


def _gaussian_solution(dist, cfg, best_x, rng, lo, hi):
    mode = cfg.output_mode
    if mode == "best_observed":
        return best_x.copy()
    if mode == "sampled":
        return _clamp(sample(dist, 1, rng)[0], lo, hi)
    return dist.mean.copy()


# --------------------------------------------------------------------------
# Mixture engine
# --------------------------------------------------------------------------


def _mixture_step(dist: GaussianMixture, objective, cfg, rng, lo, hi):
    x = _clamp(sample(dist, cfg.population, rng), lo, hi)
    values = evaluate(objective, x, rng)
    if not np.any(np.isfinite(values)):
        raise NoValidSampleError("every sample scored -inf")
    order, thr = elite_select(values, cfg.elite_ratio)
    order = order[np.isfinite(values[order])]
    weights = np.zeros(x.shape[0])
    weights[order] = 1.0
    fitted = fit_gmm_weighted(x, weights, dist, cfg.kappa, cfg.em_iters, cfg.min_variance)
    new = smooth_update(fitted, dist, cfg.alpha)
    return new, x, values, order, float(values[order].min())


def _run_mixture(init: GaussianMixture, objective, cfg, rng, record_history=False) -> CemResult:
    lo, hi = _bounds(cfg, init.dim)
    dist = GaussianMixture.from_arrays(
        init.means, np.maximum(init.variances, cfg.min_variance), init.weights
    )
    best_val, best_x = -np.inf, dist.mean.copy()
    stall, iters, thresholds, history = 0, 0, [], []
    values = None
    for _ in range(int(cfg.max_iters)):
        new, x, values, order, thr = _mixture_step(dist, objective, cfg, rng, lo, hi)
        iters += 1
        top = int(np.argmax(values))
        if values[top] > best_val:
            best_val, best_x = float(values[top]), x[top].copy()
        thresholds.append(thr)
        if record_history:
            history.append(
                {"iteration": iters, "dist": dist, "samples": x, "values": values, "elites": order}
            )
        change = float(np.max(np.abs(new.means - dist.means)))
        dist = new
        stall = 0 if change >= cfg.stall_tol else stall + 1
        if stall >= cfg.stall_iters:
            break

    n_eval = iters * cfg.population
    mode = cfg.output_mode
    if mode == "best_observed":
        solution = best_x
    elif mode == "sampled":
        solution = dist.means[rng.choice(dist.n_components, p=dist.weights)].copy()
    elif mode == "best_component":
        comp_values = evaluate(objective, _clamp(dist.means, lo, hi), rng)
        n_eval += dist.n_components
        solution = dist.means[int(np.argmax(comp_values))].copy()
    else:
        solution = dist.means[int(np.argmax(dist.weights))].copy()
    return CemResult(
        final_dist=dist,
        solution=_clamp(solution, lo, hi),
        expected_value=float(np.mean(values)),
        best_sample=best_x,
        best_value=best_val,
        iters_used=iters,
        n_evaluations=n_eval,
        thresholds=thresholds,
        history=history if record_history else None,
    )


# --------------------------------------------------------------------------
# Public single-instance API
# --------------------------------------------------------------------------


def cem_iterate(state: Distribution, objective, cfg: CemConfig, rng):
    """One sample / rank / fit / smooth round.

    Returns ``(new_distribution, elite_set, stats)`` where ``stats`` carries
    the batch ``samples`` and ``values`` plus their mean and maximum.
    """
    rng = as_generator(rng)
    if isinstance(state, GaussianMixture):
        lo, hi = _bounds(cfg, state.dim)
        new, x, values, order, thr = _mixture_step(state, objective, cfg, rng, lo, hi)
    else:
        lo, hi = _bounds(cfg, state.dim)
        step = _gaussian_step(
            state.mean[None].astype(float),
            state.variance[None].astype(float),
            [rng],
            cfg.population,
            objective,
            cfg,
            lo,
            hi,
        )
        if step.failed[0]:
            raise NoValidSampleError("every sample scored -inf")
        x, values = step.samples[0], step.values[0]
        order = np.asarray(step.elite_idx[0])
        thr = float(step.thresholds[0])
        new = DiagonalGaussian(step.means[0], step.variances[0])
    elites = EliteSet(x[order], values[order], thr, order)
    stats = {
        "samples": x,
        "values": values,
        "mean_value": float(np.mean(values)),
        "max_value": float(np.max(values)),
    }
    return new, elites, stats


def cem_run(
    init: Distribution,
    objective,
    cfg: CemConfig,
    rng=None,
    record_history: bool = False,
) -> CemResult:
    """Iterate CEM until ``max_iters`` or the mean stalls.

    The mean is considered stalled when its max-norm change stays below
    ``stall_tol`` for ``stall_iters`` consecutive iterations.
    """
    rng = as_generator(rng)
    if isinstance(init, GaussianMixture):
        return _run_mixture(init, objective, cfg, rng, record_history)
    (result,) = run_gaussian_batch([init], objective, cfg, [rng], record_history=record_history)
    if isinstance(result, Exception):
        raise result
    return result


# --------------------------------------------------------------------------
# Annealed CEM over a natural exponential family (fixed-variance Gaussian)
# --------------------------------------------------------------------------


def soft_indicator(x, gamma: float, epsilon: float):
    """Continuous elite indicator: 1 above ``gamma``, 0 below ``gamma - epsilon``,
    linear in between."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=float)
    out = np.clip((x - gamma + epsilon) / epsilon, 0.0, 1.0)
    out = np.where(x >= gamma, 1.0, out)
    out = np.where(x <= gamma - epsilon, 0.0, out)
    return out if out.ndim else float(out)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class NefCemConfig:
    """Schedules of the annealed CEM.

    Step sizes default to ``alpha_k = alpha_scale / (k + 1) ** alpha_exp`` and
    ``lambda_k = lambda_scale / (k + 1) ** lambda_exp``; pass callables in
    ``alpha_schedule`` / ``lambda_schedule`` to override. The per-step sample
    count is ``N_k = max(base_samples, round(base_samples * k ** beta))``.
    """

    epsilon: float = 1e-2
    lambda_exp: float = 0.5
    beta: float = 1.0
    base_samples: int = 10
    elite_ratio: float = 0.1
    alpha_scale: float = 1.0
    alpha_exp: float = 0.6
    lambda_scale: float = 1.0
    max_steps: int = 200
    alpha_schedule: Callable[[int], float] | None = None
    lambda_schedule: Callable[[int], float] | None = None
    lower: object = None
    upper: object = None
    max_samples: int = NEF_MAX_SAMPLES

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.lambda_exp < 0:
            raise ConfigError("lambda_exp must be non-negative")
        if not self.beta > max(0.0, 1.0 - 2.0 * self.lambda_exp):
            raise ConfigError(
                f"beta={self.beta} must exceed max(0, 1 - 2*lambda_exp)="
                f"{max(0.0, 1.0 - 2.0 * self.lambda_exp)}"
            )
        if self.base_samples < 1 or self.max_steps < 1:
            raise ConfigError("base_samples and max_steps must be >= 1")
        if not 0.0 < self.elite_ratio < 1.0:
            raise ConfigError("elite_ratio must lie in (0, 1)")

    def alpha(self, k: int) -> float:
        if self.alpha_schedule is not None:
            return float(self.alpha_schedule(k))
        return self.alpha_scale / (k + 1) ** self.alpha_exp

    def lam(self, k: int) -> float:
        if self.lambda_schedule is not None:
            return float(self.lambda_schedule(k))
        return self.lambda_scale / (k + 1) ** self.lambda_exp

    def samples_at(self, k: int) -> int:
        n = max(self.base_samples, _round_half_up(self.base_samples * k**self.beta))
        return min(n, self.max_samples)


def nef_update(samples, values, eta, alpha_k, lambda_k, epsilon, elite_ratio):
    """One parameter update of the annealed CEM for ``Gamma(x) = x``.

    Returns ``(eta_next, gamma_hat)``. When every indicator weight is zero the
    parameter is left unchanged.
    """
    x = np.asarray(samples, dtype=float)
    v = _sanitize(np.asarray(values, dtype=float))
    n = v.shape[0]
    rank = math.ceil(round((1.0 - elite_ratio) * n, 9))
    gamma = float(np.sort(v)[max(rank, 1) - 1])
    w = soft_indicator(v, gamma, epsilon)
    total = w.sum()
    if not total > 0:
        return np.array(eta, dtype=float, copy=True), gamma
    elite_term = (w @ x) / total
    pool_term = lambda_k * x.mean(axis=0) + (1.0 - lambda_k) * eta
    return alpha_k * elite_term + (1.0 - alpha_k) * pool_term, gamma


def nef_cem_run(init: DiagonalGaussian, objective, cfg: NefCemConfig, rng=None):
    """Annealed CEM with a fixed-variance Gaussian; returns ``(result, trace)``.

    ``trace`` stacks the mean parameter after every step, starting with the
    initial mean, so ``trace.shape == (steps + 1, d)``.
    """
    rng = as_generator(rng)
    lo, hi = _bounds(cfg, init.dim)
    std = np.sqrt(init.variance)
    eta = init.mean.astype(float).copy()
    trace = [eta.copy()]
    best_val, best_x = -np.inf, eta.copy()
    values = np.array([np.nan])
    n_eval = 0
    for k in range(int(cfg.max_steps)):
        n_k = cfg.samples_at(k)
        x = _clamp(eta + std * rng.standard_normal((n_k, init.dim)), lo, hi)
        values = evaluate(objective, x, rng)
        n_eval += n_k
        top = int(np.argmax(values))
        if values[top] > best_val:
            best_val, best_x = float(values[top]), x[top].copy()
        finite = np.isfinite(values)
        if finite.any():
            eta, _ = nef_update(
                x[finite], values[finite], eta, cfg.alpha(k), cfg.lam(k), cfg.epsilon, cfg.elite_ratio
            )
        trace.append(eta.copy())
    dist = DiagonalGaussian(eta, init.variance)
    result = CemResult(
        final_dist=dist,
        solution=eta.copy(),
        expected_value=float(np.mean(values)),
        best_sample=best_x,
        best_value=best_val,
        iters_used=int(cfg.max_steps),
        n_evaluations=n_eval,
    )
    return result, np.stack(trace)
