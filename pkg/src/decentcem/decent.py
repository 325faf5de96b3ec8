"""Decentralized CEM: independent instances on a split budget, argmax on top.

Each instance ranks only its own samples and keeps its own elite set. After
all instances stop, the ensemble answer is the instance whose final batch has
the highest sample-mean value; ties go to the lowest index. With a single
instance this is exactly :func:`decentcem.cem.cem_run`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cem import CemConfig, CemResult, cem_run, instance_rng, run_gaussian_batch
from .distributions import DiagonalGaussian, Distribution
from .exceptions import ConfigError, EnsembleError, NoValidSampleError

INIT_SCHEMES = ("uniform_spread", "random_uniform", "shared")

# spawn key of the stream used to draw random_uniform initial means; far from
# any realistic instance index so it never collides with an instance stream
_INIT_STREAM_KEY = 2**31 - 1


def split_budget(total: int, m: int) -> list[int]:
    """Split ``total`` samples over ``m`` instances as evenly as possible.

    >>> split_budget(10, 3)
    [4, 3, 3]
    """
    total, m = int(total), int(m)
    if m < 1:
        raise ConfigError(f"need at least one instance, got {m}")
    if m > total:
        raise ConfigError(f"cannot split {total} samples over {m} instances")
    base, extra = divmod(total, m)
    return [base + 1 if i < extra else base for i in range(m)]


def select_best(expected_values) -> int:
    """Index of the largest finite value; the lowest index wins ties."""
    v = np.asarray(expected_values, dtype=float)
    if v.size == 0:
        raise EnsembleError("no instances to select from")
    v = np.where(np.isnan(v), -np.inf, v)
    if not np.any(v > -np.inf):
        raise EnsembleError("every instance failed or scored -inf")
    return int(np.argmax(v))


@dataclass
class EnsembleConfig:
    """``per_instance_cfg.population`` is ignored; shares come from
    :func:`split_budget` applied to ``total_population``."""

    num_instances: int = 5
    total_population: int = 500
    per_instance_cfg: CemConfig = field(default_factory=CemConfig)
    init_scheme: str = "uniform_spread"
    seed_base: int = 0

    def __post_init__(self):
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}")
        if not 1 <= int(self.num_instances) <= int(self.total_population):
            raise ConfigError(
                f"need 1 <= num_instances <= total_population, got "
                f"{self.num_instances} and {self.total_population}"
            )

    @property
    def shares(self) -> list[int]:
        return split_budget(self.total_population, self.num_instances)


@dataclass(eq=False)
class DecentResult:
    result: CemResult
    instance_results: list
    selected_index: int
    shares: list

    @property
    def expected_values(self) -> np.ndarray:
        return np.array(
            [r.expected_value if isinstance(r, CemResult) else -np.inf for r in self.instance_results]
        )


def make_inits(
    scheme: str,
    m: int,
    lower,
    upper,
    seed: int = 0,
    shared: Distribution | None = None,
) -> list[Distribution]:
    """Initial distributions for ``m`` instances over the box ``[lower, upper]``.

    ``uniform_spread`` puts instance ``i`` at the midpoint of the ``i``-th of
    ``m`` equal slices of every coordinate with variance ``(width / (2m))**2``;
    ``random_uniform`` draws the means uniformly (same variance);
    ``shared`` repeats ``shared`` (or a centred Gaussian of variance
    ``(width / 4)**2``) for every instance.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    width = upper - lower
    var = (width / (2 * m)) ** 2
    if scheme == "uniform_spread":
        return [DiagonalGaussian(lower + (i + 0.5) * width / m, var) for i in range(m)]
    if scheme == "random_uniform":
        rng = instance_rng(seed, _INIT_STREAM_KEY)
        means = rng.uniform(lower, upper, size=(m, lower.shape[0]))
        return [DiagonalGaussian(mu, var) for mu in means]
    if scheme == "shared":
        base = shared or DiagonalGaussian((lower + upper) / 2, (width / 4) ** 2)
        return [base] * m
    raise ConfigError(f"unknown init scheme {scheme!r}")


def decent_run(
    cfg: EnsembleConfig,
    inits: Sequence[Distribution] | None,
    objective,
    rngs: Sequence[np.random.Generator] | None = None,
    schedule: Sequence[int] | None = None,
    record_history: bool = False,
) -> DecentResult:
    """Run all instances to their own stopping rule and pick the argmax.

    Parameters
    ----------
    inits : list of distributions, or None to build them from
        ``cfg.init_scheme`` over the box of ``cfg.per_instance_cfg``.
    rngs : optional per-instance generators; defaults to
        ``instance_rng(cfg.seed_base, i)``.
    schedule : optional permutation of instance indices fixing the order in
        which instances are laid out for batched execution. Results do not
        depend on it.
    """
    m = int(cfg.num_instances)
    shares = cfg.shares
    icfg = cfg.per_instance_cfg
    if inits is None:
        if icfg.lower is None or icfg.upper is None:
            raise ConfigError("building inits needs a bounded domain (lower/upper)")
        inits = make_inits(cfg.init_scheme, m, icfg.lower, icfg.upper, cfg.seed_base)
    inits = list(inits)
    if len(inits) != m:
        raise ConfigError(f"got {len(inits)} initial distributions for {m} instances")
    if rngs is None:
        rngs = [instance_rng(cfg.seed_base, i) for i in range(m)]
    order = list(range(m)) if schedule is None else [int(i) for i in schedule]
    if sorted(order) != list(range(m)):
        raise ConfigError("schedule must be a permutation of instance indices")

    results: list = [None] * m
    gaussian = [i for i in order if isinstance(inits[i], DiagonalGaussian)]
    # batch the Gaussian instances that share a population size
    for share in dict.fromkeys(shares[i] for i in gaussian):
        group = [i for i in gaussian if shares[i] == share]
        out = run_gaussian_batch(
            [inits[i] for i in group],
            objective,
            replace(icfg, population=share),
            [rngs[i] for i in group],
            record_history=record_history,
        )
        for i, r in zip(group, out):
            results[i] = r
    for i in order:
        if results[i] is None:
            try:
                results[i] = cem_run(
                    inits[i], objective, replace(icfg, population=shares[i]), rngs[i], record_history
                )
            except NoValidSampleError as exc:
                results[i] = exc

    expected = [r.expected_value if isinstance(r, CemResult) else -np.inf for r in results]
    best = select_best(expected)
    return DecentResult(results[best], results, best, shares)
