"""Model-predictive control with decentralized CEM.

Three planner families share one code path per step:

* ``decent_pets``: every instance searches action sequences from a fixed
  distribution (box midpoint, or its own previous solution shifted by one).
* ``decent_cem_a``: instance ``i`` starts from the action sequence its policy
  net produces along an imagined rollout; the nets are then trained to copy
  the refined first actions.
* ``decent_cem_p``: instance ``i`` searches a sequence of parameter offsets
  for its policy net; the nets move by the mean offset once per episode.

With ``num_instances == 1`` each family is its centralized counterpart.

Randomness: the planning call at step ``t`` of episode ``e`` of an agent
seeded ``seed`` gives instance ``i`` the stream
``SeedSequence(seed, spawn_key=(tag, e, t, i))``, so results depend neither
on how instances are scheduled nor on what the agent did before.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from itertools import combinations

import numpy as np

from .cem import CemConfig
from .decent import EnsembleConfig, decent_run, select_best, split_budget
from .distributions import DiagonalGaussian
from .exceptions import ConfigError
from .models import (
    DynamicsEnsemble,
    MlpParams,
    ReplayBuffer,
    TrueDynamics,
    batch_rollout,
    init_mlp,
    mlp_forward,
    mlp_train_mse,
)

MODES = ("decent_pets", "decent_cem_a", "decent_cem_p", "policy_control")
_MISC_KEY = 2**31 - 1


@dataclass
class PlannerConfig:
    horizon: int = 30
    total_population: int = 500
    elite_ratio: float = 0.1
    init_variance: float = 0.25
    max_cem_iters: int = 5
    num_instances: int = 5
    mode: str = "decent_pets"
    discount: float = 1.0
    use_true_dynamics: bool = False
    # CEM update inside one planning step
    alpha: float = 0.9
    min_variance: float = 1e-3
    warm_start: bool = True
    param_init_variance: float | None = None
    # policy nets
    policy_hidden_a: tuple = (64, 64)
    policy_hidden_p: tuple = (32,)
    policy_lr: float = 1e-3
    policy_epochs: int = 5
    policy_batch: int = 32
    # dynamics model
    model_hidden: tuple = (200, 200)
    model_members: int = 5
    model_lr: float = 1e-3
    model_epochs: int = 5
    model_batch: int = 32
    # protocol
    eval_episodes: int = 5
    train_env_seed: int = 1234
    eval_env_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be >= 1")
        if int(self.max_cem_iters) < 0:
            raise ConfigError("max_cem_iters must be >= 0")
        if not 1 <= int(self.num_instances) <= int(self.total_population):
            raise ConfigError("need 1 <= num_instances <= total_population")
        if not 0.0 < self.elite_ratio < 1.0:
            raise ConfigError("elite_ratio must lie in (0, 1)")
        if self.init_variance <= 0:
            raise ConfigError("init_variance must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigError("discount must lie in [0, 1]")

    @property
    def shares(self) -> list[int]:
        return split_budget(self.total_population, self.num_instances)

    @property
    def policy_hidden(self) -> tuple:
        return self.policy_hidden_p if self.mode == "decent_cem_p" else self.policy_hidden_a

    def cem_config(self, lower=None, upper=None) -> CemConfig:
        # stall_tol = 0 never stalls: every step spends exactly the same budget
        return CemConfig(
            population=self.total_population,
            elite_ratio=self.elite_ratio,
            alpha=self.alpha,
            min_variance=self.min_variance,
            max_iters=max(1, int(self.max_cem_iters)),
            stall_tol=0.0,
            output_mode="mean",
            lower=lower,
            upper=upper,
        )


@dataclass
class PlanRecord:
    first_actions: np.ndarray   # (M, d_a) refined first action of every instance
    values: np.ndarray          # (M,) expected value of every instance
    selected: int
    action: np.ndarray          # executed action
    means: np.ndarray           # (M, H, d) refined mean sequence of every instance
    deltas: np.ndarray | None = None   # (M, |theta|) first-step offsets (P mode)
    member: int | None = None   # model member driving the A-mode reference rollout
    n_evaluations: int = 0


# --------------------------------------------------------------------------
# streams and objectives
# --------------------------------------------------------------------------


def step_streams(seed: int, key: tuple, m: int):
    """Per-instance generators plus one auxiliary generator for a planning call."""
    inst = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(*key, i)))
            for i in range(m)]
    misc = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(*key, _MISC_KEY)))
    return inst, misc


def make_model(cfg: PlannerConfig, env, seed: int = 0):
    if cfg.use_true_dynamics:
        return TrueDynamics(env)
    return DynamicsEnsemble(env.state_dim, env.action_dim, cfg.model_hidden, cfg.model_members,
                            seed=seed, lr=cfg.model_lr, epochs=cfg.model_epochs,
                            batch=cfg.model_batch)


def _members_from_uniforms(model, u, n):
    if u is None:
        return np.zeros(n, dtype=int)
    return np.minimum((u[:, 0] * model.n_members).astype(int), model.n_members - 1)


class ActionSequenceObjective:
    """Value of flattened ``H x d_a`` action sequences under a model.

    With several model members each rollout's member comes from a uniform the
    CEM instance draws from its own stream.
    """

    def __init__(self, model, env, s0, horizon, discount):
        self.model, self.env, self.s0 = model, env, np.asarray(s0, dtype=float)
        self.horizon, self.discount = int(horizon), float(discount)
        self.noise_dim = 1 if model.n_members > 1 else 0

    def __call__(self, x, u=None):
        x = np.asarray(x, dtype=float)
        acts = x.reshape(x.shape[0], self.horizon, self.env.action_dim)
        members = _members_from_uniforms(self.model, u, x.shape[0])
        _, values = batch_rollout(self.model, self.s0, acts, self.env.reward, self.discount,
                                  members)
        return values


def _rowwise_forward(layer_sizes, flat, x):
    """Forward pass where row ``j`` of ``x`` uses parameter vector ``flat[j]``."""
    h, pos = x, 0
    last = len(layer_sizes) - 2
    for k, (fi, fo) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        w = flat[:, pos : pos + fi * fo].reshape(-1, fi, fo)
        pos += fi * fo
        b = flat[:, pos : pos + fo]
        pos += fo
        h = np.einsum("ni,nio->no", h, w) + b
        if k < last:
            h = np.tanh(h)
    return h


class ParameterSequenceObjective:
    """Value of ``H`` per-step policy parameter vectors (flattened).

    Step ``h`` of the imagined rollout acts with the policy whose parameters
    are the ``h``-th block of the sample.
    """

    def __init__(self, model, env, s0, horizon, discount, layer_sizes):
        self.model, self.env, self.s0 = model, env, np.asarray(s0, dtype=float)
        self.horizon, self.discount = int(horizon), float(discount)
        self.layer_sizes = tuple(layer_sizes)
        self.n_params = sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))
        self.noise_dim = 1 if model.n_members > 1 else 0

    def actions(self, x, members):
        n = x.shape[0]
        thetas = x.reshape(n, self.horizon, self.n_params)
        s = np.broadcast_to(self.s0, (n, self.s0.size)).copy()
        acts = np.empty((n, self.horizon, self.env.action_dim))
        with np.errstate(all="ignore"):
            for h in range(self.horizon):
                acts[:, h] = self.env.clip_action(_rowwise_forward(self.layer_sizes, thetas[:, h], s))
                s = self.model.next_state(s, acts[:, h], members)
        return acts

    def __call__(self, x, u=None):
        x = np.asarray(x, dtype=float)
        members = _members_from_uniforms(self.model, u, x.shape[0])
        acts = self.actions(x, members)
        acts = np.where(np.isfinite(acts), acts, 0.0)
        _, values = batch_rollout(self.model, self.s0, acts, self.env.reward, self.discount,
                                  members)
        return values


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


class PolicyEnsemble:
    """``M`` independently initialized policy nets, each with its own data."""

    def __init__(self, members: list):
        self.members = list(members)
        self.buffers: list = [[] for _ in self.members]

    @classmethod
    def random(cls, m, state_dim, action_dim, hidden, rng, zero=False):
        sizes = (state_dim, *hidden, action_dim)
        return cls([init_mlp(sizes, rng, zero=zero) for _ in range(m)])

    def __len__(self):
        return len(self.members)

    def act(self, i, s, env=None):
        a = mlp_forward(self.members[i], np.asarray(s, dtype=float))
        return env.clip_action(a) if env is not None else a

    def act_all(self, s, env=None) -> np.ndarray:
        return np.stack([self.act(i, s, env) for i in range(len(self))])

    def copy(self) -> "PolicyEnsemble":
        out = PolicyEnsemble([p.copy() for p in self.members])
        out.buffers = [list(b) for b in self.buffers]
        return out


def train_policies_bc(policies: PolicyEnsemble, lr=1e-3, epochs=5, batch=32, rng=None,
                      optimizer="adam") -> PolicyEnsemble:
    """Member ``i`` regresses onto ``(s, a_hat)`` pairs of its own buffer only."""
    rng = np.random.default_rng(0) if rng is None else rng
    for i, buf in enumerate(policies.buffers):
        if not buf:
            continue
        x = np.array([s for s, _ in buf])
        y = np.array([a for _, a in buf])
        policies.members[i], _ = mlp_train_mse(policies.members[i], x, y, lr, epochs, batch,
                                               rng, optimizer)
    return policies


def train_policies_avg(policies: PolicyEnsemble) -> PolicyEnsemble:
    """``theta_i += mean(stored offsets)``, then clear the buffers."""
    for i, buf in enumerate(policies.buffers):
        if buf:
            theta = policies.members[i].flatten() + np.mean(np.array(buf), axis=0)
            policies.members[i] = policies.members[i].with_flat(theta)
    policies.buffers = [[] for _ in policies.members]
    return policies


def imagined_policy_actions(policy: MlpParams, model, env, s0, horizon, member=0):
    """Actions a policy takes along its own imagined rollout from ``s0``."""
    s = np.asarray(s0, dtype=float)[None]
    members = np.array([member])
    acts = np.empty((horizon, env.action_dim))
    with np.errstate(all="ignore"):
        for h in range(horizon):
            a = env.clip_action(mlp_forward(policy, s))
            a = np.where(np.isfinite(a), a, env.action_mid)
            acts[h] = a[0]
            s = model.next_state(s, a, members)
    return acts


def policy_control_act(policies: PolicyEnsemble, s, env=None, model=None, horizon=30,
                       discount=1.0):
    """Act with the policy nets alone.

    A single net (or no model to score with) acts directly. Otherwise every
    member is rolled out ``horizon`` steps through member 0 of the model and
    the member with the highest imagined return acts; ties go to the lowest
    index.
    """
    if len(policies) == 1 or model is None:
        return policies.act(0, s, env)
    seqs = np.stack([imagined_policy_actions(p, model, env, s, horizon) for p in policies.members])
    _, values = batch_rollout(model, s, seqs, env.reward, discount)
    return seqs[select_best(values), 0]


def big_network_hidden(m: int, state_dim: int, action_dim: int, hidden=(64, 64)) -> tuple:
    """Hidden widths of one net with as many layers as ``hidden`` and about
    ``m`` times the weights of a single ``[s, *hidden, a]`` net."""
    sizes = (state_dim, *hidden, action_dim)
    target = m * sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(hidden) == 1:
        # params(h) = (s + a + 1) h + a
        return (max(1, round((target - action_dim) / (state_dim + action_dim + 1))),)
    if len(hidden) != 2:
        raise ConfigError("big_network_hidden handles one or two hidden layers")
    # params(h) = h^2 + (s + a + 3) h + a for [s, h, h, a]
    b = state_dim + action_dim + 3
    h = (-b + math.sqrt(b * b + 4 * (target - action_dim))) / 2
    return (max(1, round(h)),) * 2


# --------------------------------------------------------------------------
# one planning step
# --------------------------------------------------------------------------


def _shift(seq, fill):
    out = np.empty_like(seq)
    out[:-1] = seq[1:]
    out[-1] = fill
    return out


def _solve(cfg, env, objective, inits, rngs, dim, lower=None, upper=None):
    """Run the ensemble (or score the initial means when no iterations are
    allowed); returns means (M, dim), values (M,), selected, evaluations."""
    m = len(inits)
    if int(cfg.max_cem_iters) == 0:
        means = np.stack([d.mean for d in inits])
        x = means if lower is None else np.clip(means, lower, upper)
        if getattr(objective, "noise_dim", 0):
            u = np.stack([r.random(objective.noise_dim) for r in rngs])
            values = np.asarray(objective(x, u), dtype=float)
        else:
            values = np.asarray(objective(x), dtype=float)
        return means, values, select_best(values), m
    ecfg = EnsembleConfig(m, cfg.total_population, cfg.cem_config(lower, upper))
    out = decent_run(ecfg, inits, objective, rngs)
    means = np.stack([r.final_dist.mean if hasattr(r, "final_dist") else inits[i].mean
                      for i, r in enumerate(out.instance_results)])
    values = out.expected_values
    n_eval = sum(r.n_evaluations for r in out.instance_results if hasattr(r, "n_evaluations"))
    return means, values, out.selected_index, n_eval


def plan_decent_pets(s, cfg: PlannerConfig, env, model, rngs, warm=None):
    """Action-space planning from fixed initial distributions.

    ``warm`` holds last step's ``(M, H, d_a)`` mean sequences; when given,
    each instance starts from its own sequence shifted by one step.
    """
    m, h, da = int(cfg.num_instances), int(cfg.horizon), env.action_dim
    if warm is None:
        starts = np.broadcast_to(env.action_mid, (m, h, da))
    else:
        starts = np.stack([_shift(w, env.action_mid) for w in warm])
    inits = [DiagonalGaussian(seq.ravel(), cfg.init_variance) for seq in starts]
    obj = ActionSequenceObjective(model, env, s, h, cfg.discount)
    lo, hi = np.tile(env.action_low, h), np.tile(env.action_high, h)
    means, values, best, n_eval = _solve(cfg, env, obj, inits, rngs, h * da, lo, hi)
    means = means.reshape(m, h, da)
    action = env.clip_action(means[best, 0])
    return action, PlanRecord(means[:, 0].copy(), values, best, action, means,
                              n_evaluations=n_eval)


def plan_decent_cem_a(s, cfg: PlannerConfig, env, model, policies: PolicyEnsemble, rngs,
                      misc_rng, collect=True):
    """Action-space planning initialized from each instance's policy net.

    Every instance's refined first action becomes a training pair for its own
    net when ``collect`` is set.
    """
    m, h, da = int(cfg.num_instances), int(cfg.horizon), env.action_dim
    member = int(misc_rng.integers(model.n_members))
    refs = [imagined_policy_actions(p, model, env, s, h, member) for p in policies.members]
    inits = [DiagonalGaussian(r.ravel(), cfg.init_variance) for r in refs]
    obj = ActionSequenceObjective(model, env, s, h, cfg.discount)
    lo, hi = np.tile(env.action_low, h), np.tile(env.action_high, h)
    means, values, best, n_eval = _solve(cfg, env, obj, inits, rngs, h * da, lo, hi)
    means = means.reshape(m, h, da)
    first = env.clip_action(means[:, 0])
    if collect:
        for i in range(m):
            policies.buffers[i].append((np.asarray(s, dtype=float).copy(), first[i].copy()))
    return first[best].copy(), PlanRecord(first, values, best, first[best].copy(), means,
                                          member=member, n_evaluations=n_eval)


def plan_decent_cem_p(s, cfg: PlannerConfig, env, model, policies: PolicyEnsemble, rngs,
                      collect=True):
    """Parameter-space planning around each instance's policy net.

    The search runs over absolute parameters initialized at ``theta_i`` for
    every step, which is the zero-offset Gaussian translated by ``theta_i``;
    offsets are recovered by subtracting ``theta_i``.
    """
    m, h = int(cfg.num_instances), int(cfg.horizon)
    sizes = policies.members[0].layer_sizes
    thetas = [p.flatten() for p in policies.members]
    n_par = thetas[0].size
    var = cfg.init_variance if cfg.param_init_variance is None else cfg.param_init_variance
    inits = [DiagonalGaussian(np.tile(t, h), var) for t in thetas]
    obj = ParameterSequenceObjective(model, env, s, h, cfg.discount, sizes)
    means, values, best, n_eval = _solve(cfg, env, obj, inits, rngs, h * n_par)
    deltas = np.stack([means[i, :n_par] - thetas[i] for i in range(m)])
    if int(cfg.max_cem_iters) == 0:
        deltas = np.zeros_like(deltas)
    if collect:
        for i in range(m):
            policies.buffers[i].append(deltas[i].copy())
    firsts = np.stack([
        env.clip_action(mlp_forward(policies.members[i].with_flat(thetas[i] + deltas[i]), s))
        for i in range(m)
    ])
    return firsts[best].copy(), PlanRecord(firsts, values, best, firsts[best].copy(),
                                           means.reshape(m, h, n_par), deltas=deltas,
                                           n_evaluations=n_eval)


class Agent:
    """Stateful wrapper: stream bookkeeping, warm starts and the policy nets."""

    def __init__(self, cfg: PlannerConfig, env, model=None, policies=None, seed: int = 0):
        self.cfg, self.env, self.seed = cfg, env, int(seed)
        self.model = make_model(cfg, env, seed) if model is None else model
        if policies is None and cfg.mode != "decent_pets":
            rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(7,)))
            policies = PolicyEnsemble.random(cfg.num_instances, env.state_dim, env.action_dim,
                                             cfg.policy_hidden, rng)
        self.policies = policies
        self.calls = 0
        self.evaluations = 0
        self.warm = None

    def reset(self):
        self.warm = None

    def plan(self, s, tag=0, collect=True, act_mode=None, key=None):
        """Plan one action.

        ``key`` names the random streams of this call (default
        ``(tag, call_count)``); ``tag`` separates training and evaluation.
        """
        cfg = self.cfg
        mode = act_mode or cfg.mode
        key = (tag, self.calls) if key is None else key
        rngs, misc = step_streams(self.seed, key, int(cfg.num_instances))
        self.calls += 1
        if mode == "decent_pets":
            a, rec = plan_decent_pets(s, cfg, self.env, self.model, rngs,
                                      self.warm if cfg.warm_start else None)
            self.warm = rec.means
        elif mode == "decent_cem_a":
            a, rec = plan_decent_cem_a(s, cfg, self.env, self.model, self.policies, rngs, misc,
                                       collect)
        elif mode == "decent_cem_p":
            a, rec = plan_decent_cem_p(s, cfg, self.env, self.model, self.policies, rngs, collect)
        elif mode == "policy_control":
            a = policy_control_act(self.policies, s, self.env, self.model, cfg.horizon,
                                   cfg.discount)
            rec = None
        else:  # pragma: no cover - validated in PlannerConfig
            raise ConfigError(mode)
        if rec is not None:
            self.evaluations += rec.n_evaluations
        return self.env.clip_action(a), rec


# --------------------------------------------------------------------------
# episodes and training
# --------------------------------------------------------------------------


@dataclass
class Diagnostics:
    """Per-step instance behaviour during training episodes."""

    num_instances: int
    counts: np.ndarray = None
    steps: int = 0
    rows: list = field(default_factory=list)      # (step, instance, selected, action)
    distances: list = field(default_factory=list)  # per step: M(M-1)/2 distances
    ratios: list = field(default_factory=list)     # per step: cumulative ratios

    def __post_init__(self):
        self.counts = np.zeros(self.num_instances, dtype=int)

    def record(self, rec: PlanRecord):
        self.steps += 1
        self.counts[rec.selected] += 1
        for i, a in enumerate(rec.first_actions):
            self.rows.append((self.steps, i, int(i == rec.selected), np.asarray(a).ravel()))
        acts = np.asarray(rec.first_actions, dtype=float)
        self.distances.append(
            [float(np.linalg.norm(acts[i] - acts[j]))
             for i, j in combinations(range(self.num_instances), 2)]
        )
        self.ratios.append(self.counts / self.steps)

    def selection_ratios(self) -> list[Fraction]:
        return [Fraction(int(c), self.steps) for c in self.counts]


def run_episode_agent(agent: Agent, s0, steps, tag, collect=True, diagnostics=None,
                      act_mode=None, data=None, episode=0):
    env = agent.env
    agent.reset()
    s = np.asarray(s0, dtype=float)
    states, actions, total = [s], [], 0.0
    for t in range(int(steps)):
        a, rec = agent.plan(s, tag, collect, act_mode, key=(tag, episode, t))
        if diagnostics is not None and rec is not None:
            diagnostics.record(rec)
        total += float(env.reward(s, a))
        s = env.step(s, a)
        states.append(s)
        actions.append(a)
    if data is not None:
        data.extend(states, actions)
    return total, np.array(states), np.array(actions)


def _random_episode(env, s0, steps, rng, data):
    s = np.asarray(s0, dtype=float)
    states, actions, total = [s], [], 0.0
    for _ in range(int(steps)):
        a = rng.uniform(env.action_low, env.action_high)
        total += float(env.reward(s, a))
        s = env.step(s, a)
        states.append(s)
        actions.append(a)
    data.extend(states, actions)
    return total


@dataclass
class TrainingRun:
    curve: list          # rows: episode, step, eval_return_mean, eval_return_stderr, mode, seed
    diagnostics: Diagnostics
    timings: dict
    agent: Agent
    planning_samples: list  # evaluations spent per training episode
    complete: bool = True
    error: str | None = None


def evaluate_agent(agent, steps, episodes, seed, start=None, act_mode=None, tag=1):
    """Mean and standard error of returns on an evaluation env seeded ``seed``.

    The evaluation env is reseeded on every call and evaluation episode ``k``
    always plans with the streams of episode ``k``, so successive evaluations
    see the same start states and noise. ``start`` overrides the reset state.
    """
    env = agent.env
    rng = np.random.default_rng(seed)
    returns = []
    for k in range(int(episodes)):
        s0 = env.reset(rng) if start is None else start
        ret, _, _ = run_episode_agent(agent, s0, steps, tag, collect=False, act_mode=act_mode,
                                      episode=k)
        returns.append(ret)
    r = np.array(returns)
    stderr = float(r.std(ddof=1) / math.sqrt(r.size)) if r.size > 1 else 0.0
    return float(r.mean()), stderr


def run_training(env, cfg: PlannerConfig, episodes: int, seed: int = 1, steps=None,
                 eval_start=None, stop_at=None, progress=None, eval_mode=None) -> TrainingRun:
    """Outer model-based RL loop for one seed.

    Episode 1 acts uniformly at random to seed the transition data. After
    every episode the dynamics model is refit on all transitions, the policy
    nets are updated (behaviour cloning in A mode, the mean offset in P mode)
    and the agent is evaluated. ``stop_at`` ends the run early once the
    evaluation mean reaches it.

    Training acts with ``cfg.mode`` and evaluation with ``eval_mode``
    (default the same). ``mode="policy_control"`` is shorthand for training in
    A mode and evaluating the policy nets alone.
    """
    if int(episodes) < 2:
        raise ConfigError("episodes must be >= 2")
    steps = env.episode_length if steps is None else int(steps)
    agent = Agent(cfg, env, seed=seed)
    train_rng = np.random.default_rng(cfg.train_env_seed)
    agent_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    data = ReplayBuffer()
    diag = Diagnostics(int(cfg.num_instances))
    timings = {"planning": 0.0, "model_training": 0.0, "policy_training": 0.0, "evaluation": 0.0}
    curve, samples = [], []
    train_mode = "decent_cem_a" if cfg.mode == "policy_control" else cfg.mode
    eval_mode = cfg.mode if eval_mode is None else eval_mode
    label = cfg.mode
    if eval_mode != cfg.mode:
        label = f"{cfg.mode}-PC" if eval_mode == "policy_control" else f"{cfg.mode}/{eval_mode}"
    total_steps = 0
    try:
        for ep in range(1, int(episodes) + 1):
            s0 = env.reset(train_rng)
            t0 = time.perf_counter()
            before = agent.evaluations
            if ep == 1:
                _random_episode(env, s0, steps, agent_rng, data)
                samples.append(0)
            else:
                run_episode_agent(agent, s0, steps, 0, True, diag, train_mode, data, episode=ep)
                samples.append(agent.evaluations - before)
            timings["planning"] += time.perf_counter() - t0
            total_steps += steps

            t0 = time.perf_counter()
            if not cfg.use_true_dynamics:
                agent.model.fit_buffer(data, agent_rng)
            timings["model_training"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            if ep > 1 and agent.policies is not None:
                if train_mode == "decent_cem_a":
                    train_policies_bc(agent.policies, cfg.policy_lr, cfg.policy_epochs,
                                      cfg.policy_batch, agent_rng)
                elif train_mode == "decent_cem_p":
                    train_policies_avg(agent.policies)
            timings["policy_training"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            mean, se = evaluate_agent(agent, steps, cfg.eval_episodes, cfg.eval_env_seed,
                                      eval_start, eval_mode)
            timings["evaluation"] += time.perf_counter() - t0
            curve.append(dict(episode=ep, step=total_steps, eval_return_mean=mean,
                              eval_return_stderr=se, mode=label, seed=seed))
            if progress is not None:
                progress(curve[-1])
            if stop_at is not None and mean >= stop_at:
                break
    except Exception as exc:  # keep the partial table
        return TrainingRun(curve, diag, timings, agent, samples, False, repr(exc))
    return TrainingRun(curve, diag, timings, agent, samples)

