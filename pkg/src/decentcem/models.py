"""Small numpy MLPs, a delta-predicting dynamics ensemble and imagined rollouts."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError, TrainingError

GRAD_CLIP = 10.0


@dataclass(eq=False)
class MlpParams:
    """Fully connected net: tanh on hidden layers, identity on the output."""

    layer_sizes: tuple
    weights: list
    biases: list

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ParameterError("need at least input and output sizes")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ParameterError("one weight matrix and bias per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ParameterError(f"layer {k}: got {w.shape}/{b.shape}, want {want}")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, theta) -> "MlpParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} parameters, got {theta.shape}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[pos : pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(theta[pos : pos + b.size].copy())
            pos += b.size
        return MlpParams(self.layer_sizes, ws, bs)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b))
                   for w, b in zip(self.weights, self.biases))


def init_mlp(layer_sizes, rng, zero=False) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    sizes = tuple(int(n) for n in layer_sizes)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if zero:
            ws.append(np.zeros((fan_in, fan_out)))
        else:
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(sizes, ws, bs)


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.layer_sizes[0]:
        raise ParameterError(f"input has {x.shape[-1]} features, net expects {p.layer_sizes[0]}")
    h = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
    return h


def _forward_cache(p: MlpParams, x):
    acts = [x]
    h = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def mlp_backward(p: MlpParams, x, grad_out):
    """Gradients of ``sum(grad_out * net(x))`` w.r.t. weights and biases."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    acts = _forward_cache(p, x)
    delta = np.atleast_2d(np.asarray(grad_out, dtype=float))
    gw = [None] * len(p.weights)
    gb = [None] * len(p.weights)
    for k in range(len(p.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ p.weights[k].T) * (1.0 - acts[k] ** 2)
    return gw, gb


def mse_loss_grad(p: MlpParams, x, y):
    """Mean squared error over all output entries and its parameter gradient."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    out = mlp_forward(p, x)
    diff = out - y
    loss = float(np.mean(diff**2))
    gw, gb = mlp_backward(p, x, 2.0 * diff / diff.size)
    return loss, gw, gb


def gradient_check(p: MlpParams, x, y, eps: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences."""
    _, gw, gb = mse_loss_grad(p, x, y)
    analytic = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gw, gb)])
    theta = p.flatten()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        lu = np.mean((mlp_forward(p.with_flat(up), x) - y) ** 2)
        ld = np.mean((mlp_forward(p.with_flat(down), x) - y) ** 2)
        numeric[i] = (lu - ld) / (2 * eps)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


@dataclass
class _Adam:
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def direction(self, grads):
        if not self.m:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(mh / (np.sqrt(vh) + self.eps))
        return out


def mlp_train_mse(
    p: MlpParams,
    x,
    y,
    lr: float = 1e-3,
    epochs: int = 5,
    batch: int = 32,
    rng=None,
    optimizer: str = "sgd",
    clip: float | None = GRAD_CLIP,
):
    """Mini-batch training on mean squared error.

    Returns ``(new_params, loss_trace)`` with the full-dataset loss after each
    epoch. ``optimizer`` is ``"sgd"`` (plain gradient steps) or ``"adam"``.
    Gradients are rescaled to global norm ``clip`` when they exceed it. A
    non-finite loss raises :class:`TrainingError`.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ParameterError("empty dataset")
    if y.shape[0] != n:
        raise ParameterError("x and y need the same number of rows")
    if optimizer not in ("sgd", "adam"):
        raise ParameterError(f"unknown optimizer {optimizer!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    p = p.copy()
    if lr == 0:
        loss = float(np.mean((mlp_forward(p, x) - y) ** 2))
        return p, [loss] * int(epochs)
    adam = _Adam() if optimizer == "adam" else None
    batch = max(1, min(int(batch), n))
    trace = []
    for epoch in range(int(epochs)):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, gw, gb = mse_loss_grad(p, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}")
            grads = gw + gb
            if clip is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > clip:
                    grads = [g * (clip / norm) for g in grads]
            steps = adam.direction(grads) if adam else grads
            nl = len(p.weights)
            p.weights = [w - lr * s for w, s in zip(p.weights, steps[:nl])]
            p.biases = [b - lr * s for b, s in zip(p.biases, steps[nl:])]
        loss = float(np.mean((mlp_forward(p, x) - y) ** 2))
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} after epoch {epoch}")
        trace.append(loss)
    return p, trace


# --------------------------------------------------------------------------
# data and dynamics
# --------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO store of ``(s, a, s')`` transitions; ``capacity=None`` is unbounded."""

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ParameterError("capacity must be positive")
        self.capacity = capacity
        self._data: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._data)

    def append(self, s, a, s_next):
        self._data.append((np.asarray(s, float), np.asarray(a, float), np.asarray(s_next, float)))

    def extend(self, states, actions):
        """Add the transitions of one trajectory (``len(states) == len(actions) + 1``)."""
        for t in range(len(actions)):
            self.append(states[t], actions[t], states[t + 1])

    def arrays(self):
        if not self._data:
            raise ParameterError("buffer is empty")
        s, a, s2 = zip(*self._data)
        return np.array(s), np.array(a), np.array(s2)


def _normalizer(x):
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), 1e-8)
    return mu, sd


class DynamicsEnsemble:
    """``B`` deterministic MLPs predicting the state change from ``(s, a)``.

    Inputs are standardized with statistics of the training data. Targets are
    standardized too so that one learning rate suits every state coordinate.
    ``fit`` / ``predict`` follow the regressor convention with
    ``X = [s, a]`` and ``y = s' - s``.
    """

    def __init__(self, state_dim, action_dim, hidden=(200, 200), n_members=5, seed=0,
                 lr=1e-3, epochs=5, batch=32, optimizer="adam", bootstrap=False):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_members = int(n_members)
        self.lr, self.epochs, self.batch = lr, int(epochs), int(batch)
        self.optimizer = optimizer
        self.bootstrap = bootstrap
        if self.n_members < 1:
            raise ParameterError("need at least one member")
        self._seed = np.random.SeedSequence(seed)
        rng = np.random.default_rng(self._seed.spawn(1)[0])
        sizes = (self.state_dim + self.action_dim, *self.hidden, self.state_dim)
        self.members = [init_mlp(sizes, rng) for _ in range(self.n_members)]
        d_in = sizes[0]
        self.in_mean, self.in_std = np.zeros(d_in), np.ones(d_in)
        self.out_mean, self.out_std = np.zeros(self.state_dim), np.ones(self.state_dim)
        self.loss_traces: list = []
        self.fitted = False

    def fit(self, X, y, rng=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        rng = np.random.default_rng(self._seed.spawn(1)[0]) if rng is None else rng
        self.in_mean, self.in_std = _normalizer(X)
        self.out_mean, self.out_std = _normalizer(y)
        xn = (X - self.in_mean) / self.in_std
        yn = (y - self.out_mean) / self.out_std
        self.loss_traces = []
        for i, p in enumerate(self.members):
            idx = rng.integers(0, len(X), len(X)) if self.bootstrap else np.arange(len(X))
            new, trace = mlp_train_mse(p, xn[idx], yn[idx], self.lr, self.epochs, self.batch,
                                       rng, self.optimizer)
            self.members[i] = new
            self.loss_traces.append(trace)
        self.fitted = True
        return self

    def fit_buffer(self, buffer: ReplayBuffer, rng=None):
        s, a, s2 = buffer.arrays()
        return self.fit(np.concatenate([s, a], axis=1), s2 - s, rng)

    def predict_member(self, i: int, X) -> np.ndarray:
        xn = (np.asarray(X, dtype=float) - self.in_mean) / self.in_std
        return mlp_forward(self.members[i], xn) * self.out_std + self.out_mean

    def predict(self, X) -> np.ndarray:
        """Ensemble-mean state change."""
        return np.mean([self.predict_member(i, X) for i in range(self.n_members)], axis=0)

    def next_state(self, s, a, members) -> np.ndarray:
        """Batched ``s + delta`` where row ``j`` uses member ``members[j]``."""
        s = np.asarray(s, dtype=float)
        X = np.concatenate([s, np.asarray(a, dtype=float)], axis=-1)
        out = np.empty_like(s)
        for i in np.unique(members):
            rows = members == i
            out[rows] = s[rows] + self.predict_member(int(i), X[rows])
        return out

    # checkpoint plumbing
    def tensors(self) -> dict:
        t = {"in_mean": self.in_mean, "in_std": self.in_std,
             "out_mean": self.out_mean, "out_std": self.out_std}
        for i, p in enumerate(self.members):
            for k, (w, b) in enumerate(zip(p.weights, p.biases)):
                t[f"m{i}.w{k}"] = w
                t[f"m{i}.b{k}"] = b
        return t

    def load_tensors(self, t: dict):
        self.in_mean, self.in_std = t["in_mean"], t["in_std"]
        self.out_mean, self.out_std = t["out_mean"], t["out_std"]
        for i, p in enumerate(self.members):
            nl = len(p.weights)
            self.members[i] = MlpParams(p.layer_sizes, [t[f"m{i}.w{k}"] for k in range(nl)],
                                        [t[f"m{i}.b{k}"] for k in range(nl)])
        self.fitted = True
        return self


class TrueDynamics:
    """Adapter that makes an environment's exact step look like a model."""

    n_members = 1

    def __init__(self, env):
        self.env = env

    def next_state(self, s, a, members=None):
        return self.env.step(s, a)


def batch_rollout(model, s0, actions, reward_fn, discount=1.0, members=None):
    """Imagined rollouts of a batch of action sequences from a shared start.

    ``actions`` has shape ``(n, H, d_a)`` and ``members`` gives the model
    member driving each rollout (default all zero). Returns
    ``(states (n, H+1, d_s), values (n,))`` with ``value = sum_i discount**i *
    reward_fn(s_i, a_i)``; any rollout that produces a non-finite state scores
    ``-inf``.
    """
    actions = np.asarray(actions, dtype=float)
    n, horizon = actions.shape[:2]
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    members = np.zeros(n, dtype=int) if members is None else np.asarray(members, dtype=int)
    s = np.broadcast_to(np.asarray(s0, dtype=float), (n, np.size(s0))).copy()
    states = np.empty((n, horizon + 1, s.shape[1]))
    states[:, 0] = s
    values = np.zeros(n)
    ok = np.ones(n, dtype=bool)
    with np.errstate(all="ignore"):
        for i in range(horizon):
            a = actions[:, i]
            r = np.asarray(reward_fn(s, a), dtype=float)
            values += discount**i * np.where(ok, r, 0.0)
            s = model.next_state(s, a, members)
            ok &= np.all(np.isfinite(s), axis=1)
            states[:, i + 1] = s
    values[~ok | ~np.isfinite(values)] = -np.inf
    return states, values


def model_rollout(model, s0, actions, reward_fn, discount=1.0, rng=None):
    """Single imagined rollout; the model member is drawn uniformly from ``rng``."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    rng = np.random.default_rng(0) if rng is None else rng
    member = np.array([rng.integers(model.n_members)])
    states, values = batch_rollout(model, s0, actions[None], reward_fn, discount, member)
    return states[0], float(values[0])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = "decentcem-checkpoint"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Text checkpoint: a versioned header, ``key=value`` metadata, then per
    tensor a ``tensor <name> <shape>`` line followed by its values as
    ``float.hex`` tokens (exact round trip)."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n")
        for k, v in (meta or {}).items():
            fh.write(f"meta {k}={v}\n")
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=float)
            shape = ",".join(str(d) for d in arr.shape) or "scalar"
            fh.write(f"tensor {name} {shape}\n")
            fh.write(" ".join(float(v).hex() for v in arr.ravel()) + "\n")


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ParameterError(f"{path}: not a checkpoint")
    if head[1] != f"v{CHECKPOINT_VERSION}":
        raise ParameterError(f"{path}: unsupported checkpoint version {head[1]}")
    tensors, meta = {}, {}
    i = 1
    while i < len(lines) and lines[i]:
        kind, rest = lines[i].split(" ", 1)
        if kind == "meta":
            k, v = rest.split("=", 1)
            meta[k] = v
            i += 1
        elif kind == "tensor":
            name, shape = rest.split(" ")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split(","))
            body = lines[i + 1].split()
            tensors[name] = np.array([float.fromhex(v) for v in body]).reshape(dims)
            i += 2
        else:
            raise ParameterError(f"{path}: bad line {i + 1}")
    return tensors, meta


def save_ensemble(path, model: DynamicsEnsemble) -> None:
    meta = {"kind": "dynamics_ensemble", "state_dim": model.state_dim,
            "action_dim": model.action_dim, "hidden": ",".join(map(str, model.hidden)),
            "members": model.n_members}
    save_tensors(path, model.tensors(), meta)


def load_ensemble(path) -> DynamicsEnsemble:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "dynamics_ensemble":
        raise ParameterError(f"{path}: not a dynamics ensemble checkpoint")
    hidden = tuple(int(h) for h in meta["hidden"].split(",") if h)
    model = DynamicsEnsemble(int(meta["state_dim"]), int(meta["action_dim"]), hidden,
                             int(meta["members"]))
    return model.load_tensors(tensors)
