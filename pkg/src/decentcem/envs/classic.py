"""Pendulum, cartpole and acrobot as pure, vectorized (state, action) maps.

Every ``*_step`` and ``reward_*`` accepts a single state or a leading batch of
them: ``s`` has shape ``(..., state_dim)`` and ``a`` shape ``(..., action_dim)``.
Rewards are to be maximized; the pendulum's quadratic penalty is negated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# ---------------------------------------------------------------- pendulum

PENDULUM_G = 10.0
PENDULUM_M = 1.0
PENDULUM_L = 1.0
PENDULUM_DT = 0.05
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0


def angle_normalize(x):
    """Wrap angles to ``[-pi, pi)``."""
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def pendulum_angle(s):
    s = np.asarray(s, dtype=float)
    return np.arctan2(s[..., 1], s[..., 0])


def pendulum_state(theta, thetadot):
    """Encode ``(theta, thetadot)`` as ``(cos, sin, thetadot)``."""
    theta, thetadot = np.broadcast_arrays(np.asarray(theta, float), np.asarray(thetadot, float))
    return np.stack([np.cos(theta), np.sin(theta), thetadot], axis=-1)


def pendulum_dynamics(theta, thetadot, torque):
    """One semi-implicit Euler step on raw angles; returns ``(theta', thetadot')``."""
    u = np.clip(torque, -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    g, m, l, dt = PENDULUM_G, PENDULUM_M, PENDULUM_L, PENDULUM_DT
    acc = 3 * g / (2 * l) * np.sin(theta) + 3.0 / (m * l**2) * u
    new_thdot = np.clip(thetadot + acc * dt, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    return theta + new_thdot * dt, new_thdot


def pendulum_step(s, a):
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    th, thdot = pendulum_dynamics(pendulum_angle(s), s[..., 2], a[..., 0])
    return pendulum_state(th, thdot)


def pendulum_cost(theta, thetadot, torque):
    th = angle_normalize(theta)
    return th**2 + 0.1 * thetadot**2 + 0.001 * torque**2


def reward_pendulum(s, a):
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    u = np.clip(a[..., 0], -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    return -pendulum_cost(pendulum_angle(s), s[..., 2], u)


def pendulum_reset(seed):
    rng = np.random.default_rng(seed)
    th = rng.uniform(-np.pi, np.pi)
    thdot = rng.uniform(-1.0, 1.0)
    return pendulum_state(th, thdot)


def pendulum_energy(theta, thetadot):
    """Mechanical energy of the uniform rod (upright has the highest potential)."""
    m, l, g = PENDULUM_M, PENDULUM_L, PENDULUM_G
    return 0.5 * (m * l**2 / 3.0) * thetadot**2 + m * g * (l / 2) * np.cos(theta)


PENDULUM_HANGING = pendulum_state(np.pi, 0.0)

# ---------------------------------------------------------------- cartpole
# continuous-force cart-pole; state (x, xdot, theta, thetadot), theta=0 upright

CART_G = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
CART_FORCE_MAG = 10.0
CART_DT = 0.02


def cartpole_step(s, a):
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    x, xdot, th, thdot = (s[..., i] for i in range(4))
    force = CART_FORCE_MAG * np.clip(a[..., 0], -1.0, 1.0)
    total = CART_MASS + POLE_MASS
    pml = POLE_MASS * POLE_HALF_LENGTH
    cos, sin = np.cos(th), np.sin(th)
    temp = (force + pml * thdot**2 * sin) / total
    th_acc = (CART_G * sin - cos * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos**2 / total)
    )
    x_acc = temp - pml * th_acc * cos / total
    return np.stack(
        [
            x + CART_DT * xdot,
            xdot + CART_DT * x_acc,
            th + CART_DT * thdot,
            thdot + CART_DT * th_acc,
        ],
        axis=-1,
    )


def reward_cartpole(s, a):
    s = np.asarray(s, dtype=float)
    return np.cos(s[..., 2]) - 0.01 * s[..., 0] ** 2


def cartpole_reset(seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.05, 0.05, size=4)


# ---------------------------------------------------------------- acrobot
# state (theta1, theta2, theta1dot, theta2dot); theta1 = theta2 = 0 hangs down

ACRO_LINK_LENGTH = 1.0
ACRO_LINK_MASS = 1.0
ACRO_COM = 0.5
ACRO_MOI = 1.0
ACRO_G = 9.8
ACRO_DT = 0.2
ACRO_MAX_VEL_1 = 4 * np.pi
ACRO_MAX_VEL_2 = 9 * np.pi


def _acrobot_deriv(y, torque):
    m1 = m2 = ACRO_LINK_MASS
    l1 = ACRO_LINK_LENGTH
    lc1 = lc2 = ACRO_COM
    i1 = i2 = ACRO_MOI
    g = ACRO_G
    th1, th2, dth1, dth2 = (y[..., i] for i in range(4))
    d1 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * np.cos(th2)) + i1 + i2
    d2 = m2 * (lc2**2 + l1 * lc2 * np.cos(th2)) + i2
    phi2 = m2 * lc2 * g * np.cos(th1 + th2 - np.pi / 2.0)
    phi1 = (
        -m2 * l1 * lc2 * dth2**2 * np.sin(th2)
        - 2 * m2 * l1 * lc2 * dth2 * dth1 * np.sin(th2)
        + (m1 * lc1 + m2 * l1) * g * np.cos(th1 - np.pi / 2)
        + phi2
    )
    ddth2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dth1**2 * np.sin(th2) - phi2) / (
        m2 * lc2**2 + i2 - d2**2 / d1
    )
    ddth1 = -(d2 * ddth2 + phi1) / d1
    return np.stack([dth1, dth2, ddth1, ddth2], axis=-1)


def acrobot_step(s, a):
    """Classic RK4 step of length 0.2 with a continuous torque in ``[-1, 1]``."""
    s = np.asarray(s, dtype=float)
    torque = np.clip(np.asarray(a, dtype=float)[..., 0], -1.0, 1.0)
    h = ACRO_DT
    k1 = _acrobot_deriv(s, torque)
    k2 = _acrobot_deriv(s + h / 2 * k1, torque)
    k3 = _acrobot_deriv(s + h / 2 * k2, torque)
    k4 = _acrobot_deriv(s + h * k3, torque)
    y = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.stack(
        [
            angle_normalize(y[..., 0]),
            angle_normalize(y[..., 1]),
            np.clip(y[..., 2], -ACRO_MAX_VEL_1, ACRO_MAX_VEL_1),
            np.clip(y[..., 3], -ACRO_MAX_VEL_2, ACRO_MAX_VEL_2),
        ],
        axis=-1,
    )


def reward_acrobot(s, a):
    s = np.asarray(s, dtype=float)
    return -np.cos(s[..., 0]) - np.cos(s[..., 0] + s[..., 1])


def acrobot_reset(seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.1, 0.1, size=4)


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    episode_length: int
    reward: Callable
    step: Callable
    reset: Callable

    @property
    def action_mid(self) -> np.ndarray:
        return (self.action_low + self.action_high) / 2

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)


PENDULUM = EnvSpec(
    "pendulum", 3, 1, np.array([-2.0]), np.array([2.0]), 200,
    reward_pendulum, pendulum_step, pendulum_reset,
)
CARTPOLE = EnvSpec(
    "cartpole", 4, 1, np.array([-1.0]), np.array([1.0]), 200,
    reward_cartpole, cartpole_step, cartpole_reset,
)
ACROBOT = EnvSpec(
    "acrobot", 4, 1, np.array([-1.0]), np.array([1.0]), 200,
    reward_acrobot, acrobot_step, acrobot_reset,
)
ENVS = {e.name: e for e in (PENDULUM, CARTPOLE, ACROBOT)}


def make_env(name: str) -> EnvSpec:
    try:
        return ENVS[name]
    except KeyError:
        raise KeyError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def run_episode(env: EnvSpec, policy, s0, steps: int | None = None):
    """Roll ``policy(s, t) -> a`` from ``s0``; returns ``(states, actions, rewards)``.

    ``states`` has one more row than ``actions``.
    """
    steps = env.episode_length if steps is None else int(steps)
    states = [np.asarray(s0, dtype=float)]
    actions, rewards = [], []
    for t in range(steps):
        s = states[-1]
        a = env.clip_action(np.asarray(policy(s, t), dtype=float).reshape(env.action_dim))
        rewards.append(float(env.reward(s, a)))
        actions.append(a)
        states.append(env.step(s, a))
    return np.array(states), np.array(actions), np.array(rewards)
