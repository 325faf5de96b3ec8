"""Classic-control environments and the pendulum value-iteration oracle."""

from .classic import (
    ACROBOT,
    CARTPOLE,
    ENVS,
    PENDULUM,
    PENDULUM_HANGING,
    EnvSpec,
    acrobot_step,
    angle_normalize,
    cartpole_step,
    make_env,
    pendulum_angle,
    pendulum_reset,
    pendulum_state,
    pendulum_step,
    reward_acrobot,
    reward_cartpole,
    reward_pendulum,
    run_episode,
)
from .oracle import PendulumGrid, ValueTable, greedy_return, value_iteration_pendulum

__all__ = [
    "ACROBOT",
    "CARTPOLE",
    "ENVS",
    "PENDULUM",
    "PENDULUM_HANGING",
    "EnvSpec",
    "PendulumGrid",
    "ValueTable",
    "acrobot_step",
    "angle_normalize",
    "cartpole_step",
    "greedy_return",
    "make_env",
    "pendulum_angle",
    "pendulum_reset",
    "pendulum_state",
    "pendulum_step",
    "reward_acrobot",
    "reward_cartpole",
    "reward_pendulum",
    "run_episode",
    "value_iteration_pendulum",
]
