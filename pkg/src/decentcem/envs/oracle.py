"""Dynamic-programming ground truth for the pendulum on a discretized grid.

The grid puts ``theta_bins`` angle centres at ``-pi + i * 2pi / n`` (so both
hanging and upright are grid points), ``thetadot_bins`` velocity centres
evenly over ``[-8, 8]`` and ``action_bins`` torques evenly over ``[-2, 2]``.
A transition runs the exact dynamics from a cell centre and snaps the result
to the nearest cell (angles wrap). Sweeps are Jacobi style, so the result does
not depend on cell order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from ..exceptions import ConvergenceError, ParameterError
from .classic import (
    PENDULUM_MAX_SPEED,
    PENDULUM_MAX_TORQUE,
    pendulum_angle,
    pendulum_cost,
    pendulum_dynamics,
    angle_normalize,
)


@dataclass
class PendulumGrid:
    theta_bins: int = 100
    thetadot_bins: int = 100
    action_bins: int = 50

    def __post_init__(self):
        for name in ("theta_bins", "thetadot_bins", "action_bins"):
            if int(getattr(self, name)) < 2:
                raise ParameterError(f"{name} must be >= 2")

    @property
    def thetas(self) -> np.ndarray:
        return -np.pi + np.arange(self.theta_bins) * (2 * np.pi / self.theta_bins)

    @property
    def thetadots(self) -> np.ndarray:
        return np.linspace(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED, self.thetadot_bins)

    @property
    def actions(self) -> np.ndarray:
        return np.linspace(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE, self.action_bins)

    def theta_index(self, theta):
        step = 2 * np.pi / self.theta_bins
        i = np.rint((angle_normalize(theta) + np.pi) / step).astype(int)
        return i % self.theta_bins

    def thetadot_index(self, thetadot):
        step = 2 * PENDULUM_MAX_SPEED / (self.thetadot_bins - 1)
        j = np.rint((np.asarray(thetadot) + PENDULUM_MAX_SPEED) / step).astype(int)
        return np.clip(j, 0, self.thetadot_bins - 1)


@dataclass
class ValueTable:
    theta_bins: int
    thetadot_bins: int
    action_bins: int
    values: np.ndarray
    discount: float
    residual: float = float("nan")
    iterations: int = 0
    residual_trace: list = field(default_factory=list, repr=False)
    _interp: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.theta_bins, self.thetadot_bins):
            raise ParameterError(
                f"values shape {self.values.shape} does not match bins "
                f"({self.theta_bins}, {self.thetadot_bins})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("values must be finite")

    @property
    def grid(self) -> PendulumGrid:
        return PendulumGrid(self.theta_bins, self.thetadot_bins, self.action_bins)

    def lookup(self, theta, thetadot):
        """Value of the nearest cell."""
        g = self.grid
        return self.values[g.theta_index(theta), g.thetadot_index(thetadot)]

    def interpolate(self, theta, thetadot):
        """Bilinear value estimate, periodic in the angle."""
        if self._interp is None:
            g = self.grid
            thetas = np.append(g.thetas, np.pi)
            values = np.vstack([self.values, self.values[:1]])
            self._interp = RegularGridInterpolator((thetas, g.thetadots), values)
        th = angle_normalize(theta)
        thd = np.clip(thetadot, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
        th, thd = np.broadcast_arrays(th, thd)
        return self._interp(np.stack([th, thd], axis=-1))

    def q_values(self, theta: float, thetadot: float) -> np.ndarray:
        """One-step lookahead from a continuous state for every grid action.

        The successor is valued by interpolation: from slow states every
        action lands in the same cell, so a nearest-cell lookup cannot rank
        them.
        """
        acts = self.grid.actions
        th2, thd2 = pendulum_dynamics(theta, thetadot, acts)
        return -pendulum_cost(theta, thetadot, acts) + self.discount * self.interpolate(th2, thd2)

    def greedy_action(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        q = self.q_values(float(pendulum_angle(s)), float(s[2]))
        return np.array([self.grid.actions[int(np.argmax(q))]])

    def policy(self, s, t=None):
        return self.greedy_action(s)

    def bellman_residual(self) -> float:
        backup = _backup(_transition_tables(self.grid), self.values, self.discount)
        return float(np.max(np.abs(backup - self.values)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta_bins", "thetadot_bins", "action_bins", "discount"])
            w.writerow([self.theta_bins, self.thetadot_bins, self.action_bins, repr(self.discount)])
            w.writerow(["theta_index", "thetadot_index", "value"])
            for i in range(self.theta_bins):
                for j in range(self.thetadot_bins):
                    w.writerow([i, j, repr(float(self.values[i, j]))])

    @classmethod
    def from_csv(cls, path) -> "ValueTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != ["theta_bins", "thetadot_bins", "action_bins", "discount"]:
            raise ParameterError(f"{path}: not a value table")
        nt, nd, na = (int(v) for v in rows[1][:3])
        values = np.full((nt, nd), np.nan)
        for i, j, v in rows[3:]:
            values[int(i), int(j)] = float(v)
        return cls(nt, nd, na, values, float(rows[1][3]))


def _transition_tables(grid: PendulumGrid):
    th = grid.thetas[:, None, None]
    thd = grid.thetadots[None, :, None]
    acts = grid.actions[None, None, :]
    reward = -pendulum_cost(th, thd, acts)
    th2, thd2 = pendulum_dynamics(th, thd, acts)
    nxt = grid.theta_index(th2) * grid.thetadot_bins + grid.thetadot_index(thd2)
    return np.broadcast_to(reward, nxt.shape).copy(), nxt


def _backup(tables, values, discount):
    reward, nxt = tables
    return (reward + discount * values.reshape(-1)[nxt]).max(axis=-1)


def value_iteration_pendulum(
    theta_bins: int = 100,
    thetadot_bins: int = 100,
    action_bins: int = 50,
    discount: float = 0.95,
    tol: float = 1e-6,
    max_iters: int = 20000,
) -> ValueTable:
    """Solve the discretized pendulum MDP by value iteration.

    Stops once the max-norm change between sweeps drops below ``tol``; raises
    :class:`ConvergenceError` carrying the last residual after ``max_iters``.
    ``discount = 0`` is accepted and yields the best one-step reward per cell.
    """
    if not 0 <= discount < 1:
        raise ParameterError("discount must lie in [0, 1)")
    grid = PendulumGrid(theta_bins, thetadot_bins, action_bins)
    tables = _transition_tables(grid)
    values = np.zeros((theta_bins, thetadot_bins))
    trace = []
    for it in range(1, int(max_iters) + 1):
        new = _backup(tables, values, discount)
        residual = float(np.max(np.abs(new - values)))
        trace.append(residual)
        values = new
        if residual < tol:
            return ValueTable(theta_bins, thetadot_bins, action_bins, values, discount,
                              residual, it, trace)
    raise ConvergenceError(
        f"value iteration did not reach tol={tol} in {max_iters} sweeps", residual, max_iters
    )


def greedy_return(table: ValueTable, s0, steps: int = 200):
    """Undiscounted return and angle trace of the greedy policy from ``s0``."""
    from .classic import PENDULUM, run_episode

    states, actions, rewards = run_episode(PENDULUM, table.policy, s0, steps)
    return float(rewards.sum()), pendulum_angle(states)
