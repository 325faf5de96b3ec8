"""Static SVG figures. Rendering is headless and byte-for-byte repeatable."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.ndimage import uniform_filter1d  # noqa: E402

plt.rcParams["svg.hashsalt"] = "decentcem"
plt.rcParams["svg.fonttype"] = "none"

SMOOTH_WINDOW = 10


def save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def smooth(y, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centred moving average; plot-time only."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        return y
    return uniform_filter1d(y, size=min(window, y.size), mode="nearest")


def cost_bands(summary: list[dict], path, optimum: float | None = None) -> None:
    """Mean final cost with a min/max band per method against population."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({r["method"] for r in summary}):
        rows = sorted((r for r in summary if r["method"] == method), key=lambda r: r["pop"])
        pops = [r["pop"] for r in rows]
        ax.plot(pops, [r["mean_cost"] for r in rows], marker="o", label=method)
        ax.fill_between(pops, [r["min_cost"] for r in rows], [r["max_cost"] for r in rows],
                        alpha=0.2)
    if optimum is not None:
        ax.axhline(optimum, color="k", lw=0.8, ls="--", label="grid optimum")
    ax.set_xscale("log")
    ax.set_xlabel("population size")
    ax.set_ylabel("final cost")
    ax.legend()
    save(fig, path)


def objective_with_solutions(obj, solutions: dict, path) -> None:
    """The 1D cost curve with each method's final solutions marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    grid = np.linspace(obj.lower, obj.upper, 2000)
    ax.plot(grid, obj.cost(grid), color="0.3", lw=1)
    for k, (label, xs) in enumerate(sorted(solutions.items())):
        xs = np.asarray(xs, dtype=float)
        ax.scatter(xs, obj.cost(xs) + 0.05 * k, s=14, label=label)
    ax.set_xlabel("x")
    ax.set_ylabel("cost")
    ax.legend()
    save(fig, path)


def runtime_bars(rows: list[dict], path) -> None:
    """Total wall time of a cell's runs per method and population."""
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({r["method"] for r in rows})
    pops = sorted({r["pop"] for r in rows})
    width = 0.8 / max(1, len(methods))
    for k, m in enumerate(methods):
        by_pop = {r["pop"]: r["total_ms"] for r in rows if r["method"] == m}
        ax.bar(np.arange(len(pops)) + k * width, [by_pop.get(p, np.nan) / 1e3 for p in pops],
               width, label=m)
    ax.set_xticks(np.arange(len(pops)) + width * (len(methods) - 1) / 2, [str(p) for p in pops])
    ax.set_yscale("log")
    ax.set_xlabel("population size")
    ax.set_ylabel("total time [s]")
    ax.legend()
    save(fig, path)


def learning_curves(curves: dict, path, ylabel="evaluation return") -> None:
    """``curves`` maps a label to rows with episode/step/eval_return_mean/seed.

    Each label is drawn as the mean over seeds with a standard-error band,
    smoothed at plot time.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in sorted(curves.items()):
        seeds = sorted({r["seed"] for r in rows})
        episodes = sorted({r["episode"] for r in rows})
        table = np.full((len(seeds), len(episodes)), np.nan)
        for r in rows:
            table[seeds.index(r["seed"]), episodes.index(r["episode"])] = r["eval_return_mean"]
        counts = np.sum(np.isfinite(table), axis=0)
        mean = np.nanmean(table, axis=0)
        se = np.zeros(len(episodes))
        many = counts > 1
        if np.any(many):
            se[many] = np.nanstd(table[:, many], axis=0, ddof=1) / np.sqrt(counts[many])
        steps = [min(r["step"] for r in rows if r["episode"] == e) for e in episodes]
        m, s = smooth(mean), smooth(se)
        ax.plot(steps, m, label=label)
        ax.fill_between(steps, m - s, m + s, alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(ylabel)
    ax.legend()
    save(fig, path)


def value_heatmap(table, path) -> None:
    g = table.grid
    fig, ax = plt.subplots(figsize=(6, 4.5))
    im = ax.imshow(table.values.T, origin="lower", aspect="auto", cmap="jet",
                   extent=(g.thetas[0], np.pi, g.thetadots[0], g.thetadots[-1]))
    fig.colorbar(im, ax=ax, label="value")
    ax.set_xlabel("angle [rad]")
    ax.set_ylabel("angular velocity [rad/s]")
    save(fig, path)


def selection_ratios(ratios, path) -> None:
    """Cumulative selection ratio of every instance over planning steps."""
    r = np.asarray(ratios, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i in range(r.shape[1]):
        ax.plot(np.arange(1, r.shape[0] + 1), r[:, i], label=f"instance {i}")
    ax.set_xlabel("planning step")
    ax.set_ylabel("cumulative selection ratio")
    ax.legend()
    save(fig, path)
