"""Command-line experiment runner.

    decentcem <opt1d|sweep|plan|oracle|ablate|plot> [--config FILE] [--seed 1,2] [--out DIR] [--jobs N]

Every command writes its CSVs and SVG figures into the output directory plus
``manifest.json``: the config snapshot, per-instance sample shares, a sha256
digest of every emitted file, wall-clock timings and a ``complete`` flag.
Files marked ``deterministic`` in the manifest are byte-identical on reruns
of the same config; timing tables are not.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import plots
from .config import METHODS_1D, RunConfig, load_config
from .envs import PENDULUM_HANGING, ValueTable, make_env, value_iteration_pendulum
from .envs.classic import pendulum_angle
from .exceptions import ConfigError, DecentCEMError
from .objectives import (
    BEST_DECENT,
    BEST_GMM,
    MOTIVATIONAL,
    SweepSpec,
    best_config,
    format_params,
    grid_oracle,
    make_optimizer,
    run_cell,
    run_sweep,
    summarize_sweep,
)
from .planner import MODES, big_network_hidden, run_training

CURVE_HEADER = ["episode", "step", "eval_return_mean", "eval_return_stderr", "mode", "seed"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


class Artifacts:
    """Output directory bookkeeping: every written file is digested."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[dict] = []

    def _add(self, name, deterministic):
        data = (self.dir / name).read_bytes()
        self.files = [f for f in self.files if f["name"] != name]
        self.files.append(dict(name=name, sha256=hashlib.sha256(data).hexdigest(),
                               bytes=len(data), deterministic=deterministic))

    def csv(self, name, header, rows, deterministic=True):
        with open(self.dir / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(row[h]) if isinstance(row, dict) else _fmt(v)
                            for h, v in zip(header, row if not isinstance(row, dict) else header)])
        self._add(name, deterministic)

    def figure(self, name, draw, *args, deterministic=True, **kwargs):
        draw(*args, path=self.dir / name, **kwargs)
        self._add(name, deterministic)

    def file(self, name, deterministic=True):
        self._add(name, deterministic)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            for kind in (int, float):
                try:
                    r[k] = kind(v)
                    break
                except (TypeError, ValueError):
                    pass
    return rows


# --------------------------------------------------------------------------
# 1D task
# --------------------------------------------------------------------------


def _shared_cem(cfg: RunConfig) -> dict:
    c = cfg.cem
    return dict(elite_ratio=c.elite_ratio, alpha=c.alpha, min_variance=c.min_variance,
                max_iters=c.max_iters, stall_iters=c.stall_iters, stall_tol=c.stall_tol)


def _best_params(method, pop):
    table = BEST_GMM if method == "cem_gmm" else BEST_DECENT
    if method == "cem" or pop in table:
        return best_config(method, pop)
    # nearest tabulated population for sizes outside the table
    near = min(table, key=lambda p: (abs(p - pop), p))
    params = best_config(method, near)
    if method == "decent_cem":
        params["n_instances"] = min(params["n_instances"], pop)
    return params


def _cell_rows(cfg, method, pop, params, runs, seed_base, extra=None):
    rows = run_cell(method, pop, params, runs, seed_base, MOTIVATIONAL, _shared_cem(cfg))
    for r in rows:
        r["seed"] = seed_base + r["run"]
        r.update(extra or {})
    return rows


def _summaries(rows):
    summary = summarize_sweep(rows)
    totals = {}
    for r in rows:
        key = (r["method"], r["pop"], r["params"])
        totals[key] = totals.get(key, 0.0) + (0.0 if np.isnan(r["wall_ms"]) else r["wall_ms"])
    runtime = [dict(method=s["method"], pop=s["pop"], params=s["params"],
                    total_ms=totals[(s["method"], s["pop"], s["params"])]) for s in summary]
    return summary, runtime


RUN_HEADER = ["method", "pop", "params", "run", "seed", "solution", "final_cost"]
TIME_HEADER = ["method", "pop", "params", "run", "wall_ms"]
SUMMARY_HEADER = ["method", "pop", "params", "mean_cost", "min_cost", "max_cost"]
RUNTIME_HEADER = ["method", "pop", "params", "total_ms"]


def cmd_opt1d(cfg: RunConfig, art: Artifacts) -> dict:
    sec = cfg.opt1d
    rows = []
    for method in sec.methods:
        for pop in sec.population_sizes:
            rows += _cell_rows(cfg, method, pop, _best_params(method, pop), sec.runs, sec.seed_base)
    rows.sort(key=lambda r: (r["method"], r["pop"], r["params"], r["run"]))
    summary, runtime = _summaries(rows)
    x_star, f_star = grid_oracle(MOTIVATIONAL)
    art.csv("opt1d.csv", RUN_HEADER, rows)
    art.csv("opt1d_runtime.csv", TIME_HEADER, rows, deterministic=False)
    art.csv("opt1d_summary.csv", SUMMARY_HEADER, summary)
    art.csv("opt1d_runtime_summary.csv", RUNTIME_HEADER, runtime, deterministic=False)
    art.figure("opt1d_costs.svg", plots.cost_bands, summary, optimum=f_star)
    art.figure("opt1d_runtime.svg", plots.runtime_bars, runtime, deterministic=False)
    largest = max(sec.population_sizes)
    solutions = {m: [r["solution"] for r in rows if r["method"] == m and r["pop"] == largest]
                 for m in sec.methods}
    art.figure("opt1d_solutions.svg", plots.objective_with_solutions, MOTIVATIONAL, solutions)
    return dict(grid_optimum=dict(x=x_star, cost=f_star), failed_runs=_failed(rows))


def _failed(rows):
    return sum(1 for r in rows if np.isnan(r["final_cost"]))


def cmd_sweep(cfg: RunConfig, art: Artifacts) -> dict:
    sec = cfg.sweep
    grids = {
        "cem": {},
        "cem_gmm": {"n_components": list(sec.n_components), "kappa": list(sec.kappa),
                    "output_mode": list(sec.output_modes)},
        "decent_cem": {"n_instances": list(sec.n_instances)},
    }
    spec = SweepSpec(list(sec.population_sizes), {m: grids[m] for m in sec.methods}, sec.runs,
                     sec.seed_base, _shared_cem(cfg))
    rows = run_sweep(spec, MOTIVATIONAL, cfg.run.jobs)
    for r in rows:
        r["seed"] = spec.seed_base + r["run"]
    summary, runtime = _summaries(rows)
    art.csv("sweep.csv", RUN_HEADER, rows)
    art.csv("sweep_runtime.csv", TIME_HEADER, rows, deterministic=False)
    art.csv("sweep_summary.csv", SUMMARY_HEADER, summary)
    art.csv("runtime_summary.csv", RUNTIME_HEADER, runtime, deterministic=False)
    art.figure("sweep_costs.svg", plots.cost_bands, summary, optimum=grid_oracle(MOTIVATIONAL)[1])
    art.figure("runtime.svg", plots.runtime_bars, runtime, deterministic=False)
    return dict(cells=len(list(spec.cells())), rows=len(rows), failed_runs=_failed(rows))


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------


def _train_one(env_name, pcfg, episodes, seed, steps, eval_start, eval_mode):
    env = make_env(env_name)
    start = PENDULUM_HANGING if eval_start == "hanging" else None
    return run_training(env, pcfg, episodes, seed, steps or None, start, eval_mode=eval_mode)


def _train_seeds(cfg: RunConfig, pcfg, eval_mode=None):
    r = cfg.run
    args = [(r.env, pcfg, r.episodes, s, r.steps, r.eval_start, eval_mode) for s in cfg.seeds]
    if r.jobs > 1 and len(args) > 1:
        from joblib import Parallel, delayed

        runs = Parallel(n_jobs=r.jobs)(delayed(_train_one)(*a) for a in args)
    else:
        runs = [_train_one(*a) for a in args]
    return dict(zip(cfg.seeds, runs))


def _diagnostic_rows(diag):
    return [[step, inst, sel, *np.asarray(a).ravel()] for step, inst, sel, a in diag.rows]


def _write_run(art, prefix, runs: dict):
    curve = sorted((row for run in runs.values() for row in run.curve),
                   key=lambda r: (r["seed"], r["episode"]))
    art.csv(f"{prefix}learning_curve.csv", CURVE_HEADER, curve)
    for seed, run in runs.items():
        d = run.diagnostics
        if not d.rows:
            continue
        da = len(np.asarray(d.rows[0][3]).ravel())
        art.csv(f"{prefix}diagnostics_seed{seed}.csv",
                ["step", "instance", "selected"] + [f"action_{k}" for k in range(da)],
                _diagnostic_rows(d))
        m = d.num_instances
        art.csv(f"{prefix}selection_seed{seed}.csv",
                ["step"] + [f"ratio_{i}" for i in range(m)],
                [[t + 1, *ratios] for t, ratios in enumerate(d.ratios)])
        pairs = [f"d_{i}_{j}" for i in range(m) for j in range(i + 1, m)]
        if pairs:
            art.csv(f"{prefix}distances_seed{seed}.csv", ["step"] + pairs,
                    [[t + 1, *ds] for t, ds in enumerate(d.distances)])
    return curve


def _run_summary(pcfg, runs: dict) -> dict:
    return dict(
        mode=pcfg.mode,
        num_instances=pcfg.num_instances,
        total_population=pcfg.total_population,
        shares=pcfg.shares,
        planning_samples={str(s): int(sum(r.planning_samples)) for s, r in runs.items()},
        planning_samples_per_episode={str(s): list(map(int, r.planning_samples))
                                      for s, r in runs.items()},
        timings={str(s): {k: round(v, 3) for k, v in r.timings.items()} for s, r in runs.items()},
        complete={str(s): r.complete for s, r in runs.items()},
        errors={str(s): r.error for s, r in runs.items() if r.error},
    )


def cmd_plan(cfg: RunConfig, art: Artifacts) -> dict:
    pcfg = cfg.planner
    if cfg.run.method not in MODES:
        raise ConfigError(f"plan needs a planner method {MODES}, got {cfg.run.method!r}")
    runs = _train_seeds(cfg, pcfg)
    curve = _write_run(art, "", runs)
    art.figure("learning_curve.svg", plots.learning_curves, {pcfg.mode: curve})
    first = next(iter(runs.values()))
    if first.diagnostics.ratios:
        art.figure(f"selection_seed{cfg.seeds[0]}.svg", plots.selection_ratios,
                   first.diagnostics.ratios)
    out = _run_summary(pcfg, runs)
    out["partial"] = not all(r.complete for r in runs.values())
    return out


def _ablation_arms(cfg: RunConfig):
    """``(label, planner config, eval mode)`` per arm."""
    a, base = cfg.ablate, cfg.planner
    env = make_env(cfg.run.env)
    if a.axis == "ensemble_size":
        sizes = a.values or (1, 2, 3, 5)
        return [(f"E{m}", replace(base, num_instances=int(m)), None) for m in sizes]
    if a.axis == "big_network":
        if base.mode not in ("decent_cem_a", "decent_cem_p"):
            raise ConfigError("big_network ablation needs method decent_cem_a or decent_cem_p")
        m = base.num_instances
        if base.mode == "decent_cem_a":
            hidden = dict(policy_hidden_a=big_network_hidden(m, env.state_dim, env.action_dim,
                                                             base.policy_hidden_a))
        else:
            hidden = dict(policy_hidden_p=big_network_hidden(m, env.state_dim, env.action_dim,
                                                             base.policy_hidden_p))
        return [(f"ensemble{m}", base, None),
                ("big_network", replace(base, num_instances=1, **hidden), None)]
    if a.axis == "policy_control":
        if base.mode not in ("decent_cem_a", "decent_cem_p"):
            raise ConfigError("policy_control ablation needs method decent_cem_a or decent_cem_p")
        return [(base.mode, base, None), (f"{base.mode}-PC", base, "policy_control")]
    raise ConfigError(f"unsupported planner ablation axis {a.axis!r}")


def _ablate_init_scheme(cfg: RunConfig, art: Artifacts) -> dict:
    schemes = cfg.ablate.values or ("uniform_spread", "random_uniform", "shared")
    sec = cfg.opt1d
    rows = []
    for scheme in schemes:
        for pop in sec.population_sizes:
            params = dict(_best_params("decent_cem", pop), init_scheme=scheme)
            rows += _cell_rows(cfg, "decent_cem", pop, params, sec.runs, sec.seed_base,
                               dict(arm=scheme))
    rows.sort(key=lambda r: (r["arm"], r["pop"], r["run"]))
    art.csv("ablation.csv", ["arm"] + RUN_HEADER, rows)
    summary = [dict(s, method=s["params"].split("init_scheme=")[1].split(";")[0])
               for s in summarize_sweep(rows)]
    art.csv("ablation_summary.csv", SUMMARY_HEADER, summary)
    art.figure("ablation.svg", plots.cost_bands, summary, optimum=grid_oracle(MOTIVATIONAL)[1])
    return dict(axis="init_scheme", arms={s: dict(total_population=list(sec.population_sizes))
                                          for s in schemes})


def cmd_ablate(cfg: RunConfig, art: Artifacts) -> dict:
    if cfg.ablate.axis == "init_scheme":
        return _ablate_init_scheme(cfg, art)
    if cfg.run.method not in MODES:
        raise ConfigError(f"ablate needs a planner method {MODES}, got {cfg.run.method!r}")
    arms, curves, rows = {}, {}, []
    for label, pcfg, eval_mode in _ablation_arms(cfg):
        runs = _train_seeds(cfg, pcfg, eval_mode)
        curve = sorted((row for run in runs.values() for row in run.curve),
                       key=lambda r: (r["seed"], r["episode"]))
        curves[label] = curve
        rows += [dict(r, arm=label) for r in curve]
        arms[label] = _run_summary(pcfg, runs)
    art.csv("ablation.csv", ["arm"] + CURVE_HEADER, rows)
    art.csv("ablation_arms.csv", ["arm", "mode", "num_instances", "total_population", "seed",
                                  "planning_samples"],
            [[label, a["mode"], a["num_instances"], a["total_population"], s, n]
             for label, a in arms.items() for s, n in a["planning_samples"].items()])
    for label, curve in curves.items():
        art.csv(f"ablation_{label}.csv", CURVE_HEADER, curve)
    art.figure("ablation.svg", plots.learning_curves, curves)
    partial = not all(all(a["complete"].values()) for a in arms.values())
    return dict(axis=cfg.ablate.axis, arms=arms, partial=partial)


# --------------------------------------------------------------------------
# oracle and plots
# --------------------------------------------------------------------------


def cmd_oracle(cfg: RunConfig, art: Artifacts) -> dict:
    o = cfg.oracle
    if cfg.run.env != "pendulum":
        raise ConfigError("the value-iteration oracle exists for the pendulum only")
    table = value_iteration_pendulum(o.theta_bins, o.thetadot_bins, o.action_bins, o.discount,
                                     o.tol, o.max_iters)
    table.to_csv(art.dir / "value_table.csv")
    art.file("value_table.csv")
    env = make_env("pendulum")
    s = PENDULUM_HANGING
    trace, total = [], 0.0
    for t in range(o.steps):
        a = table.greedy_action(s)
        r = float(env.reward(s, a))
        total += r
        trace.append([t, float(pendulum_angle(s)), float(s[2]), float(a[0]), r])
        s = env.step(s, a)
    art.csv("greedy_trace.csv", ["step", "theta", "thetadot", "action", "reward"], trace)
    art.figure("value_heatmap.svg", plots.value_heatmap, table)
    upright = [row[0] for row in trace if abs(row[1]) < 0.3]
    return dict(residual=table.residual, iterations=table.iterations,
                greedy_return=total, first_upright_step=upright[0] if upright else None)


def cmd_plot(cfg: RunConfig, art: Artifacts) -> dict:
    """Re-render figures from CSVs already in the output directory."""
    d, made = art.dir, []
    if (d / "learning_curve.csv").exists():
        rows = read_csv(d / "learning_curve.csv")
        by_mode = {}
        for r in rows:
            by_mode.setdefault(r["mode"], []).append(r)
        art.figure("learning_curve.svg", plots.learning_curves, by_mode)
        made.append("learning_curve.svg")
    if (d / "ablation.csv").exists():
        rows = read_csv(d / "ablation.csv")
        if "episode" in rows[0]:
            by_arm = {}
            for r in rows:
                by_arm.setdefault(r["arm"], []).append(r)
            art.figure("ablation.svg", plots.learning_curves, by_arm)
            made.append("ablation.svg")
    if (d / "value_table.csv").exists():
        art.figure("value_heatmap.svg", plots.value_heatmap, ValueTable.from_csv(d / "value_table.csv"))
        made.append("value_heatmap.svg")
    for name in ("opt1d", "sweep"):
        if (d / f"{name}_summary.csv").exists():
            art.figure(f"{name}_costs.svg", plots.cost_bands, read_csv(d / f"{name}_summary.csv"),
                       optimum=grid_oracle(MOTIVATIONAL)[1])
            made.append(f"{name}_costs.svg")
    for name in ("runtime_summary.csv", "opt1d_runtime_summary.csv"):
        if (d / name).exists():
            out = name.replace("_summary.csv", ".svg")
            art.figure(out, plots.runtime_bars, read_csv(d / name), deterministic=False)
            made.append(out)
    if not made:
        raise ConfigError(f"nothing to plot in {d}")
    return dict(figures=made)


COMMAND_FUNCS = {
    "opt1d": cmd_opt1d,
    "sweep": cmd_sweep,
    "plan": cmd_plan,
    "oracle": cmd_oracle,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def run(cfg: RunConfig) -> dict:
    """Execute ``cfg.command`` and write ``manifest.json``; returns the manifest."""
    art = Artifacts(cfg.run.output_dir)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    manifest = dict(command=cfg.command, config=cfg.snapshot(),
                    shares=cfg.planner.shares, started=started.isoformat())
    try:
        result = COMMAND_FUNCS[cfg.command](cfg, art)
        manifest["result"] = result
        manifest["complete"] = not result.get("partial", False)
    except DecentCEMError as exc:
        manifest["complete"] = False
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    manifest["wall_seconds"] = round(time.perf_counter() - t0, 3)
    manifest["finished"] = datetime.now(timezone.utc).isoformat()
    manifest["files"] = sorted(art.files, key=lambda f: f["name"])
    with open(art.dir / manifest_name(cfg.command), "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
        fh.write("\n")
    return manifest


def manifest_name(command) -> str:
    # re-plotting must not clobber the manifest of the run that made the CSVs
    return "plot_manifest.json" if command == "plot" else "manifest.json"


def _json_default(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def verify_manifest(out_dir, name="manifest.json") -> list[str]:
    """Names of files whose digest no longer matches the manifest."""
    d = Path(out_dir)
    manifest = json.loads((d / name).read_text())
    bad = []
    for f in manifest["files"]:
        data = (d / f["name"]).read_bytes() if (d / f["name"]).exists() else None
        if data is None or hashlib.sha256(data).hexdigest() != f["sha256"]:
            bad.append(f["name"])
    return bad


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decentcem", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMAND_FUNCS))
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", help="comma-separated seeds, overriding [run] seeds")
    p.add_argument("--out", help="output directory, overriding [run] output_dir")
    p.add_argument("--jobs", type=int, help="parallel workers, overriding [run] jobs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"run.command": args.command}
    if args.seed:
        overrides["run.seeds"] = args.seed
    if args.out:
        overrides["run.output_dir"] = args.out
    if args.jobs:
        overrides["run.jobs"] = str(args.jobs)
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    manifest = run(cfg)
    status = "complete" if manifest["complete"] else "INCOMPLETE"
    print(f"{cfg.command}: {status}, {len(manifest['files'])} files in {cfg.run.output_dir} "
          f"({manifest['wall_seconds']} s)")
    if "error" in manifest:
        print(manifest["error"], file=sys.stderr)
    return 0 if manifest["complete"] else 1


if __name__ == "__main__":
    sys.exit(main())
