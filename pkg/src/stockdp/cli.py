"""Command-line entry point.

``stockdp <subcommand> CONFIG.toml [--set section.key=value ...]``

Subcommands: ``solve``, ``evaluate``, ``bound-check``, ``reversal`` and
``basis-sweep``.  Results go to ``output_dir`` (or ``$STOCKDP_OUTPUT_DIR``).
Exit codes: 2 for configuration errors, 3 for solver failures, 4 for I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

from .discounting import DiscountFunction
from .environments import (
    GbwmConfig,
    Kernel,
    OuOptionConfig,
    TabularMdp,
    build_chain_mdp,
    build_deterministic_chain,
    build_gbwm,
    build_ou_put,
)
from .evaluation import exact_oce, monte_carlo_evaluate, aggregate_reports, preference_reversal_metric, write_reports_csv
from .finite_horizon import StockGrid, backward_induction
from .infinite_horizon import ConvergenceError, bound_check, fit_decay_slope, solve_infinite, write_bound_csv
from .multi_horizon import SELECTION_MODES, build_hyperbolic_basis, multi_backward_induction, preference_reversal_mdp
from .rigor import RigorConfig, train, train_multi_horizon
from .risk import OceUtility

OUTPUT_ENV = "STOCKDP_OUTPUT_DIR"
EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 2, 3, 4

SECTIONS = {
    "environment", "discount", "utility", "solver", "grid", "evaluation", "bound", "reversal", "basis_sweep",
}
TOP_LEVEL = {"seed", "output_dir", "threads"}
SOLVER_TYPES = ("backward", "multi_horizon", "infinite", "rigor_td")
SOLVER_KEYS = {
    "backward": {"type", "horizon", "atom_cap"},
    "multi_horizon": {"type", "horizon", "mode", "k", "m", "gamma_max", "atom_cap", "n_stationary"},
    "infinite": {"type", "t_prime", "tol", "n_atoms", "atom_cap"},
    "rigor_td": {"type", "horizon", "k", "m", "gamma_max", "rigor"},
}
SECTION_KEYS = {
    "grid": {"mode", "initial", "lo", "hi", "count", "n_quantiles", "tol"},
    "evaluation": {"episodes", "replicates", "exact"},
    "bound": {"t_primes", "seeds", "t_ref"},
    "reversal": {"gamma", "k", "episodes", "replicates", "goal_time"},
    "basis_sweep": {"k", "gamma_max", "ms", "horizon"},
}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` with the value read as a TOML literal (bare words stay strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    keys = [k.strip() for k in path.strip().split(".")]
    if not all(keys):
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return keys, value


def apply_overrides(cfg: dict, overrides) -> dict:
    for text in overrides or ():
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-table value")
        node[keys[-1]] = value
    return cfg


def _check_keys(name: str, table: Mapping, allowed) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")


def validate(cfg: Mapping) -> None:
    _check_keys("top level", cfg, TOP_LEVEL | SECTIONS)
    for name in SECTIONS & set(cfg):
        if not isinstance(cfg[name], Mapping):
            raise ConfigError(f"[{name}] must be a table")
    for name, allowed in SECTION_KEYS.items():
        if name in cfg:
            _check_keys(name, cfg[name], allowed)
    if "solver" in cfg:
        kind = cfg["solver"].get("type", "backward")
        if kind not in SOLVER_TYPES:
            raise ConfigError(f"unknown solver type {kind!r}; expected one of {SOLVER_TYPES}")
        _check_keys("solver", cfg["solver"], SOLVER_KEYS[kind])


def load_config(path, overrides=()) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def build_environment(section: Mapping) -> TabularMdp:
    section = dict(section)
    kind = section.pop("type", None)
    if kind == "chain":
        _check_keys("environment", section, {"n_states", "n_actions", "seed", "horizon", "reward_atoms", "reward_values",
                                          "branching"})
        return build_chain_mdp(**section)
    if kind == "deterministic_chain":
        _check_keys("environment", section, {"rewards", "horizon"})
        return build_deterministic_chain(**section)
    if kind == "gbwm":
        return build_gbwm(GbwmConfig.from_config(section))
    if kind == "ou_put":
        return build_ou_put(OuOptionConfig.from_config(section))
    if kind == "preference_reversal":
        _check_keys("environment", section, {"delay", "r_small", "r_large"})
        return preference_reversal_mdp(**section)
    if kind == "tabular":
        _check_keys("environment", section, {"n_states", "n_actions", "horizon", "initial_state", "transitions"})
        rows: dict = {}
        for s, a, s2, r, p in section["transitions"]:
            rows.setdefault((int(s), int(a)), []).append((int(s2), float(r), float(p)))
        kernel = Kernel.from_rows(int(section["n_states"]), int(section["n_actions"]), rows)
        return TabularMdp.stationary(kernel, horizon=section.get("horizon"), initial_state=int(section.get("initial_state", 0)))
    raise ConfigError(
        f"unknown environment type {kind!r}; expected chain, deterministic_chain, gbwm, ou_put, "
        "preference_reversal or tabular"
    )


def build_grid(section: Mapping | None) -> StockGrid:
    section = dict(section or {"mode": "invariant"})
    mode = section.get("mode", "exact")
    if "initial" in section:
        nodes = np.asarray(section["initial"], dtype=float)
    elif {"lo", "hi", "count"} <= set(section):
        nodes = np.linspace(float(section["lo"]), float(section["hi"]), int(section["count"]))
    else:
        nodes = np.zeros(1)
    kw = {}
    if "n_quantiles" in section:
        kw["n_quantiles"] = int(section["n_quantiles"])
    if "tol" in section:
        kw["tol"] = float(section["tol"])
    return StockGrid(mode, nodes, **kw)


@dataclass
class Experiment:
    cfg: dict
    mdp: TabularMdp | None
    f: OceUtility
    d: DiscountFunction
    grid: StockGrid
    seed: int
    output_dir: Path
    solver: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: Mapping, need_env: bool = True) -> "Experiment":
        try:
            mdp = build_environment(cfg["environment"]) if need_env else None
            f = OceUtility.from_config(cfg.get("utility", {"type": "mean"}))
            d = DiscountFunction.from_config(cfg.get("discount", {"type": "exponential", "gamma": 1.0}))
            grid = build_grid(cfg.get("grid"))
        except KeyError as exc:
            raise ConfigError(f"missing required key {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        out = os.environ.get(OUTPUT_ENV) or cfg.get("output_dir", "results")
        return cls(dict(cfg), mdp, f, d, grid, int(cfg.get("seed", 0)), Path(out), dict(cfg.get("solver", {})))

    def basis(self):
        s = self.solver
        return build_hyperbolic_basis(float(s.get("k", 0.05)), int(s.get("m", 10)), float(s.get("gamma_max", 0.999)))


# ----------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(v) for v in row])


def policy_to_dict(policy) -> dict:
    return {
        "initial_stock": policy.initial_stock,
        "horizon": policy.horizon,
        "switch": policy.switch,
        "tail": None if policy.tail is None else [int(a) for a in np.asarray(policy.tail)],
        "rules": [[t, s, c, a] for t, s, c, a in policy.rows()],
    }


def write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# subcommands


def solve(exp: Experiment):
    """Run the configured solver; returns ``(policy, summary dict)``."""
    s = exp.solver
    kind = s.get("type", "backward")
    T = s.get("horizon")
    summary = {"solver": kind}
    if kind == "backward":
        policy, table = backward_induction(exp.mdp, exp.f, exp.d, exp.grid, T=T,
                                           atom_cap=int(s.get("atom_cap", 4096)))
        value, c0 = table.initial_stock(exp.mdp.initial_state)
        summary.update(objective=value, initial_stock=c0)
        summary["_table"] = table
    elif kind == "multi_horizon":
        mode = s.get("mode", "time_consistent")
        if mode not in SELECTION_MODES:
            raise ConfigError(f"unknown selection mode {mode!r}; expected one of {SELECTION_MODES}")
        basis = exp.basis()
        policy, table = multi_backward_induction(exp.mdp, exp.f, basis, exp.grid, T=T, mode=mode,
                                                 atom_cap=int(s.get("atom_cap", 4096)),
                                                 n_stationary=int(s.get("n_stationary", 32)))
        policy.initial_stock = float(exp.grid.initial[0])
        summary.update(mode=mode, m=basis.m, initial_stock=policy.initial_stock)
    elif kind == "infinite":
        policy, table, tail = solve_infinite(exp.mdp, exp.f, exp.d, int(s.get("t_prime", 10)), exp.grid,
                                             tol=float(s.get("tol", 1e-8)), n_atoms=int(s.get("n_atoms", 401)))
        value, c0 = table.initial_stock(exp.mdp.initial_state)
        summary.update(objective=value, initial_stock=c0, gamma_tail=tail.gamma, tail_sweeps=tail.sweeps)
        summary["_table"] = table
    else:
        rcfg = dict(s.get("rigor", {}))
        rcfg.setdefault("seed", exp.seed)
        try:
            config = RigorConfig.from_config(rcfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if "m" in s or "k" in s:
            result = train_multi_horizon(exp.mdp, exp.f, exp.basis(), exp.grid, config, T)
        else:
            result = train(exp.mdp, exp.f, exp.d, exp.grid, config, T)
        policy = result.policy
        summary.update(initial_stock=result.initial_stock, inversions=result.inversions)
        summary["_log"] = result
    return policy, summary


def cmd_solve(exp: Experiment) -> list[Path]:
    policy, summary = solve(exp)
    out = exp.output_dir
    files = [out / "policy.json"]
    write_json(files[0], policy_to_dict(policy))
    if "_table" in summary:
        files.append(out / "values.csv")
        summary.pop("_table").write_csv(files[-1], policy)
    if "_log" in summary:
        files.append(out / "training_log.csv")
        summary.pop("_log").write_log(files[-1])
    files.append(out / "summary.csv")
    write_csv(files[-1], list(summary), [list(summary.values())])
    return files


def _replicate_reports(exp: Experiment, policy, episodes: int, replicates: int, d=None):
    reports = []
    for i in range(replicates):
        rep = monte_carlo_evaluate(exp.mdp, policy, exp.f, d or exp.d, episodes, exp.seed, stream_path=(i,))
        rep.seeds = [i]
        reports.append(rep)
    return reports


def cmd_evaluate(exp: Experiment) -> list[Path]:
    ev = exp.cfg.get("evaluation", {})
    episodes, replicates = int(ev.get("episodes", 10_000)), int(ev.get("replicates", 3))
    policy, _ = solve(exp)
    reports = _replicate_reports(exp, policy, episodes, replicates)
    pooled = aggregate_reports(reports)
    path = exp.output_dir / "evaluation.csv"
    write_reports_csv(path, reports + [pooled], labels=[f"replicate_{i}" for i in range(replicates)] + ["pooled"])
    files = [path]
    if ev.get("exact", False):
        value = exact_oce(exp.mdp, policy, exp.f, exp.d, exp.grid)
        files.append(exp.output_dir / "exact.csv")
        write_csv(files[-1], ["objective", "initial_stock"], [[value, policy.initial_stock]])
    return files


def cmd_bound_check(exp: Experiment) -> list[Path]:
    b = exp.cfg.get("bound", {})
    t_primes = [int(t) for t in b.get("t_primes", (2, 5, 10))]
    seeds = [int(s) for s in b.get("seeds", (exp.seed,))]
    env = dict(exp.cfg["environment"])
    rows = []
    for seed in seeds:
        mdp = exp.mdp
        if env.get("type") == "chain":
            mdp = build_environment({**env, "seed": seed})
        rows += bound_check(mdp, exp.f, exp.d, t_primes, exp.grid, b.get("t_ref"), seed)
    path = exp.output_dir / "bound_check.csv"
    write_bound_csv(path, rows)
    mean_measured = [float(np.mean([r.measured for r in rows if r.t_prime == tp])) for tp in t_primes]
    d_values = [exp.d.evaluate(tp) for tp in t_primes]
    summary = exp.output_dir / "bound_summary.csv"
    write_csv(summary, ["rows", "violations", "slope"],
              [[len(rows), sum(not r.holds for r in rows), fit_decay_slope(d_values, mean_measured)]])
    if any(not r.holds for r in rows):
        raise ConvergenceError(f"bound violated on {sum(not r.holds for r in rows)} row(s); see {path}")
    return [path, summary]


def cmd_reversal(exp: Experiment) -> list[Path]:
    rv = exp.cfg.get("reversal", {})
    if exp.mdp.info.get("kind") != "gbwm":
        raise ConfigError("reversal needs a gbwm environment")
    episodes, replicates = int(rv.get("episodes", 10_000)), int(rv.get("replicates", 3))
    T = exp.mdp.horizon
    pooled = []
    for d in (DiscountFunction.exponential(float(rv.get("gamma", 1.0)), T + 2),
              DiscountFunction.hyperbolic(float(rv.get("k", 0.05)), T + 2)):
        policy, _ = backward_induction(exp.mdp, exp.f, d, exp.grid)
        pooled.append(aggregate_reports(_replicate_reports(exp, policy, episodes, replicates, d)))
    gap = preference_reversal_metric(pooled[0], pooled[1], rv.get("goal_time"))
    path = exp.output_dir / "reversal.csv"
    write_reports_csv(path, pooled, labels=["exponential", "hyperbolic"])
    gap_path = exp.output_dir / "reversal_gap.csv"
    write_csv(gap_path, ["gap"], [[gap]])
    return [path, gap_path]


def cmd_basis_sweep(exp: Experiment) -> list[Path]:
    bs = exp.cfg.get("basis_sweep", {})
    k, gmax = float(bs.get("k", 0.05)), float(bs.get("gamma_max", 0.999))
    horizon = int(bs.get("horizon", 200))
    target = DiscountFunction.hyperbolic(k, horizon + 1)
    rows = []
    for m in bs.get("ms", (1, 2, 5, 10, 20, 40)):
        try:
            basis = build_hyperbolic_basis(k, int(m), gmax)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        rows.append([int(m), basis.params["b"], float(basis.gammas[0]), float(basis.gammas[-1]),
                     basis.max_relative_error(target, horizon)])
    path = exp.output_dir / "basis_sweep.csv"
    write_csv(path, ["m", "b", "gamma_min", "gamma_max", "max_relative_error"], rows)
    return [path]


COMMANDS = {
    "solve": (cmd_solve, True),
    "evaluate": (cmd_evaluate, True),
    "bound-check": (cmd_bound_check, True),
    "reversal": (cmd_reversal, True),
    "basis-sweep": (cmd_basis_sweep, False),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stockdp", description="Stock-augmented distributional DP experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="TOML experiment file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--output-dir", help="overrides output_dir (the environment variable wins over both)")
    p.add_argument("--threads", type=int, default=1, help="worker cap (the solvers are single-threaded)")
    return p


def run(command: str, config_path, overrides=(), output_dir=None) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        cfg = load_config(config_path, overrides)
        if output_dir is not None:
            cfg["output_dir"] = str(output_dir)
        handler, need_env = COMMANDS[command]
        if need_env and "environment" not in cfg:
            raise ConfigError("missing required table [environment]")
        exp = Experiment.from_config(cfg, need_env)
        exp.output_dir.mkdir(parents=True, exist_ok=True)
        files = handler(exp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConvergenceError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for f in files:
        print(f)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.overrides, args.output_dir)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
