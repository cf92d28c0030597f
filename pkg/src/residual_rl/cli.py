"""Command-line frontend.

Nine subcommands: gen-data, fit-model, solve, train, train-baseline,
evaluate, sweep, compare-models, verify.  Every command accepts --config
pointing at an INI file ([common] plus one section per command); flags
override file values.  Exit codes: 0 success, 1 runtime failure, 2
usage/config error.  Outputs are written atomically and carry the resolved
config hash and seed, so identical invocations produce byte-identical files.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import Opt, load_config_file, resolve_options
from .dqn import DqnConfig, NetworkQ, RegressionConfig, evaluate, train, train_baseline
from .envs import OfflineDataset, generate_dataset, make_env
from .errors import ConfigError, ResidualRLError
from .nets import load_model, save_model
from .residuals import (
    EmpiricalKernel,
    ResidualSet,
    TransitionModel,
    compute_residuals,
    fit_transition_model,
    full_information_kernel,
    true_noise_residuals,
)
from .util import atomic_write_text, stable_hash

_SEED = Opt("seed", "int", default=0, help="base RNG seed (env RESID_RL_SEED overrides the default)")
_ENV = Opt("env", "str", default="cartpole", choices=("cartpole", "synthetic1d"), help="environment name")
_NOISE = Opt("noise-std", "float", default=-1.0, lo=-1.0, help="process noise std; -1 keeps the env default")
_JOBS = Opt("jobs", "int", default=1, lo=1, help="parallel worker processes")

_DQN_OPTS = [
    Opt("episodes", "int", default=1000, lo=1, help="training episodes in the simulated kernel"),
    Opt("horizon-cap", "int", default=500, lo=1, help="max steps per episode"),
    Opt("gamma", "float", default=0.99, lo=0.0, hi=1.0, hi_open=True, help="discount factor"),
    Opt("lr", "float", default=1e-4, lo=1e-12, help="Adam learning rate for the Q-network"),
    Opt("batch-size", "int", default=128, lo=1, help="replay minibatch size"),
    Opt("replay-capacity", "int", default=10_000, lo=1, help="replay memory capacity"),
    Opt("target-sync", "int", default=500, lo=1, help="gradient steps between target-network copies"),
    Opt("eps-start", "float", default=0.9, lo=0.0, hi=1.0, help="initial exploration rate"),
    Opt("eps-min", "float", default=0.01, lo=0.0, hi=1.0, help="exploration floor"),
    Opt("eps-decay", "float", default=2000.0, lo=1e-9, help="exploration decay constant in env steps"),
    Opt("hidden", "ints", default=(64, 64), lo=1, help="Q-network hidden widths, comma separated"),
    Opt("eval-every", "int", default=10, lo=1, help="episodes between true-env evaluations"),
    Opt("eval-episodes", "int", default=20, lo=1, help="episodes per evaluation round"),
]

_REG_OPTS = [
    Opt("reg-kind", "str", default="mlp", choices=("mlp", "linear"), help="transition regressor type"),
    Opt("reg-hidden", "ints", default=(64,), lo=1, help="regressor hidden widths"),
    Opt("reg-epochs", "int", default=40, lo=1, help="regressor training epochs"),
    Opt("reg-batch-size", "int", default=128, lo=1, help="regressor minibatch size"),
    Opt("reg-lr", "float", default=1e-3, lo=1e-12, help="regressor Adam learning rate"),
    Opt("reg-ridge", "float", default=0.0, lo=0.0, help="ridge penalty for the linear regressor"),
]


def _dqn_config(o: dict, seed: int) -> DqnConfig:
    return DqnConfig(
        episodes=o["episodes"], horizon_cap=o["horizon_cap"], gamma=o["gamma"],
        lr=o["lr"], batch_size=o["batch_size"], replay_capacity=o["replay_capacity"],
        target_sync=o["target_sync"], eps_start=o["eps_start"], eps_min=o["eps_min"],
        eps_decay=o["eps_decay"], hidden=tuple(o["hidden"]),
        eval_every=o["eval_every"], eval_episodes=o["eval_episodes"], seed=seed)


def _reg_config(o: dict) -> RegressionConfig:
    return RegressionConfig(
        kind=o["reg_kind"], hidden=tuple(o["reg_hidden"]), epochs=o["reg_epochs"],
        batch_size=o["reg_batch_size"], lr=o["reg_lr"], ridge=o["reg_ridge"])


def _noise(o: dict):
    return None if o["noise_std"] < 0 else o["noise_std"]


def _hash(command: str, o: dict) -> str:
    return stable_hash({"command": command, "version": __version__, **o})


def _say(command: str, cfg_hash: str, msg: str) -> None:
    print(f"[{command}] config={cfg_hash} {msg}")


# ----------------------------------------------------------------- commands

def _cmd_gen_data(o: dict) -> int:
    h = _hash("gen-data", o)
    env = make_env(o["env"], _noise(o))
    ds = generate_dataset(env, o["trajectories"], o["horizon"], o["seed"])
    ds.meta["config_hash"] = h
    ds.save(o["out"])
    _say("gen-data", h, f"wrote {len(ds)} transitions from "
         f"{o['trajectories']} trajectories to {o['out']}")
    return 0


def _cmd_fit_model(o: dict) -> int:
    h = _hash("fit-model", o)
    ds = OfflineDataset.load(o["data"])
    model = fit_transition_model(
        ds, kind=o["kind"], ridge=o["ridge"], hidden=tuple(o["hidden"]),
        seed=o["seed"], epochs=o["epochs"], batch_size=o["batch_size"], lr=o["lr"])
    residuals = compute_residuals(model, ds)
    model.info.update({"config_hash": h, "seed": o["seed"]})
    model.save(o["out"])
    rpath = o["residuals_out"] or _derived_residual_path(o["out"])
    residuals.save(rpath)
    rms = float(np.sqrt(np.mean(residuals.residuals ** 2)))
    _say("fit-model", h, f"fit {o['kind']} on {len(ds)} transitions; "
         f"residual rms={rms:.6g}; wrote {o['out']} and {rpath}")
    return 0


def _derived_residual_path(model_path: str) -> str:
    stem = model_path[:-5] if model_path.endswith(".json") else model_path
    return stem + ".residuals.json"


def _cmd_solve(o: dict) -> int:
    from .gridsolve import Grid, QuadratureSource, solve_fixed_point

    h = _hash("solve", o)
    if o["env"] != "synthetic1d":
        raise ConfigError("solve requires a low-dimensional env (synthetic1d)")
    env = make_env(o["env"], _noise(o))
    problem = env.make_problem(o["gamma"])
    grid = Grid.from_space(env.space, o["grid"])
    operator = o["operator"]
    n_scen = None
    if operator == "quadrature":
        source = QuadratureSource(env.f_star, env.noise_std, o["gh_nodes"])
    else:
        if o["data"]:
            ds = OfflineDataset.load(o["data"])
        else:
            from .envs import dataset_with_n_transitions
            ds = dataset_with_n_transitions(env, o["n_transitions"], o["seed"])
        n_scen = len(ds)
        if operator == "residual":
            model = fit_transition_model(ds, kind="linear")
            source = EmpiricalKernel(model, compute_residuals(model, ds), env.space)
        else:  # fullinfo
            source = full_information_kernel(
                env.f_star, true_noise_residuals(env, ds), env.space)
    q, diag = solve_fixed_point(problem, grid, source,
                                tol=o["tol"], max_iter=o["max_iter"])
    blob = {
        "command": "solve", "config_hash": h, "seed": o["seed"],
        "env": o["env"], "operator": operator, "gamma": o["gamma"],
        "tol": o["tol"], "grid_nodes": o["grid"], "n_scenarios": n_scen,
        "axes": [ax.tolist() for ax in grid.axes],
        "values": q.values.tolist(),
        "iterations": diag.iterations,
        "deltas": diag.deltas.tolist(),
    }
    atomic_write_text(o["out"], json.dumps(blob, sort_keys=True) + "\n")
    _say("solve", h, f"{operator} operator converged in {diag.iterations} sweeps; "
         f"wrote {o['out']}")
    return 0


def _load_or_generate_dataset(o: dict, env, h: str) -> OfflineDataset:
    if o["data"]:
        return OfflineDataset.load(o["data"])
    ds = generate_dataset(env, o["n_trajectories"], o["data_horizon_cap"], o["data_seed"])
    ds.meta["config_hash"] = h
    return ds


def _cmd_train_common(o: dict, baseline: bool) -> int:
    command = "train-baseline" if baseline else "train"
    h = _hash(command, o)
    env = make_env(o["env"], _noise(o))
    ds = _load_or_generate_dataset(o, env, h)
    cfg = _dqn_config(o, o["seed"])
    reg = _reg_config(o)
    runner = train_baseline if baseline else train
    result = runner(ds, env, cfg, reg)
    out_dir = o["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    result.model.info.update({"config_hash": h, "seed": o["seed"]})
    result.model.save(os.path.join(out_dir, "transition_model.json"))
    result.residuals.save(os.path.join(out_dir, "residuals.json"))
    save_model(result.q.net, os.path.join(out_dir, "qnet.json"),
               metadata={"config_hash": h, "seed": o["seed"], "env": o["env"],
                         "variant": result.report.variant})
    report_path = os.path.join(out_dir, "train_report.csv")
    result.report.to_csv(report_path)
    summary = {
        "command": command, "config_hash": h, "seed": o["seed"],
        "variant": result.report.variant, "n_transitions": len(ds),
        "final_train_return": result.report.final_train_mean(),
        "final_eval_return": result.report.final_eval_mean(),
        "episodes": cfg.episodes,
    }
    atomic_write_text(os.path.join(out_dir, "summary.json"),
                      json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _say(command, h, f"{result.report.variant}: final eval return "
         f"{summary['final_eval_return']:.2f} over {cfg.episodes} episodes; "
         f"outputs in {out_dir}")
    return 0


def _cmd_train(o: dict) -> int:
    return _cmd_train_common(o, baseline=False)


def _cmd_train_baseline(o: dict) -> int:
    return _cmd_train_common(o, baseline=True)


def _cmd_evaluate(o: dict) -> int:
    h = _hash("evaluate", o)
    env = make_env(o["env"], _noise(o))
    net, meta = load_model(o["qnet"])
    if net.layer_sizes[0] != env.space.dim or net.layer_sizes[-1] != len(env.actions):
        raise ConfigError(
            f"qnet expects dims {net.layer_sizes[0]}->{net.layer_sizes[-1]}, "
            f"env {o['env']} has {env.space.dim}->{len(env.actions)}")
    res = evaluate(NetworkQ(net), env, o["episodes"], o["seed"], o["horizon_cap"])
    _say("evaluate", h, f"mean return {res.mean_return:.3f} "
         f"(std {res.std_return:.3f}) over {o['episodes']} episodes")
    if o["out"]:
        blob = {"command": "evaluate", "config_hash": h, "seed": o["seed"],
                "episodes": o["episodes"], "mean_return": res.mean_return,
                "std_return": res.std_return, "returns": res.returns.tolist()}
        atomic_write_text(o["out"], json.dumps(blob, indent=2, sort_keys=True) + "\n")
    return 0


def _sweep_spec(o: dict, ns, baseline_at):
    from .experiments import SweepSpec

    return SweepSpec(
        env_name=o["env"], noise_std=_noise(o), n_trajectories=tuple(ns),
        seeds=tuple(o["seeds"]), baseline_at=tuple(baseline_at),
        data_horizon_cap=o["data_horizon_cap"], base_entropy=o["seed"],
        dqn=_dqn_config(o, 0), regression=_reg_config(o))


def _cmd_sweep(o: dict) -> int:
    from .experiments import run_sample_size_sweep

    h = _hash("sweep", o)
    spec = _sweep_spec(o, o["ns"], o["baseline_at"])
    result = run_sample_size_sweep(spec, out_dir=o["out_dir"], jobs=o["jobs"])
    failed = [c for c in result.cells if c.status != "ok"]
    for a in result.aggregates:
        _say("sweep", h, f"{a['variant']} n={a['n']}: eval mean "
             f"{a['eval_mean']:.2f} over {a['n_ok']} seeds")
    _say("sweep", h, f"spearman(n, eval_mean) rho={result.spearman['rho']:.3f}; "
         f"{len(failed)} failed cells; outputs in {o['out_dir']}")
    return 1 if failed else 0


def _cmd_compare_models(o: dict) -> int:
    from .experiments import run_model_comparison

    h = _hash("compare-models", o)
    spec = _sweep_spec(o, (o["n"],), (o["n"],))
    result = run_model_comparison(spec, o["n"], out_dir=o["out_dir"], jobs=o["jobs"])
    failed = [c for c in result.cells if c.status != "ok"]
    for row in result.comparison:
        _say("compare-models", h,
             f"n={row['n']}: residuals eval {row['eval_mean_residuals']:.2f} "
             f"(gap {row['gap_mean_residuals']:.2f}) vs model-only "
             f"{row['eval_mean_model_only']:.2f} (gap {row['gap_mean_model_only']:.2f})")
    _say("compare-models", h, f"{len(failed)} failed cells; outputs in {o['out_dir']}")
    return 1 if failed else 0


def _cmd_verify(o: dict) -> int:
    from .experiments import TheoryConfig, run_theory_suite

    h = _hash("verify", o)
    if o["suite"] != "theory":
        raise ConfigError(f"unknown suite {o['suite']!r}")
    if o["env"] != "synthetic1d":
        raise ConfigError("the theory suite runs on synthetic1d")
    cfg = TheoryConfig.fast() if o["fast"] else TheoryConfig()
    report = run_theory_suite(cfg)
    for c in report.checks:
        print(f"[verify] {'PASS' if c.passed else 'FAIL'} {c.name:24s} "
              f"margin={c.margin:+.3e}")
    if o["out"]:
        report.to_json(o["out"])
    if report.all_passed:
        _say("verify", h, f"all checks passed ({len(report.checks)} checks, "
             f"{report.timings['total_s']:.1f}s)")
        return 0
    failed = [c.name for c in report.checks if not c.passed]
    _say("verify", h, f"FAILED checks: {', '.join(failed)}")
    return 1


# ----------------------------------------------------------------- wiring

_DATA_GEN_OPTS = [
    Opt("n-trajectories", "int", default=1000, lo=1, help="trajectories to roll out"),
    Opt("data-horizon-cap", "int", default=500, lo=1, help="max steps per data trajectory"),
    Opt("data-seed", "int", default=0, help="seed for self-generated datasets"),
    Opt("data", "str", default="", help="dataset path (JSONL); empty generates one"),
]

COMMANDS = {
    "gen-data": (_cmd_gen_data, [
        _ENV, _NOISE,
        Opt("trajectories", "int", default=1000, lo=1, help="trajectories to roll out"),
        Opt("horizon", "int", default=500, lo=1, help="max steps per trajectory"),
        _SEED,
        Opt("out", "path", help="output dataset path (JSON lines)"),
    ], "roll out the behavior policy and write an offline dataset"),
    "fit-model": (_cmd_fit_model, [
        Opt("data", "path", help="dataset path (JSON lines)"),
        Opt("kind", "str", default="mlp", choices=("mlp", "linear"), help="regressor type"),
        Opt("hidden", "ints", default=(64,), lo=1, help="hidden widths for the mlp"),
        Opt("epochs", "int", default=40, lo=1, help="training epochs"),
        Opt("batch-size", "int", default=128, lo=1, help="minibatch size"),
        Opt("lr", "float", default=1e-3, lo=1e-12, help="Adam learning rate"),
        Opt("ridge", "float", default=0.0, lo=0.0, help="ridge penalty (linear only)"),
        _SEED,
        Opt("out", "path", help="output model path (JSON)"),
        Opt("residuals-out", "str", default="", help="residuals output path; default derives from --out"),
    ], "fit the transition model and write it with its residuals"),
    "solve": (_cmd_solve, [
        Opt("env", "str", default="synthetic1d", choices=("synthetic1d",), help="environment"),
        _NOISE,
        Opt("operator", "str", default="residual",
            choices=("residual", "fullinfo", "quadrature"), help="backup operator family"),
        Opt("gamma", "float", default=0.9, lo=0.0, hi=1.0, hi_open=True, help="discount factor"),
        Opt("grid", "int", default=401, lo=2, help="grid nodes per state dimension"),
        Opt("tol", "float", default=1e-10, lo=1e-14, help="fixed-point tolerance"),
        Opt("max-iter", "int", default=20_000, lo=1, help="sweep limit"),
        Opt("data", "str", default="", help="dataset for scenario operators; empty generates one"),
        Opt("n-transitions", "int", default=200, lo=1, help="size of a self-generated dataset"),
        Opt("gh-nodes", "int", default=64, lo=1, help="Gauss-Hermite nodes for quadrature"),
        _SEED,
        Opt("out", "str", default="solution.json", help="output path for the solved Q table"),
    ], "value-iterate a grid Bellman operator to its fixed point"),
    "train": (_cmd_train, [
        _ENV, _NOISE, *_DATA_GEN_OPTS, *_DQN_OPTS, *_REG_OPTS, _SEED,
        Opt("out-dir", "path", help="directory for model, qnet, and training report"),
    ], "offline DQN in the residuals-based simulated kernel"),
    "train-baseline": (_cmd_train_baseline, [
        _ENV, _NOISE, *_DATA_GEN_OPTS, *_DQN_OPTS, *_REG_OPTS, _SEED,
        Opt("out-dir", "path", help="directory for model, qnet, and training report"),
    ], "ablation: offline DQN rolling the bare model without residuals"),
    "evaluate": (_cmd_evaluate, [
        _ENV, _NOISE,
        Opt("qnet", "path", help="Q-network JSON to evaluate"),
        Opt("episodes", "int", default=100, lo=1, help="greedy evaluation episodes"),
        Opt("horizon-cap", "int", default=500, lo=1, help="max steps per episode"),
        _SEED,
        Opt("out", "str", default="", help="optional JSON result path"),
    ], "greedy rollouts of a saved Q-network in the true environment"),
    "sweep": (_cmd_sweep, [
        _ENV, _NOISE,
        Opt("ns", "ints", default=(200, 500, 1000), lo=1, help="trajectory counts"),
        Opt("seeds", "ints", default=(0, 1, 2, 3, 4), help="seeds per count"),
        Opt("baseline-at", "ints", default=(), help="counts that also run the model-only ablation"),
        Opt("data-horizon-cap", "int", default=500, lo=1, help="max steps per data trajectory"),
        *_DQN_OPTS, *_REG_OPTS, _SEED, _JOBS,
        Opt("out-dir", "path", help="output directory"),
    ], "dataset-size sweep of the offline DQN"),
    "compare-models": (_cmd_compare_models, [
        _ENV, _NOISE,
        Opt("n", "int", default=1000, lo=1, help="trajectory count for the paired comparison"),
        Opt("seeds", "ints", default=(0, 1, 2, 3, 4), help="seeds"),
        Opt("data-horizon-cap", "int", default=500, lo=1, help="max steps per data trajectory"),
        *_DQN_OPTS, *_REG_OPTS, _SEED, _JOBS,
        Opt("out-dir", "path", help="output directory"),
    ], "paired residuals vs model-only comparison at one dataset size"),
    "verify": (_cmd_verify, [
        Opt("suite", "str", default="theory", choices=("theory",), help="which suite to run"),
        Opt("env", "str", default="synthetic1d", choices=("synthetic1d",), help="environment"),
        Opt("fast", "bool", default=False, help="shrunk smoke-test scope"),
        Opt("out", "str", default="", help="optional JSON report path"),
        _SEED,
    ], "run the fixed-point verification suite"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="residual-rl",
        description="residuals-based offline reinforcement learning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")
    for name, (_, opts, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI config file")
        for opt in opts:
            flag = f"--{opt.name}"
            if opt.kind == "bool":
                p.add_argument(flag, action="store_true", default=False, help=opt.help)
            elif opt.kind == "int":
                p.add_argument(flag, type=int, default=None, help=opt.help)
            elif opt.kind == "float":
                p.add_argument(flag, type=float, default=None, help=opt.help)
            else:
                p.add_argument(flag, type=str, default=None, help=opt.help)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    if args.command is None:
        parser.print_help()
        return 2
    handler, opts, _ = COMMANDS[args.command]
    try:
        sections = (load_config_file(args.config, COMMANDS.keys())
                    if args.config else None)
        resolved = resolve_options(args.command, opts, vars(args), sections)
        return handler(resolved)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ResidualRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
