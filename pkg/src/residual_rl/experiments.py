"""Experiment drivers: sample-size sweeps, paired model comparisons, and the
theory verification suite.

The sweep and comparison drivers share one cell pipeline: generate the
offline dataset for (n, seed), fit the transition model once, then train the
residuals-based agent (and, where requested, the model-only baseline on the
identical dataset and fit).  Cells fail independently; one diverging run
leaves the rest of the grid intact.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import __version__
from .dqn import DqnConfig, RegressionConfig, TrainReport, train, train_baseline
from .envs import Synthetic1D, dataset_with_n_transitions, generate_dataset, make_env
from .errors import ConfigError
from .gridsolve import (
    Grid,
    GridOperator,
    GridQ,
    QuadratureSource,
    consistency_curve,
    estimate_lipschitz,
    kernel_coupling,
    solve_true_fixed_point,
)
from .residuals import compute_residuals, fit_transition_model, true_noise_residuals
from .util import atomic_write_text, stable_hash


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepSpec:
    """Grid of offline-DQN runs over dataset sizes and seeds."""

    env_name: str = "cartpole"
    noise_std: float | None = None
    n_trajectories: tuple = (200, 500, 1000)
    seeds: tuple = (0, 1, 2, 3, 4)
    baseline_at: tuple = ()        # n values that also get the model-only ablation
    data_horizon_cap: int = 500
    base_entropy: int = 0
    dqn: DqnConfig = field(default_factory=DqnConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)

    def validate(self) -> None:
        if not self.n_trajectories or not self.seeds:
            raise ConfigError("sweep needs at least one n and one seed")
        if any(n < 1 for n in self.n_trajectories):
            raise ConfigError("trajectory counts must be >= 1")
        unknown = set(self.baseline_at) - set(self.n_trajectories)
        if unknown:
            raise ConfigError(f"baseline_at entries {sorted(unknown)} not in n_trajectories")
        self.dqn.validate()
        self.regression.validate()


@dataclass
class CellResult:
    variant: str
    n: int
    seed: int
    data_seed: int
    train_seed: int
    status: str                 # "ok" or "failed"
    error: str
    n_transitions: int
    final_train: float
    final_eval: float
    gap: float
    wall_s: float


@dataclass
class SweepResult:
    spec: SweepSpec
    cells: list
    reports: dict               # (variant, n, seed) -> TrainReport
    aggregates: list            # dicts per (variant, n)
    spearman: dict              # rank correlation of n vs mean test return (residuals)
    comparison: list            # per-n paired summaries where baselines ran
    manifest: dict


def derive_cell_seeds(base_entropy: int, n: int, seed: int):
    """Independent integer seeds for dataset generation and training.

    Mixing (base, n, seed) through SeedSequence keeps cells decorrelated even
    though user-facing seeds are small consecutive integers.
    """
    root = np.random.SeedSequence([int(base_entropy), int(n), int(seed)])
    a, b = root.generate_state(2)
    return int(a), int(b)


def _run_cell(spec: SweepSpec, n: int, seed: int):
    """All runs for one (n, seed) cell; returns (cells, reports) pieces."""
    data_seed, train_seed = derive_cell_seeds(spec.base_entropy, n, seed)
    env = make_env(spec.env_name, spec.noise_std)
    cells, reports = [], {}
    variants = ["residuals"] + (["model-only"] if n in spec.baseline_at else [])
    try:
        dataset = generate_dataset(env, n, spec.data_horizon_cap, data_seed)
        ds_digest = stable_hash(dataset.s.tobytes().hex())
        model = fit_transition_model(
            dataset, kind=spec.regression.kind, ridge=spec.regression.ridge,
            hidden=spec.regression.hidden, seed=train_seed,
            epochs=spec.regression.epochs, batch_size=spec.regression.batch_size,
            lr=spec.regression.lr)
        transition = (model, compute_residuals(model, dataset))
    except Exception as exc:  # noqa: BLE001 - cell isolation is the point
        for variant in variants:
            cells.append(CellResult(variant, n, seed, data_seed, train_seed,
                                    "failed", f"{type(exc).__name__}: {exc}",
                                    0, float("nan"), float("nan"), float("nan"), 0.0))
        return cells, reports

    for variant in variants:
        t0 = time.perf_counter()
        try:
            # both variants must consume the identical dataset object
            assert stable_hash(dataset.s.tobytes().hex()) == ds_digest
            cfg = replace(spec.dqn, seed=train_seed)
            runner = train if variant == "residuals" else train_baseline
            result = runner(dataset, env, cfg, spec.regression, transition=transition)
            rep = result.report
            final_train = rep.final_train_mean()
            final_eval = rep.final_eval_mean()
            cells.append(CellResult(
                variant, n, seed, data_seed, train_seed, "ok", "",
                len(dataset), final_train, final_eval,
                abs(final_train - final_eval), time.perf_counter() - t0))
            reports[(variant, n, seed)] = rep
        except Exception as exc:  # noqa: BLE001
            cells.append(CellResult(variant, n, seed, data_seed, train_seed,
                                    "failed", f"{type(exc).__name__}: {exc}",
                                    len(dataset), float("nan"), float("nan"),
                                    float("nan"), time.perf_counter() - t0))
    return cells, reports


def _aggregate(cells, variant: str, n: int):
    ok = [c for c in cells if c.variant == variant and c.n == n and c.status == "ok"]
    if not ok:
        return {"variant": variant, "n": n, "n_ok": 0,
                "eval_mean": float("nan"), "eval_std": float("nan"),
                "train_mean": float("nan"), "gap_mean": float("nan")}
    evals = np.array([c.final_eval for c in ok])
    trains = np.array([c.final_train for c in ok])
    gaps = np.array([c.gap for c in ok])
    return {
        "variant": variant, "n": n, "n_ok": len(ok),
        "eval_mean": float(evals.mean()),
        "eval_std": float(evals.std(ddof=1)) if len(ok) > 1 else 0.0,
        "train_mean": float(trains.mean()),
        "gap_mean": float(gaps.mean()),
    }


def run_sample_size_sweep(spec: SweepSpec, out_dir: str | None = None,
                          jobs: int = 1) -> SweepResult:
    """Train across the (n, seeds) grid and summarize test performance vs n.

    Adds the model-only baseline at every n listed in spec.baseline_at,
    paired with the residuals run (same dataset, same transition fit, same
    trainer seed).  Returns cell results, per-(variant, n) aggregates, the
    Spearman rank correlation between n and mean test return for the
    residuals variant, and paired comparison summaries.
    """
    spec.validate()
    work = [(n, seed) for n in spec.n_trajectories for seed in spec.seeds]
    cells, reports = [], {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, spec, n, seed) for n, seed in work]
            for fut in futures:
                c, r = fut.result()
                cells.extend(c)
                reports.update(r)
    else:
        for n, seed in work:
            c, r = _run_cell(spec, n, seed)
            cells.extend(c)
            reports.update(r)

    aggregates = []
    for n in spec.n_trajectories:
        aggregates.append(_aggregate(cells, "residuals", n))
    for n in spec.baseline_at:
        aggregates.append(_aggregate(cells, "model-only", n))

    res_aggs = [a for a in aggregates if a["variant"] == "residuals" and a["n_ok"] > 0]
    spearman = {"rho": float("nan"), "pvalue": float("nan"), "n_points": len(res_aggs)}
    if len(res_aggs) >= 2:
        rho, p = stats.spearmanr([a["n"] for a in res_aggs],
                                 [a["eval_mean"] for a in res_aggs])
        spearman = {"rho": float(rho), "pvalue": float(p), "n_points": len(res_aggs)}

    comparison = []
    for n in spec.baseline_at:
        res = {c.seed: c for c in cells
               if c.variant == "residuals" and c.n == n and c.status == "ok"}
        base = {c.seed: c for c in cells
                if c.variant == "model-only" and c.n == n and c.status == "ok"}
        shared = sorted(set(res) & set(base))
        if not shared:
            continue
        comparison.append({
            "n": n,
            "seeds": shared,
            "eval_mean_residuals": float(np.mean([res[s].final_eval for s in shared])),
            "eval_mean_model_only": float(np.mean([base[s].final_eval for s in shared])),
            "gap_mean_residuals": float(np.mean([res[s].gap for s in shared])),
            "gap_mean_model_only": float(np.mean([base[s].gap for s in shared])),
            "seed_wins_eval": sum(res[s].final_eval > base[s].final_eval for s in shared),
        })

    manifest = {
        "version": __version__,
        "spec": _spec_dict(spec),
        "spec_hash": stable_hash(_spec_dict(spec)),
        "cell_seeds": {f"{n}/{s}": derive_cell_seeds(spec.base_entropy, n, s)
                       for n, s in work},
    }
    result = SweepResult(spec, cells, reports, aggregates, spearman, comparison, manifest)
    if out_dir is not None:
        _write_sweep_outputs(result, out_dir)
    return result


def run_model_comparison(spec: SweepSpec, n: int, out_dir: str | None = None,
                         jobs: int = 1) -> SweepResult:
    """Residuals vs model-only at a single dataset size, fully paired."""
    narrowed = replace(spec, n_trajectories=(n,), baseline_at=(n,))
    return run_sample_size_sweep(narrowed, out_dir=out_dir, jobs=jobs)


def _spec_dict(spec: SweepSpec) -> dict:
    d = asdict(spec)
    d["dqn"]["hidden"] = list(spec.dqn.hidden)
    d["regression"]["hidden"] = list(spec.regression.hidden)
    return d


def _write_sweep_outputs(result: SweepResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    # no wall-clock columns: sweep outputs are byte-identical across re-runs
    lines = ["variant,n,seed,status,n_transitions,final_train,final_eval,gap,error"]
    for c in sorted(result.cells, key=lambda c: (c.variant, c.n, c.seed)):
        lines.append(f"{c.variant},{c.n},{c.seed},{c.status},{c.n_transitions},"
                     f"{c.final_train!r},{c.final_eval!r},{c.gap!r},\"{c.error}\"")
    atomic_write_text(os.path.join(out_dir, "cells.csv"), "\n".join(lines) + "\n")

    lines = ["variant,n,n_ok,eval_mean,eval_std,train_mean,gap_mean"]
    for a in result.aggregates:
        lines.append(f"{a['variant']},{a['n']},{a['n_ok']},{a['eval_mean']!r},"
                     f"{a['eval_std']!r},{a['train_mean']!r},{a['gap_mean']!r}")
    atomic_write_text(os.path.join(out_dir, "aggregate.csv"), "\n".join(lines) + "\n")

    for (variant, n, seed), rep in result.reports.items():
        rep.to_csv(os.path.join(out_dir, f"train_{variant}_n{n}_seed{seed}.csv"))

    blob = dict(result.manifest)
    blob["spearman"] = result.spearman
    blob["comparison"] = result.comparison
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(blob, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- theory suite

@dataclass
class TheoryConfig:
    """Scope of the fixed-point verification suite (1-d synthetic system)."""

    gamma: float = 0.9
    noise_std: float = 0.1
    grid_nodes: int = 401
    tol: float = 1e-10
    gh_nodes: int = 64
    contraction_pairs: int = 100
    contraction_n: int = 200
    lipschitz_draws: int = 10
    lemma_seeds: int = 10
    lemma_n: int = 200
    consistency_ns: tuple = (50, 200, 800, 3200)
    consistency_seeds: int = 10
    horizon_cap: int = 50
    seed: int = 7

    def validate(self) -> None:
        # gamma = 0 is a legal degenerate scope: contraction ratios read 0
        # and every solve collapses to the cost table
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigError("gamma must be in [0, 1)")
        if self.contraction_n not in self.consistency_ns or self.lemma_n not in self.consistency_ns:
            raise ConfigError("contraction_n and lemma_n must appear in consistency_ns")
        if max(self.lipschitz_draws, self.lemma_seeds) > self.consistency_seeds:
            raise ConfigError("draw counts cannot exceed consistency_seeds")

    @staticmethod
    def fast() -> "TheoryConfig":
        """Shrunk scope for smoke runs (seconds instead of minutes)."""
        return TheoryConfig(grid_nodes=201, contraction_pairs=30,
                            lipschitz_draws=4, lemma_seeds=4,
                            consistency_ns=(50, 200, 800), consistency_seeds=4)


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float               # slack remaining; >= 0 iff passed
    elapsed_s: float
    details: dict


@dataclass
class TheoryReport:
    checks: list
    rows: list                  # consistency rows backing several checks
    sup_q_star: float
    timings: dict
    config: dict

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self, path: str) -> None:
        """Deterministic report: wall-clock fields stay on stdout, not in files."""
        checks = []
        for c in self.checks:
            d = asdict(c)
            d.pop("elapsed_s")
            checks.append(d)
        rows = []
        for r in self.rows:
            d = asdict(r)
            d.pop("wall_ms")
            rows.append(d)
        blob = {
            "all_passed": self.all_passed,
            "sup_q_star": self.sup_q_star,
            "config": self.config,
            "checks": checks,
            "consistency_rows": rows,
        }
        atomic_write_text(path, json.dumps(blob, indent=2, sort_keys=True,
                                           default=float) + "\n")


def _delta_decay_margin(diags, gamma: float, slack: float = 1e-10) -> float:
    worst = float("inf")
    for diag in diags:
        d = diag.deltas
        if d.shape[0] < 2:
            continue
        worst = min(worst, float(np.min(gamma * d[:-1] + slack - d[1:])))
    return worst


def run_theory_suite(cfg: TheoryConfig | None = None) -> TheoryReport:
    """Verify the contraction/Lipschitz/consistency properties numerically.

    Everything runs on the 1-d synthetic system where the exact fixed point
    is computable by Gauss-Hermite quadrature.  Expensive artifacts (the
    consistency solves) are shared across checks; per-check elapsed times are
    marginal costs on top of that shared pipeline.
    """
    cfg = cfg or TheoryConfig()
    cfg.validate()
    env = Synthetic1D(cfg.noise_std)
    problem = env.make_problem(cfg.gamma)
    grid = Grid.from_space(env.space, cfg.grid_nodes)
    n_act = len(env.actions)
    checks = []
    timings = {}
    t_suite = time.perf_counter()

    t0 = time.perf_counter()
    q_star, diag_star = solve_true_fixed_point(
        env, cfg.gamma, grid, tol=cfg.tol, gh_nodes=cfg.gh_nodes)
    sup_q_star = float(np.max(np.abs(q_star.values)))
    seeds = list(range(cfg.consistency_seeds))
    rows, _, sols = consistency_curve(
        env, cfg.consistency_ns, seeds, grid, gamma=cfg.gamma, tol=cfg.tol,
        horizon_cap=cfg.horizon_cap, q_star=q_star, keep_solutions=True)
    timings["consistency_pipeline_s"] = time.perf_counter() - t0

    # contraction of all three backup families on random table pairs
    t0 = time.perf_counter()
    cell0 = sols[(cfg.contraction_n, seeds[0])]
    families = {
        "estimated": GridOperator(problem, grid, cell0["k_hat"]),
        "fullinfo": GridOperator(problem, grid, cell0["k_full"]),
        "quadrature": GridOperator(
            problem, grid, QuadratureSource(env.f_star, env.noise_std, cfg.gh_nodes)),
    }
    rng = np.random.default_rng(cfg.seed)
    pairs = [(GridQ(grid, rng.uniform(-5.0, 5.0, grid.shape + (n_act,))),
              GridQ(grid, rng.uniform(-5.0, 5.0, grid.shape + (n_act,))))
             for _ in range(cfg.contraction_pairs)]
    for fam, op in families.items():
        worst = 0.0
        for qa, qb in pairs:
            num = float(np.max(np.abs(op(qa).values - op(qb).values)))
            den = float(np.max(np.abs(qa.values - qb.values)))
            worst = max(worst, num / den)
        checks.append(CheckResult(
            f"contraction-{fam}", worst <= cfg.gamma + 1e-9,
            margin=cfg.gamma + 1e-9 - worst,
            elapsed_s=(time.perf_counter() - t0) / len(families),
            details={"max_ratio": worst, "pairs": cfg.contraction_pairs,
                     "gamma": cfg.gamma}))

    # geometric decay of value-iteration deltas across every solve performed
    t0 = time.perf_counter()
    diags = [diag_star]
    for cell in sols.values():
        diags.append(cell["diag_hat"])
        diags.append(cell["diag_full"])
    margin = _delta_decay_margin(diags, cfg.gamma)
    checks.append(CheckResult(
        "vi-delta-decay", margin >= 0.0, margin=margin,
        elapsed_s=time.perf_counter() - t0,
        details={"solves": len(diags), "slack": 1e-10}))

    # fixed points inherit the cost/dynamics Lipschitz bound
    t0 = time.perf_counter()
    bound = env.lipschitz_cost / (1.0 - cfg.gamma * env.lipschitz_f)
    ests = [estimate_lipschitz(sols[(cfg.lemma_n, s)]["q_full"])[1]
            for s in seeds[:cfg.lipschitz_draws]]
    worst = max(ests)
    checks.append(CheckResult(
        "lipschitz-fixed-point", worst <= 1.05 * bound,
        margin=1.05 * bound - worst,
        elapsed_s=time.perf_counter() - t0,
        details={"bound": bound, "slack_factor": 1.05, "max_estimate": worst,
                 "draws": cfg.lipschitz_draws}))

    # estimated-minus-true residuals equal the model error at data points
    t0 = time.perf_counter()
    ds = dataset_with_n_transitions(env, cfg.lemma_n, seeds[0],
                                    horizon_cap=cfg.horizon_cap)
    model = fit_transition_model(ds, kind="linear")
    eps_hat = compute_residuals(model, ds).residuals
    eps_true = true_noise_residuals(env, ds)
    f_star_vals = np.stack([env.f_star(ds.s[i], int(ds.a[i])) for i in range(len(ds))])
    f_hat_vals = model.predict_batch(ds.s, ds.a)
    ident_err = float(np.max(np.abs((eps_hat - eps_true) - (f_star_vals - f_hat_vals))))
    checks.append(CheckResult(
        "residual-identity", ident_err <= 1e-12, margin=1e-12 - ident_err,
        elapsed_s=time.perf_counter() - t0,
        details={"max_abs_error": ident_err, "n": cfg.lemma_n}))

    # fixed-point gap bounded by the Lipschitz-weighted kernel coupling
    t0 = time.perf_counter()
    lemma_margin = float("inf")
    lemma_rows = []
    for s in seeds[:cfg.lemma_seeds]:
        cell = sols[(cfg.lemma_n, s)]
        lhs = float(np.max(np.abs(cell["q_hat"].values - cell["q_full"].values)))
        l_hat = estimate_lipschitz(cell["q_full"])[1]
        coup = kernel_coupling(cell["k_hat"], cell["k_full"], grid, n_act)
        rhs = cfg.gamma * l_hat * coup / (1.0 - cfg.gamma)
        lemma_rows.append({"seed": s, "lhs": lhs, "rhs": rhs, "coupling": coup,
                           "lipschitz": l_hat})
        lemma_margin = min(lemma_margin, 1.1 * rhs - lhs)
    checks.append(CheckResult(
        "coupling-bound", lemma_margin >= 0.0, margin=lemma_margin,
        elapsed_s=time.perf_counter() - t0,
        details={"slack_factor": 1.1, "n": cfg.lemma_n, "rows": lemma_rows}))

    # consistency: median error decreasing in N, small at the largest N
    t0 = time.perf_counter()
    medians = {}
    for n in cfg.consistency_ns:
        medians[n] = float(np.median([r.err_hatQ_vs_Qstar for r in rows if r.N == n]))
    seq = [medians[n] for n in cfg.consistency_ns]
    drops = [a - b for a, b in zip(seq, seq[1:])]
    checks.append(CheckResult(
        "consistency-monotone", all(d > 0 for d in drops),
        margin=min(drops) if drops else float("inf"),
        elapsed_s=time.perf_counter() - t0 + timings["consistency_pipeline_s"],
        details={"medians": {str(k): v for k, v in medians.items()},
                 "seeds": cfg.consistency_seeds}))
    thresh = 0.05 * sup_q_star
    last = seq[-1]
    checks.append(CheckResult(
        "consistency-threshold", last < thresh, margin=thresh - last,
        elapsed_s=0.0,
        details={"median_at_largest_n": last, "threshold": thresh,
                 "sup_q_star": sup_q_star}))

    # greedy values can only be closer than the Q tables they come from
    t0 = time.perf_counter()
    v_margin = float("inf")
    v_star = q_star.min_values()
    for (n, s), cell in sols.items():
        err_q = float(np.max(np.abs(cell["q_hat"].values - q_star.values)))
        err_v = float(np.max(np.abs(cell["q_hat"].min_values() - v_star)))
        v_margin = min(v_margin, err_q - err_v)
    checks.append(CheckResult(
        "greedy-value-bound", v_margin >= 0.0, margin=v_margin,
        elapsed_s=time.perf_counter() - t0,
        details={"runs": len(sols)}))

    # error decomposition obeys the triangle inequality row by row
    t0 = time.perf_counter()
    tri_margin = float("inf")
    for r in rows:
        tri_margin = min(tri_margin, r.err_hatQ_vs_QstarN + r.err_QstarN_vs_Qstar
                         + 1e-12 - r.err_hatQ_vs_Qstar)
    checks.append(CheckResult(
        "error-triangle", tri_margin >= 0.0, margin=tri_margin,
        elapsed_s=time.perf_counter() - t0,
        details={"rows": len(rows), "slack": 1e-12}))

    timings["total_s"] = time.perf_counter() - t_suite
    return TheoryReport(checks=checks, rows=rows, sup_q_star=sup_q_star,
                        timings=timings, config=asdict(cfg))
