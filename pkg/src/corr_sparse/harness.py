"""Seeded experiment harness: protocol runners, CSV emission, SVG plots.

Every trial's instance seed derives from
``(master_seed, experiment, sweep point, trial)`` through SHA-256, so results
reproduce bit-identically across runs and worker counts, and adding an
algorithm to the list never changes the instances other algorithms see.
Trials run in a process pool; records aggregate in deterministic
(sweep point, trial, algorithm) order regardless of completion order.

Wall-clock timings are inherently nondeterministic, so they go to a separate
``timings.csv``; every other CSV is byte-stable for a fixed config and seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import CorrSparseError
from .model import (
    MMVProblem,
    NMSE_TOL_NOISELESS,
    NMSE_TOL_NOISY,
    nmse,
    trial_failure,
)
from .reweighted import (
    ReweightOptions,
    group_lasso_solve,
    rw_l1_candes_solve,
    rw_l1_sbl_solve,
    rw_l2_solve,
)
from .sbl import SblOptions, msbl_solve, tsbl_solve
from .svgplot import bar_chart, line_chart
from .synth import MmvGenSpec, ScheduleSpec, gen_mmv_instance, gen_timevarying_instance
from .windows import per_column_nmse, solve_windows, window_split

ALGORITHMS = (
    "tsbl",
    "msbl",
    "group_lasso",
    "rw_l2_plain",
    "rw_l2_md",
    "rw_l1_sbl",
    "rw_l1_msbl",
    "rw_l1_candes",
    "rw_l1_md_true_b",
    "rw_l1_md_learned_b",
)

EXPERIMENTS = ("fig1", "fig2", "fig3", "sweep", "single")

TRIAL_COLUMNS = (
    "experiment",
    "algo",
    "trial",
    "seed",
    "l",
    "beta",
    "window_len",
    "failure",
    "nmse",
    "iterations",
)


def default_threads() -> int:
    env = os.environ.get("CORR_SPARSE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass
class ExperimentConfig:
    """One harness run: protocol, algorithms, scale, seed, output location."""

    experiment: str = "fig1"
    algos: tuple = ()
    trials: int = 0  # 0 = experiment default
    master_seed: int = 0
    out_dir: str = "results"
    threads: int = 0  # 0 = default_threads()
    window_lens: tuple = (2, 5)
    gen: dict = field(default_factory=dict)
    solver_opts: dict = field(default_factory=dict)
    algo: str = "tsbl"  # for `single`
    instance_dir: str = ""  # for `single`: import instead of generating

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        self.algos = tuple(self.algos)
        for a in self.algos:
            if a not in ALGORITHMS:
                raise ValueError(f"unknown algorithm id {a!r}; known: {ALGORITHMS}")
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm id {self.algo!r}")
        if self.trials < 0:
            raise ValueError("trials must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def resolved_trials(self) -> int:
        if self.trials:
            return self.trials
        return 20 if self.experiment == "fig3" else 100

    def resolved_threads(self) -> int:
        return self.threads if self.threads > 0 else default_threads()

    def resolved_algos(self) -> tuple:
        if self.algos:
            return self.algos
        if self.experiment == "fig2":
            return ("rw_l1_sbl", "rw_l1_msbl", "rw_l1_candes", "rw_l1_md_true_b")
        if self.experiment == "fig3":
            return ("tsbl", "msbl")
        return ("tsbl", "msbl", "group_lasso")


def seed_for(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and arbitrary labels."""
    text = "|".join([str(int(master_seed))] + [repr(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _toeplitz_beta(beta: float, l: int) -> np.ndarray:
    return scipy.linalg.toeplitz(beta ** np.arange(l))


def solve_with(algo: str, problem: MMVProblem, beta: float, solver_opts: dict):
    """Dispatch one algorithm id onto a problem; beta feeds true-B variants."""
    sbl_kw = dict(solver_opts.get("sbl", {}))
    rw_kw = dict(solver_opts.get("reweight", {}))
    if algo in ("tsbl", "msbl"):
        if "lambda_mode" not in sbl_kw:
            sbl_kw["lambda_mode"] = "noiseless_floor" if problem.lam == 0 else "fixed"
        opts = SblOptions(**sbl_kw)
        return (tsbl_solve if algo == "tsbl" else msbl_solve)(problem, opts)
    opts = ReweightOptions(**rw_kw)
    if algo == "group_lasso":
        return group_lasso_solve(problem, opts)
    if algo == "rw_l2_plain":
        return rw_l2_solve(problem, "lq_norm", opts)
    if algo == "rw_l2_md":
        return rw_l2_solve(problem, "mahalanobis", opts)
    if algo == "rw_l1_sbl":
        return rw_l1_sbl_solve(problem, opts)
    if algo == "rw_l1_msbl":
        return rw_l1_sbl_solve(problem, dataclasses.replace(opts, b_source="identity"))
    if algo == "rw_l1_candes":
        return rw_l1_candes_solve(problem, "l2_norm", opts)
    if algo == "rw_l1_md_true_b":
        return rw_l1_candes_solve(
            problem, "md_true_b", opts, b_true=_toeplitz_beta(beta, problem.l)
        )
    if algo == "rw_l1_md_learned_b":
        return rw_l1_candes_solve(problem, "md_learned_b", opts)
    raise ValueError(f"unknown algorithm id {algo!r}")


def _static_task(payload: dict):
    """One (sweep point, trial): generate the instance, run every algorithm."""
    spec = MmvGenSpec(**payload["gen"])
    problem, truth = gen_mmv_instance(spec)
    nmse_tol = NMSE_TOL_NOISELESS if spec.snr_db is None else NMSE_TOL_NOISY
    records = []
    timings = []
    for algo in payload["algos"]:
        t0 = time.perf_counter()
        try:
            est = solve_with(algo, problem, spec.corr_beta, payload["solver_opts"])
            err = nmse(est.x_mat, truth.x_true)
            fail = trial_failure(est.x_mat, truth.x_true, nmse_tol=nmse_tol)
            iters = est.iterations
            cost_ok = _trace_nonincreasing(est.cost_trace) if algo in ("tsbl", "msbl") else True
        except CorrSparseError:
            err, fail, iters, cost_ok = float("nan"), True, 0, True
        ms = int(round(1000 * (time.perf_counter() - t0)))
        records.append(
            {
                "experiment": payload["experiment"],
                "algo": algo,
                "trial": payload["trial"],
                "seed": spec.seed,
                "l": spec.l,
                "beta": spec.corr_beta,
                "window_len": "",
                "failure": int(fail),
                "nmse": err,
                "iterations": iters,
                "cost_monotone": bool(cost_ok),
            }
        )
        timings.append(ms)
    return records, timings


def _trace_nonincreasing(trace, slack: float = 1e-9) -> bool:
    trace = np.asarray(trace)
    if trace.size < 2:
        return True
    return bool(np.all(np.diff(trace) <= slack))


def _tv_task(payload: dict):
    """One fig3 trial: all (solver, window length) combinations."""
    spec = ScheduleSpec(**payload["gen"])
    phi, y_mat, truth = gen_timevarying_instance(spec)
    sbl_kw = dict(payload["solver_opts"].get("sbl", {}))
    sbl_kw.setdefault("lambda_mode", "em_update")
    opts = SblOptions(**sbl_kw)
    records = []
    timings = []
    curves = {}
    for algo in payload["algos"]:
        for wlen in payload["window_lens"]:
            plan = window_split(spec.t_total, wlen)
            t0 = time.perf_counter()
            x_hat, diags = solve_windows(phi, y_mat, plan, algo, opts)
            ms = int(round(1000 * (time.perf_counter() - t0)))
            col = per_column_nmse(x_hat, truth.x_true)
            err = nmse(x_hat, truth.x_true)
            records.append(
                {
                    "experiment": "fig3",
                    "algo": algo,
                    "trial": payload["trial"],
                    "seed": spec.seed,
                    "l": wlen,
                    "beta": float(np.mean(spec.corr_range)),
                    "window_len": wlen,
                    "failure": int(err > NMSE_TOL_NOISY),
                    "nmse": err,
                    "iterations": int(sum(d.get("iterations", 0) for d in diags)),
                    "cost_monotone": True,
                }
            )
            timings.append(ms)
            curves[(algo, wlen)] = col
    return records, timings, curves


def _run_pool(task_fn, payloads, threads):
    if threads <= 1:
        return [task_fn(p) for p in payloads]
    results = [None] * len(payloads)
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(task_fn, p): i for i, p in enumerate(payloads)}
        for fut, i in futures.items():
            results[i] = fut.result()
    return results


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def write_csv(path: str, columns: Sequence[str], rows: Sequence[dict]):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row.get(c, "")) for c in columns) + "\n")


def _write_trials(out_dir, records, timings):
    write_csv(os.path.join(out_dir, "trials.csv"), TRIAL_COLUMNS, records)
    timing_rows = [
        {"experiment": r["experiment"], "algo": r["algo"], "trial": r["trial"], "runtime_ms": t}
        for r, t in zip(records, timings)
    ]
    write_csv(
        os.path.join(out_dir, "timings.csv"),
        ("experiment", "algo", "trial", "runtime_ms"),
        timing_rows,
    )


def failure_rates(records) -> dict:
    """(algo, beta, l) -> failure rate over the matching records."""
    counts = {}
    for r in records:
        key = (r["algo"], r["beta"], r["l"])
        tot, bad = counts.get(key, (0, 0))
        counts[key] = (tot + 1, bad + r["failure"])
    return {k: bad / tot for k, (tot, bad) in counts.items()}


@dataclass
class ExperimentResult:
    records: list
    rates: dict
    extra: dict = field(default_factory=dict)


def _static_payloads(config, experiment, points, gen_for_point):
    payloads = []
    solver_opts = config.solver_opts
    algos = config.resolved_algos()
    for point in points:
        for trial in range(config.resolved_trials()):
            seed = seed_for(config.master_seed, experiment, point, trial)
            payloads.append(
                {
                    "experiment": experiment,
                    "trial": trial,
                    "gen": gen_for_point(point, seed),
                    "algos": algos,
                    "solver_opts": solver_opts,
                }
            )
    return payloads


def _collect_static(config, payloads):
    out = _run_pool(_static_task, payloads, config.resolved_threads())
    records = [r for recs, _ in out for r in recs]
    timings = [t for _, ts in out for t in ts]
    return records, timings


def run_fig1(config: ExperimentConfig) -> ExperimentResult:
    """Failure rate vs number of measurement vectors, at zero and high correlation."""
    betas = (0.0, 0.9)
    ls = (1, 2, 3, 4)
    base = {"n": 25, "m": 125, "k": 12}
    base.update(config.gen)
    points = [(b, l) for b in betas for l in ls]

    def gen_for_point(point, seed):
        beta, l = point
        return dict(base, l=l, corr_beta=beta, snr_db=None, seed=seed)

    payloads = _static_payloads(config, "fig1", points, gen_for_point)
    records, timings = _collect_static(config, payloads)
    rates = failure_rates(records)

    out_dir = config.out_dir
    _write_trials(out_dir, records, timings)
    algos = config.resolved_algos()
    rate_rows = [
        {
            "experiment": "fig1",
            "algo": a,
            "beta": beta,
            "l": l,
            "trials": config.resolved_trials(),
            "failure_rate": rates[(a, beta, l)],
        }
        for beta in betas
        for l in ls
        for a in algos
    ]
    write_csv(
        os.path.join(out_dir, "failure_rates.csv"),
        ("experiment", "algo", "beta", "l", "trials", "failure_rate"),
        rate_rows,
    )
    for beta, tag in ((0.0, "corr0"), (0.9, "corr09")):
        series = [
            (a, list(ls), [rates[(a, beta, l)] for l in ls]) for a in algos
        ]
        svg = line_chart(
            series,
            title=f"Failure rate vs L (correlation {beta:g})",
            xlabel="measurement vectors L",
            ylabel="failure rate",
            ylim=(0.0, 1.0),
        )
        with open(os.path.join(out_dir, f"fig1_{tag}.svg"), "w", encoding="utf-8") as fh:
            fh.write(svg)
    return ExperimentResult(records=records, rates=rates)


def run_fig2(config: ExperimentConfig) -> ExperimentResult:
    """Reweighted-l1 family at L=4 and correlation 0.9, noiseless."""
    base = {"n": 25, "m": 125, "k": 12}
    base.update(config.gen)
    point = (0.9, 4)

    def gen_for_point(p, seed):
        beta, l = p
        return dict(base, l=l, corr_beta=beta, snr_db=None, seed=seed)

    payloads = _static_payloads(config, "fig2", [point], gen_for_point)
    records, timings = _collect_static(config, payloads)
    rates = failure_rates(records)

    out_dir = config.out_dir
    _write_trials(out_dir, records, timings)
    algos = config.resolved_algos()
    rate_rows = [
        {
            "experiment": "fig2",
            "algo": a,
            "beta": 0.9,
            "l": 4,
            "trials": config.resolved_trials(),
            "failure_rate": rates[(a, 0.9, 4)],
        }
        for a in algos
    ]
    write_csv(
        os.path.join(out_dir, "failure_rates.csv"),
        ("experiment", "algo", "beta", "l", "trials", "failure_rate"),
        rate_rows,
    )
    svg = bar_chart(
        list(algos),
        [rates[(a, 0.9, 4)] for a in algos],
        title="Failure rates, reweighted-l1 family (L=4, correlation 0.9)",
        ylabel="failure rate",
        ylim=(0.0, 1.0),
    )
    with open(os.path.join(out_dir, "fig2.svg"), "w", encoding="utf-8") as fh:
        fh.write(svg)
    return ExperimentResult(records=records, rates=rates)


def run_fig3(config: ExperimentConfig) -> ExperimentResult:
    """Time-varying support benchmark: windowed solvers, per-column error."""
    gen = dict(config.gen)
    algos = config.resolved_algos()
    window_lens = tuple(config.window_lens)
    payloads = []
    for trial in range(config.resolved_trials()):
        seed = seed_for(config.master_seed, "fig3", trial)
        payloads.append(
            {
                "trial": trial,
                "gen": dict(gen, seed=seed),
                "algos": algos,
                "window_lens": window_lens,
                "solver_opts": config.solver_opts,
            }
        )
    out = _run_pool(_tv_task, payloads, config.resolved_threads())
    records = [r for recs, _, _ in out for r in recs]
    timings = [t for _, ts, _ in out for t in ts]

    t_total = ScheduleSpec(**dict(gen, seed=0)).t_total
    mean_curves = {}
    for algo in algos:
        for wlen in window_lens:
            acc = np.zeros(t_total)
            for _, _, curves in out:
                acc += curves[(algo, wlen)]
            mean_curves[(algo, wlen)] = acc / len(out)

    out_dir = config.out_dir
    _write_trials(out_dir, records, timings)
    series_keys = [(a, w) for a in algos for w in window_lens]
    rows = [
        dict(
            {"column": t + 1},
            **{f"{a}_w{w}": mean_curves[(a, w)][t] for a, w in series_keys},
        )
        for t in range(t_total)
    ]
    write_csv(
        os.path.join(out_dir, "percolumn_nmse.csv"),
        ["column"] + [f"{a}_w{w}" for a, w in series_keys],
        rows,
    )
    svg = line_chart(
        [
            (f"{a} (window {w})", list(range(1, t_total + 1)), mean_curves[(a, w)].tolist())
            for a, w in series_keys
        ],
        title="Per-column NMSE, windowed recovery",
        xlabel="column",
        ylabel="mean NMSE",
        logy=True,
    )
    with open(os.path.join(out_dir, "fig3.svg"), "w", encoding="utf-8") as fh:
        fh.write(svg)
    rates = failure_rates(records)
    return ExperimentResult(records=records, rates=rates, extra={"mean_curves": mean_curves})


def run_sweep(config: ExperimentConfig) -> ExperimentResult:
    """Ad-hoc grid over correlation and L with configurable sizes."""
    gen = dict(config.gen)
    betas = tuple(gen.pop("betas", (0.0, 0.9)))
    ls = tuple(gen.pop("ls", (1, 2, 3, 4)))
    base = {"n": 25, "m": 125, "k": 12}
    base.update(gen)
    points = [(b, l) for b in betas for l in ls]

    def gen_for_point(point, seed):
        beta, l = point
        return dict(base, l=l, corr_beta=beta, seed=seed)

    payloads = _static_payloads(config, "sweep", points, gen_for_point)
    records, timings = _collect_static(config, payloads)
    rates = failure_rates(records)
    out_dir = config.out_dir
    _write_trials(out_dir, records, timings)
    algos = config.resolved_algos()
    rate_rows = [
        {
            "experiment": "sweep",
            "algo": a,
            "beta": beta,
            "l": l,
            "trials": config.resolved_trials(),
            "failure_rate": rates[(a, beta, l)],
        }
        for beta in betas
        for l in ls
        for a in algos
    ]
    write_csv(
        os.path.join(out_dir, "failure_rates.csv"),
        ("experiment", "algo", "beta", "l", "trials", "failure_rate"),
        rate_rows,
    )
    return ExperimentResult(records=records, rates=rates)


def run_single(config: ExperimentConfig) -> dict:
    """Solve one instance with one algorithm and dump the full diagnostics."""
    from .synth import export_instance, import_instance  # local to avoid cycle noise

    if config.instance_dir:
        problem, truth = import_instance(config.instance_dir)
        beta = float(truth.beta_per_row.max()) if truth is not None else 0.0
    else:
        gen = dict({"n": 25, "m": 125, "k": 12, "l": 4}, **config.gen)
        gen.setdefault("seed", seed_for(config.master_seed, "single", 0))
        spec = MmvGenSpec(**gen)
        problem, truth = gen_mmv_instance(spec)
        beta = spec.corr_beta
    est = solve_with(config.algo, problem, beta, config.solver_opts)

    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "x_hat.csv"), est.x_mat, delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out_dir, "gamma.csv"), est.hyper.gamma, delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out_dir, "b.csv"), est.hyper.b, delimiter=",", fmt="%.17g")
    np.savetxt(
        os.path.join(out_dir, "cost_trace.csv"), est.cost_trace, delimiter=",", fmt="%.17g"
    )
    summary = {
        "algo": config.algo,
        "converged": bool(est.converged),
        "iterations": int(est.iterations),
        "support": [int(i) for i in est.support],
        "lambda": float(est.hyper.lam),
    }
    if truth is not None:
        summary["nmse"] = nmse(est.x_mat, truth.x_true)
        summary["failure"] = bool(
            trial_failure(
                est.x_mat,
                truth.x_true,
                nmse_tol=NMSE_TOL_NOISELESS if problem.lam == 0 else NMSE_TOL_NOISY,
            )
        )
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


RUNNERS = {
    "fig1": run_fig1,
    "fig2": run_fig2,
    "fig3": run_fig3,
    "sweep": run_sweep,
}
