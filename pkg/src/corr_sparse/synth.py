"""Seeded generation of dictionaries, correlated row-sparse signals and noise.

Everything is a pure function of its spec (seed included), so trials can be
generated in parallel workers and still reproduce bit-identically. Row
correlation follows a stationary AR(1) process: a row with coefficient beta
has covariance Toeplitz(beta^|a-b|) across its entries.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateReference, InvalidSchedule
from .model import MMVProblem


@dataclass(frozen=True)
class MmvGenSpec:
    """Generative description of one static MMV instance."""

    n: int
    m: int
    k: int
    l: int
    corr_beta: float = 0.0
    snr_db: Optional[float] = None
    row_amp: str = "unit_gauss"
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.n <= self.m and 0 <= self.k <= self.m and self.l >= 1):
            raise ValueError("require 1 <= n <= m, 0 <= k <= m, l >= 1")
        if not 0.0 <= self.corr_beta <= 0.999:
            raise ValueError("corr_beta must lie in [0, 0.999]")
        if self.row_amp not in ("unit_gauss", "uniform_1_3"):
            raise ValueError(f"unknown row_amp {self.row_amp!r}")


def _default_events():
    # 15 rows from column 1; +10 at columns 16 and 31; 5 removed at column 26
    return ((1, 15, 0), (16, 10, 0), (26, 0, 5), (31, 10, 0))


@dataclass(frozen=True)
class ScheduleSpec:
    """Time-varying support schedule as (column, rows_added, rows_removed) events.

    Columns are 1-based. Added rows start at the event column and stay active
    for ``row_duration`` columns unless removed earlier; removals deactivate
    the longest-active rows first (draw order breaks ties). The defaults
    reproduce the benchmark schedule: T = 50 with 15 initial rows, two
    batches of 10 added at columns 16 and 31, and 5 rows zeroed from
    column 26.
    """

    n: int = 60
    m: int = 256
    t_total: int = 50
    events: Tuple[Tuple[int, int, int], ...] = field(default_factory=_default_events)
    row_duration: int = 20
    corr_range: Tuple[float, float] = (0.7, 0.99)
    snr_db: Optional[float] = 20.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(tuple(e) for e in self.events))
        if self.t_total < 1 or self.row_duration < 1:
            raise ValueError("t_total and row_duration must be >= 1")
        cols = [e[0] for e in self.events]
        if cols != sorted(cols):
            raise ValueError("events must be sorted by column")
        for col, added, removed in self.events:
            if not 1 <= col <= self.t_total:
                raise ValueError(f"event column {col} outside 1..{self.t_total}")
            if added < 0 or removed < 0:
                raise ValueError("event counts must be nonnegative")


@dataclass(frozen=True)
class GroundTruth:
    """Generator-side record of the signal behind an instance."""

    x_true: np.ndarray
    support_per_column: tuple
    beta_per_row: np.ndarray

    def __post_init__(self):
        x = np.array(self.x_true, dtype=float)
        x.setflags(write=False)
        b = np.array(self.beta_per_row, dtype=float)
        b.setflags(write=False)
        object.__setattr__(self, "x_true", x)
        object.__setattr__(self, "beta_per_row", b)
        object.__setattr__(
            self, "support_per_column", tuple(frozenset(s) for s in self.support_per_column)
        )

    @property
    def support(self) -> frozenset:
        """Union support; for static instances every column shares it."""
        out = frozenset()
        for s in self.support_per_column:
            out |= s
        return out


def gen_dictionary(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian random dictionary with unit-norm columns."""
    phi = rng.standard_normal((n, m))
    return phi / np.linalg.norm(phi, axis=0)


def gen_correlated_rows(k: int, l: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw k rows from N(0, Toeplitz(beta^|a-b|)) via the AR(1) recursion."""
    if not abs(beta) < 1:
        raise ValueError("|beta| must be < 1")
    e = rng.standard_normal((k, l))
    rows = np.empty((k, l))
    if l:
        rows[:, 0] = e[:, 0]
        scale = np.sqrt(1.0 - beta * beta)
        for t in range(1, l):
            rows[:, t] = beta * rows[:, t - 1] + scale * e[:, t]
    return rows


def add_noise_snr(y_clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise scaled so the realized SNR hits the target exactly."""
    y_clean = np.asarray(y_clean, dtype=float)
    if snr_db is None or np.isinf(snr_db):
        return y_clean.copy()
    sig = np.linalg.norm(y_clean)
    if sig == 0.0:
        raise DegenerateReference("cannot set an SNR against a zero signal")
    noise = rng.standard_normal(y_clean.shape)
    alpha = sig / (np.linalg.norm(noise) * 10.0 ** (snr_db / 20.0))
    return y_clean + alpha * noise


def noise_variance_for_snr(y_clean: np.ndarray, snr_db: float) -> float:
    """Per-entry noise variance implied by a target SNR on this signal."""
    y_clean = np.asarray(y_clean, dtype=float)
    return float(np.sum(y_clean**2)) / (y_clean.size * 10.0 ** (snr_db / 10.0))


def gen_mmv_instance(spec: MmvGenSpec):
    """Build one (MMVProblem, GroundTruth) pair from a spec.

    Noiseless specs set the problem's lam to 0; noisy specs set it to the
    realized per-entry noise variance so "true noise variance" solver modes
    can read it straight off the problem.
    """
    rng = np.random.default_rng(spec.seed)
    phi = gen_dictionary(spec.n, spec.m, rng)
    support = np.sort(rng.choice(spec.m, size=spec.k, replace=False))
    x = np.zeros((spec.m, spec.l))
    rows = gen_correlated_rows(spec.k, spec.l, spec.corr_beta, rng)
    if spec.row_amp == "uniform_1_3":
        rows = rows * rng.uniform(1.0, 3.0, size=(spec.k, 1))
    x[support] = rows
    y_clean = phi @ x
    if spec.snr_db is None:
        y = y_clean
        lam = 0.0
    else:
        y = add_noise_snr(y_clean, spec.snr_db, rng)
        lam = noise_variance_for_snr(y_clean, spec.snr_db)
    beta = np.zeros(spec.m)
    beta[support] = spec.corr_beta
    truth = GroundTruth(
        x_true=x,
        support_per_column=[set(support.tolist())] * spec.l,
        beta_per_row=beta,
    )
    return MMVProblem(phi=phi, y_mat=y, lam=lam), truth


def schedule_segments(spec: ScheduleSpec, rng: np.random.Generator):
    """Resolve a schedule into per-row activation segments.

    Returns a list of (row_index, start_col, end_col) with 1-based inclusive
    columns. Rows are drawn without replacement from the currently inactive
    indices; removals hit the longest-active rows, draw order breaking ties.
    """
    segments = []  # (row, start, planned_end) in draw order
    active = []  # indices into segments
    taken = np.zeros(spec.m, dtype=bool)
    for col, added, removed in spec.events:
        if removed:
            live = [s for s in active if segments[s][2] >= col]
            live.sort(key=lambda s: (segments[s][1], s))
            if removed > len(live):
                raise InvalidSchedule(
                    f"column {col} removes {removed} rows but only {len(live)} are active"
                )
            for s in live[:removed]:
                row, start, _ = segments[s]
                segments[s] = (row, start, col - 1)
                active.remove(s)
        if added:
            free = np.flatnonzero(~taken)
            if added > free.size:
                raise InvalidSchedule(f"column {col} adds {added} rows but only {free.size} are free")
            picks = rng.choice(free, size=added, replace=False)
            for row in picks:
                taken[row] = True
                end = min(col + spec.row_duration - 1, spec.t_total)
                segments.append((int(row), col, end))
                active.append(len(segments) - 1)
        active = [s for s in active if segments[s][2] >= col]
    return segments


def gen_timevarying_instance(spec: ScheduleSpec):
    """Generate a time-varying support instance: (phi, y_mat N x T, GroundTruth)."""
    rng = np.random.default_rng(spec.seed)
    phi = gen_dictionary(spec.n, spec.m, rng)
    segments = schedule_segments(spec, rng)
    x = np.zeros((spec.m, spec.t_total))
    beta = np.zeros(spec.m)
    lo, hi = spec.corr_range
    for row, start, end in segments:
        b = rng.uniform(lo, hi)
        beta[row] = b
        x[row, start - 1 : end] = gen_correlated_rows(1, end - start + 1, b, rng)[0]
    support_per_column = [
        set(np.flatnonzero(x[:, t] != 0.0).tolist()) for t in range(spec.t_total)
    ]
    y_clean = phi @ x
    if spec.snr_db is None:
        y = y_clean
    else:
        y = add_noise_snr(y_clean, spec.snr_db, rng)
    truth = GroundTruth(x_true=x, support_per_column=support_per_column, beta_per_row=beta)
    return phi, y, truth


def active_counts(truth: GroundTruth) -> np.ndarray:
    """Number of active rows at each column."""
    return np.array([len(s) for s in truth.support_per_column])


def export_instance(out_dir: str, problem: MMVProblem, truth: Optional[GroundTruth] = None):
    """Write an instance as a directory of CSV files plus meta.json."""
    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "phi.csv"), problem.phi, delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out_dir, "y.csv"), problem.y_mat, delimiter=",", fmt="%.17g")
    meta = {
        "n": problem.n,
        "m": problem.m,
        "l": problem.l,
        "lambda": problem.lam,
    }
    if truth is not None:
        np.savetxt(
            os.path.join(out_dir, "x_true.csv"), truth.x_true, delimiter=",", fmt="%.17g"
        )
        meta["beta_per_row"] = truth.beta_per_row.tolist()
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def import_instance(in_dir: str):
    """Read an instance directory back; returns (problem, truth_or_None)."""
    with open(os.path.join(in_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    phi = np.loadtxt(os.path.join(in_dir, "phi.csv"), delimiter=",", ndmin=2)
    y = np.loadtxt(os.path.join(in_dir, "y.csv"), delimiter=",", ndmin=2)
    problem = MMVProblem(phi=phi, y_mat=y, lam=float(meta.get("lambda", 0.0)))
    truth = None
    x_path = os.path.join(in_dir, "x_true.csv")
    if os.path.exists(x_path):
        x_true = np.loadtxt(x_path, delimiter=",", ndmin=2)
        support = [
            set(np.flatnonzero(x_true[:, t] != 0.0).tolist()) for t in range(x_true.shape[1])
        ]
        beta = np.asarray(meta.get("beta_per_row", np.zeros(problem.m)), dtype=float)
        truth = GroundTruth(x_true=x_true, support_per_column=support, beta_per_row=beta)
    return problem, truth
