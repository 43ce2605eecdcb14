"""Time-varying support recovery as a concatenation of MMV problems.

A long measurement sequence is split into consecutive windows; within each
window the support is treated as constant and the window is solved as an
independent MMV problem (fresh hyperparameters, no information carried
across windows). Columns where the support actually changes mid-window
violate that assumption; they are left in deliberately, since the point of
the windowed approximation is to measure how well it survives them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CorrSparseError
from .model import MMVProblem
from .sbl import SblOptions, msbl_solve, tsbl_solve

SOLVERS = {"tsbl": tsbl_solve, "msbl": msbl_solve}


@dataclass(frozen=True)
class WindowPlan:
    """Partition of columns 0..t_total-1 into consecutive windows."""

    t_total: int
    window_len: int
    boundaries: tuple  # ((start, end), ...) half-open column ranges

    def __len__(self):
        return len(self.boundaries)


def window_split(t_total: int, window_len: int) -> WindowPlan:
    """Consecutive non-overlapping windows; the last one may be shorter."""
    if window_len < 1 or t_total < 1:
        raise ValueError("t_total and window_len must be >= 1")
    bounds = tuple(
        (start, min(start + window_len, t_total)) for start in range(0, t_total, window_len)
    )
    return WindowPlan(t_total=t_total, window_len=window_len, boundaries=bounds)


def solve_windows(
    phi: np.ndarray,
    y_mat: np.ndarray,
    plan: WindowPlan,
    solver: str = "tsbl",
    opts: Optional[SblOptions] = None,
    lam: float = 0.0,
):
    """Solve each window independently and stitch the estimates column-wise.

    Returns ``(x_hat, diagnostics)`` where ``x_hat`` is M x T and
    ``diagnostics`` holds one record per window (iterations, convergence,
    error text for windows whose solve failed; failed windows contribute
    zero columns).
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; expected one of {sorted(SOLVERS)}")
    solve = SOLVERS[solver]
    phi = np.asarray(phi, dtype=float)
    y_mat = np.asarray(y_mat, dtype=float)
    if y_mat.shape[1] != plan.t_total:
        raise ValueError("plan does not match the number of measurement columns")
    x_hat = np.zeros((phi.shape[1], plan.t_total))
    diagnostics = []
    for start, end in plan.boundaries:
        record = {"start": start, "end": end, "failed": False, "error": None}
        try:
            problem = MMVProblem(phi=phi, y_mat=y_mat[:, start:end], lam=lam)
            est = solve(problem, opts)
            x_hat[:, start:end] = est.x_mat
            record["iterations"] = est.iterations
            record["converged"] = est.converged
        except CorrSparseError as exc:
            record["failed"] = True
            record["error"] = str(exc)
        diagnostics.append(record)
    return x_hat, diagnostics


def per_column_nmse(x_hat: np.ndarray, x_true: np.ndarray) -> np.ndarray:
    """Columnwise ||X_hat_t - X_t||^2 / ||X_t||^2.

    An all-zero true column scores 0 when the estimate is also zero there and
    inf (sentinel) otherwise.
    """
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    x_true = np.atleast_2d(np.asarray(x_true, dtype=float))
    if x_hat.shape != x_true.shape:
        raise ValueError("shape mismatch")
    err = np.sum((x_hat - x_true) ** 2, axis=0)
    ref = np.sum(x_true**2, axis=0)
    out = np.empty(x_true.shape[1])
    zero_ref = ref == 0.0
    out[~zero_ref] = err[~zero_ref] / ref[~zero_ref]
    out[zero_ref] = np.where(err[zero_ref] == 0.0, 0.0, np.inf)
    return out
