"""Brute-force reference implementations.

These deliberately avoid every helper used by the main code paths: plain
loops, no log-sum-exp shifting, no shared kernels.  They always run in
float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class OracleResult:
    oracle: np.ndarray
    main: np.ndarray
    max_abs: float
    max_rel: float
    tolerance: float
    passed: bool

    @classmethod
    def compare(cls, oracle, main, tolerance: float) -> "OracleResult":
        o = np.asarray(oracle, dtype=np.float64)
        m = np.asarray(main, dtype=np.float64)
        diff = np.abs(o - m)
        max_abs = float(diff.max()) if diff.size else 0.0
        denom = np.maximum(np.abs(o), 1e-300)
        max_rel = float((diff / denom).max()) if diff.size else 0.0
        return cls(o, m, max_abs, max_rel, tolerance, bool(max_abs <= tolerance))


class OracleOverflow(ArithmeticError):
    """The naive formula left the float64 range; the inputs are too extreme for this oracle."""


def oracle_info_nce(sim, tau: float, direction: str = "row") -> float:
    """``-(1/B) sum_i log(exp(s_ii/tau) / sum_k exp(s_ik/tau))`` by direct summation.

    ``direction="column"`` sums over the first index instead.
    """
    S = np.array(sim, dtype=np.float64)
    if direction == "column":
        S = S.T
    elif direction != "row":
        raise ValueError("direction must be 'row' or 'column'")
    B = S.shape[0]
    total = 0.0
    for i in range(B):
        try:
            num = math.exp(S[i, i] / tau)
            den = 0.0
            for k in range(B):
                den += math.exp(S[i, k] / tau)
        except OverflowError as exc:
            raise OracleOverflow(f"exp overflow at row {i}") from exc
        if not (math.isfinite(num) and math.isfinite(den)) or num == 0.0:
            raise OracleOverflow(f"exp overflow/underflow at row {i}")
        total += math.log(num / den)
    return -total / B


@dataclass
class SinkhornOracle:
    assignment: np.ndarray  # (B, C), rows sum to 1, columns to B/C
    iterations: int
    error: float
    converged: bool


def oracle_sinkhorn(
    scores,
    eps: float,
    row_targets: Optional[Sequence[float]] = None,
    col_targets: Optional[Sequence[float]] = None,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> SinkhornOracle:
    """Alternating row/column scaling of ``exp(scores/eps)`` run to convergence.

    Defaults: each row carries mass 1, each column ``B/C``.
    """
    S = np.array(scores, dtype=np.float64)
    B, C = S.shape
    r = np.ones(B) if row_targets is None else np.asarray(row_targets, dtype=np.float64)
    c = np.full(C, B / C) if col_targets is None else np.asarray(col_targets, dtype=np.float64)
    # work in the log domain so small eps stays representable
    logK = S / eps
    f = np.zeros(B)
    g = np.zeros(C)
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(B):
            row = logK[i] + g
            m = row.max()
            f[i] = math.log(r[i]) - (m + math.log(np.exp(row - m).sum()))
        for j in range(C):
            col = logK[:, j] + f
            m = col.max()
            g[j] = math.log(c[j]) - (m + math.log(np.exp(col - m).sum()))
        P = np.exp(logK + f[:, None] + g[None, :])
        err = max(np.abs(P.sum(axis=1) - r).max(), np.abs(P.sum(axis=0) - c).max())
        if err < tol:
            break
    converged = err < tol
    if not converged:
        warnings.warn(f"oracle_sinkhorn did not converge: error {err:.3e} after {it} iterations", RuntimeWarning)
    return SinkhornOracle(P, it, float(err), converged)


def oracle_mode_product(core, a, b) -> np.ndarray:
    """``out[i, k] = sum_a sum_b core[a, b, k] * A[i, a] * B[i, b]`` by explicit loops.

    ``a`` and ``b`` may be single vectors or ``(n, dim)`` batches.
    """
    G = np.asarray(core, dtype=np.float64)
    A = np.atleast_2d(np.asarray(a, dtype=np.float64))
    Bm = np.atleast_2d(np.asarray(b, dtype=np.float64))
    da, db, dk = G.shape
    n = A.shape[0]
    out = np.zeros((n, dk))
    for i in range(n):
        for x in range(da):
            for y in range(db):
                w = A[i, x] * Bm[i, y]
                for k in range(dk):
                    out[i, k] += G[x, y, k] * w
    return out
