"""Global image-text InfoNCE losses and the combined L_ita."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import autograd as ag

ROW = "row"  # anchor i against every candidate k  (v2t)
COLUMN = "column"  # candidate i against every anchor k  (t2v)


def info_nce(anchor_rows, candidate_rows, tau: float, direction: str = ROW) -> ag.Var:
    """Mean InfoNCE over the diagonal pairs of ``anchor @ candidate.T / tau``.

    ``direction="row"`` normalizes over candidates for a fixed anchor,
    ``"column"`` over anchors for a fixed candidate.
    """
    a, c = ag._wrap(anchor_rows), ag._wrap(candidate_rows)
    if a.ndim != 2 or a.shape != c.shape:
        raise ValueError(f"expected matching (B, d) inputs, got {a.shape} and {c.shape}")
    B = a.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if direction not in (ROW, COLUMN):
        raise ValueError(f"direction must be {ROW!r} or {COLUMN!r}")
    sim = (a @ c.T) * (1.0 / tau)
    logp = ag.log_softmax(sim, axis=1 if direction == ROW else 0)
    idx = np.arange(B)
    return -ag.vmean(logp[idx, idx])


@dataclass
class GlobalBatch:
    V_star: object
    T_star: object
    V_aug: object
    T_aug: object
    tau1: float = 0.07
    lambda0: float = 0.5


def global_loss(batch: GlobalBatch) -> Tuple[ag.Var, Dict[str, float]]:
    """``L_ita = (L_v2t + L_t2v)/2 + lambda0 (L_v2a + L_avt)/2``."""
    tau = batch.tau1
    l_v2t = info_nce(batch.V_star, batch.T_star, tau, ROW)
    l_t2v = info_nce(batch.V_star, batch.T_star, tau, COLUMN)
    l_v2a = info_nce(batch.V_star, batch.T_aug, tau, ROW)
    l_avt = info_nce(batch.V_aug, batch.T_star, tau, COLUMN)
    total = (l_v2t + l_t2v) * 0.5 + (l_v2a + l_avt) * (0.5 * batch.lambda0)
    parts = {
        "L_v2t": l_v2t.item(),
        "L_t2v": l_t2v.item(),
        "L_v2a": l_v2a.item(),
        "L_avt": l_avt.item(),
        "L_ita": total.item(),
    }
    return total, parts
