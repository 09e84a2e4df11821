"""Knowledge-guided category-level contrastive learning.

Topic extraction, Tucker fusion of the two modalities, attention over
knowledge entities, Sinkhorn-Knopp codes against trainable prototypes, and the
code-as-pseudo-label cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .kernels import sinkhorn

PROB_FLOOR = 1e-12


@dataclass
class TopicPair:
    t_dot: ag.Var
    v_dot: ag.Var


@dataclass
class PrototypeBank:
    J: np.ndarray
    tau4: float = 0.1
    trainable: bool = True

    def renormalize(self) -> None:
        self.J = nm.l2_normalize(self.J)


@dataclass
class ClusterCode:
    u: np.ndarray
    row_err: float
    col_err: float


def init_prototypes(C: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return nm.l2_normalize(rng.standard_normal((C, d))).astype(nm.get_dtype())


def topic_extract(v_star, t_star, mode: str = "scalar", groups: int = 8, eps: float = 1e-5) -> TopicPair:
    """``t_dot = LN(softmax(v*.t*/sqrt(d)) t*)``, ``v_dot = LN(softmax(v*.v*/sqrt(d)) t_dot)``.

    In ``"scalar"`` mode each softmax runs over one score and equals 1, so
    ``t_dot = LN(t*)`` and ``v_dot = LN(t_dot)``.  ``"sequence"`` mode splits
    the ``d`` features into ``groups`` chunks and attends chunk-to-chunk.
    Inputs are ``(B, d)`` or ``(d,)``.
    """
    v, t = ag._wrap(v_star), ag._wrap(t_star)
    if v.ndim == 1:
        v, t = v.reshape(1, -1), t.reshape(1, -1)
    B, d = v.shape
    if mode == "scalar":
        s1 = ag.softmax((v * t).sum(axis=-1, keepdims=True) * (1.0 / np.sqrt(d)), axis=-1)
        t_dot = ag.layer_norm(s1 * t, eps)
        s2 = ag.softmax((v * v).sum(axis=-1, keepdims=True) * (1.0 / np.sqrt(d)), axis=-1)
        v_dot = ag.layer_norm(s2 * t_dot, eps)
    elif mode == "sequence":
        if d % groups:
            raise ValueError("d must be divisible by groups")
        g = d // groups
        V = v.reshape(B, groups, g)
        T = t.reshape(B, groups, g)
        a1 = ag.softmax((V @ ag.transpose(T)) * (1.0 / np.sqrt(g)), axis=-1)
        t_dot = ag.layer_norm((a1 @ T).reshape(B, d), eps)
        a2 = ag.softmax((V @ ag.transpose(V)) * (1.0 / np.sqrt(g)), axis=-1)
        v_dot = ag.layer_norm((a2 @ t_dot.reshape(B, groups, g)).reshape(B, d), eps)
    else:
        raise ValueError(f"unknown topic mode {mode!r}")
    return TopicPair(t_dot=t_dot, v_dot=v_dot)


def tucker_fuse(v_dot, t_dot, core, W_o) -> ag.Var:
    """``((core x1 v_dot) x2 t_dot) x3 W_o`` for each row of the batch."""
    v, t = ag._wrap(v_dot), ag._wrap(t_dot)
    core, W_o = ag._wrap(core), ag._wrap(W_o)
    if v.ndim == 1:
        v, t = v.reshape(1, -1), t.reshape(1, -1)
    if core.ndim != 3 or core.shape[0] != v.shape[-1] or core.shape[1] != t.shape[-1]:
        raise ValueError(f"core {core.shape} does not match inputs {v.shape}, {t.shape}")
    if W_o.shape[1] != core.shape[2]:
        raise ValueError(f"W_o {W_o.shape} does not match core mode 3 ({core.shape[2]})")
    mixed = ag.einsum("abk,ia,ib->ik", core, v, t)
    return ag.einsum("ik,jk->ij", mixed, W_o)


def knowledge_fuse(Q_fused, entity_rows, tau3: float, W_sa) -> ag.Var:
    """``SA(softmax(Q . e / tau3) e)``; the self-attention sees a single vector,
    so its softmax is 1 and it reduces to the value map ``W_sa``."""
    q, e = ag._wrap(Q_fused), ag._wrap(entity_rows)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    if not tau3 > 0:
        raise ValueError("tau3 must be > 0")
    attn = ag.softmax((q @ e.T) * (1.0 / tau3), axis=-1)
    pooled = attn @ e
    B, dq = pooled.shape
    seq = pooled.reshape(B, 1, dq)
    self_w = ag.softmax((seq @ ag.transpose(seq)) * (1.0 / np.sqrt(dq)), axis=-1)
    return (self_w @ (seq @ ag._wrap(W_sa))).reshape(B, dq)


def sinkhorn_assign(features, J, epsilon: float = 0.05, iters: int = 3) -> ClusterCode:
    """Equipartitioned soft codes for ``features @ J.T`` (no gradient).

    Rows of ``u`` sum to 1; columns approach ``B/C``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    if iters < 1:
        raise ValueError("need at least one Sinkhorn iteration")
    f = np.asarray(features.data if isinstance(features, ag.Var) else features, dtype=np.float64)
    Jm = np.asarray(J.data if isinstance(J, ag.Var) else J, dtype=np.float64)
    scores = f @ Jm.T
    nm.check_finite(scores, "Sinkhorn scores")
    u = sinkhorn(scores, epsilon, iters)
    B, C = u.shape
    return ClusterCode(
        u=u,
        row_err=float(np.max(np.abs(u.sum(axis=1) - 1.0))),
        col_err=float(np.max(np.abs(u.sum(axis=0) - B / C))),
    )


def prototype_probs(x, J, tau4: float = 0.1) -> ag.Var:
    """Softmax over prototypes of ``cos(x, j_c) / tau4`` (prototypes assumed unit-norm)."""
    x = ag._wrap(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if np.any(np.linalg.norm(x.data, axis=-1) == 0):
        raise ValueError("zero-norm feature has no direction")
    xh = ag.l2_normalize(x, axis=-1)
    return ag.softmax((xh @ ag._wrap(J).T) * (1.0 / tau4), axis=-1)


def category_loss(codes, P_v, P_t) -> ag.Var:
    """``-(1/2B) sum_i sum_c u_ic (log p^v_ic + log p^t_ic)`` with a 1e-12 floor."""
    u = np.asarray(codes.u if isinstance(codes, ClusterCode) else codes)
    P_v, P_t = ag._wrap(P_v), ag._wrap(P_t)
    if u.shape != P_v.shape or u.shape != P_t.shape:
        raise ValueError(f"shape mismatch {u.shape}, {P_v.shape}, {P_t.shape}")
    B = u.shape[0]
    u = u.astype(P_v.data.dtype)
    lv = ag.log(ag.clamp_min(P_v, PROB_FLOOR))
    lt = ag.log(ag.clamp_min(P_t, PROB_FLOOR))
    return ((lv + lt) * u).sum() * (-1.0 / (2 * B))


def prototype_entropy(P: np.ndarray) -> float:
    """Entropy of the batch-mean prototype distribution (usage spread)."""
    m = np.asarray(P, dtype=np.float64).mean(axis=0)
    m = m[m > 0]
    return float(-(m * np.log(m)).sum())


def fuse_and_assign(v_dot, t_dot, core, W_o, entity_rows, tau3, W_sa) -> Tuple[ag.Var, ag.Var]:
    """Fused ``vkt`` feature and its unit-normalized version used for scoring."""
    q = tucker_fuse(v_dot, t_dot, core, W_o)
    vkt = knowledge_fuse(q, entity_rows, tau3, W_sa)
    return vkt, ag.l2_normalize(vkt, axis=-1)
