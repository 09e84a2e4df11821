"""Token-knowledge-patch alignment: cross-modal attention and weighted local InfoNCE."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from . import autograd as ag


def cross_modal_attend(local_feats, knowledge_rows, Q, K, V_mat) -> Tuple[ag.Var, ag.Var]:
    """Each local feature attends over the knowledge rows.

    ``attn[j, k] = softmax_k((p_j Q) . (e_k K) / sqrt(d))`` and
    ``z_j = sum_k attn[j, k] (e_k V)``.  Leading batch axes broadcast.
    """
    f, e = ag._wrap(local_feats), ag._wrap(knowledge_rows)
    Q, K, V_mat = ag._wrap(Q), ag._wrap(K), ag._wrap(V_mat)
    d = f.shape[-1]
    if e.shape[-1] != d or Q.shape != (d, d) or K.shape != (d, d) or V_mat.shape != (d, d):
        raise ValueError(f"shape mismatch: feats {f.shape}, knowledge {e.shape}, Q {Q.shape}")
    q = f @ Q
    k = e @ K
    scores = (q @ ag.transpose(k)) * (1.0 / np.sqrt(d))
    attn = ag.softmax(scores, axis=-1)
    return attn @ (e @ V_mat), attn


def patch_weights(attn_last, include_cls: bool = False) -> np.ndarray:
    """Head-averaged [CLS]-row attention, renormalized to sum to 1.

    ``attn_last`` is ``(heads, n+1, n+1)`` or batched ``(B, heads, n+1, n+1)``.
    With ``include_cls`` the [CLS] column is kept (used on the text side where
    the local features include the [CLS] position).
    """
    a = np.asarray(attn_last.data if isinstance(attn_last, ag.Var) else attn_last)
    single = a.ndim == 3
    if single:
        a = a[None]
    row = a[:, :, 0, :].mean(axis=1)
    if not include_cls:
        row = row[:, 1:]
    w = row / row.sum(axis=-1, keepdims=True)
    return w[0] if single else w


def local_loss_side(Z, feats, weights=None, tau2: float = 0.1) -> ag.Var:
    """Weighted two-way InfoNCE between features and their knowledge embeddings.

    Per sample: ``-1/2 * sum_j w_j (log p(Z_j | feat_j) + log p(feat_j | Z_j))``
    where each conditional normalizes over the other side's ``n`` positions.
    Batched inputs ``(B, n, d)`` are averaged over ``B``.  ``weights=None``
    means uniform ``1/n``.
    """
    if not tau2 > 0:
        raise ValueError(f"tau2 must be > 0, got {tau2}")
    Z, f = ag._wrap(Z), ag._wrap(feats)
    if Z.shape != f.shape:
        raise ValueError(f"shape mismatch {Z.shape} vs {f.shape}")
    if Z.ndim == 2:
        Z, f = Z.reshape(1, *Z.shape), f.reshape(1, *f.shape)
    B, n, _ = f.shape
    if weights is None:
        w = np.full((B, n), 1.0 / n)
    else:
        w = np.broadcast_to(np.asarray(weights.data if isinstance(weights, ag.Var) else weights), (B, n))
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
    w = w.astype(f.data.dtype)
    sim = (f @ ag.transpose(Z)) * (1.0 / tau2)  # sim[b, j, k] = feat_j . Z_k
    idx = np.arange(n)
    to_z = ag.log_softmax(sim, axis=-1)[:, idx, idx]
    to_feat = ag.log_softmax(sim, axis=-2)[:, idx, idx]
    per_sample = ((to_z + to_feat) * w).sum(axis=-1) * -0.5
    return ag.vmean(per_sample)


def local_loss(image_side: Tuple, text_side: Tuple, tau2: float = 0.1) -> Tuple[ag.Var, Dict[str, float]]:
    """``L_tl = (L_v2t^tl + L_t2v^tl) / 2``.

    Each side is ``(Z, feats, weights)``.
    """
    l_v = local_loss_side(*image_side, tau2=tau2)
    l_t = local_loss_side(*text_side, tau2=tau2)
    total = (l_v + l_t) * 0.5
    return total, {"L_tl": total.item(), "L_v2t_tl": l_v.item(), "L_t2v_tl": l_t.item()}
