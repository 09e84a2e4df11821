"""Held-out evaluation: cross-modal retrieval, prototype clustering, false-negative gap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from . import autograd as ag
from . import numerics as nm
from .category_cl import fuse_and_assign, sinkhorn_assign, topic_extract
from .data import PairedDataset
from .encoders import encode_image, encode_text, project_global
from .model import MLIPModel


@dataclass
class Embeddings:
    v_star: np.ndarray
    t_star: np.ndarray
    vkt: np.ndarray  # unit-normalized fused feature used for cluster scoring


def embed(model: MLIPModel, patches: np.ndarray, tokens: np.ndarray, chunk: int = 256) -> Embeddings:
    """Features of every sample, computed in the model's own precision mode."""
    with nm.precision(model.cfg.precision):
        return _embed(model, patches, tokens, chunk)


def _embed(model: MLIPModel, patches: np.ndarray, tokens: np.ndarray, chunk: int) -> Embeddings:
    cfg = model.cfg
    p = model.params
    vs, ts, ks = [], [], []
    kmat = model.knowledge_matrix(p)
    with ag.no_grad():
        ent = ag._wrap(kmat) @ ag._wrap(p["cl.ek"])
        for lo in range(0, len(patches), chunk):
            x = np.asarray(patches[lo : lo + chunk], dtype=nm.get_dtype())
            y = tokens[lo : lo + chunk]
            v, _, _ = encode_image(x, p, cfg)
            t, _, _ = encode_text(y, p, cfg)
            v_star, t_star = project_global(v, t, p, cfg)
            top = topic_extract(v_star, t_star, cfg.topic_mode, cfg.topic_groups, cfg.ln_eps)
            _, vkt = fuse_and_assign(top.v_dot, top.t_dot, p["cl.core"], p["cl.Wo"], ent, cfg.tau3, p["cl.Wsa"])
            vs.append(v_star.data)
            ts.append(t_star.data)
            ks.append(vkt.data)
    cat = lambda xs: np.concatenate(xs).astype(np.float64)
    return Embeddings(cat(vs), cat(ts), cat(ks))


def ranks_of_truth(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower index."""
    order = np.argsort(-sim, axis=1, kind="stable")
    return np.argmax(order == np.arange(len(sim))[:, None], axis=1)


def recall_at(sim: np.ndarray, k: int) -> float:
    return float(np.mean(ranks_of_truth(sim) < k))


def retrieval_metrics(v_star: np.ndarray, t_star: np.ndarray) -> Dict[str, float]:
    sim = v_star @ t_star.T
    out = {
        "i2t_recall@1": recall_at(sim, 1),
        "i2t_recall@5": recall_at(sim, 5),
        "t2i_recall@1": recall_at(sim.T, 1),
        "t2i_recall@5": recall_at(sim.T, 5),
    }
    out["recall@1"] = 0.5 * (out["i2t_recall@1"] + out["t2i_recall@1"])
    out["recall@5"] = 0.5 * (out["i2t_recall@5"] + out["t2i_recall@5"])
    return out


def purity(assign: np.ndarray, labels: np.ndarray) -> float:
    assign, labels = np.asarray(assign), np.asarray(labels)
    total = 0
    for c in np.unique(assign):
        total += np.bincount(labels[assign == c]).max()
    return total / len(labels)


def clustering_metrics(assign: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    return {
        "purity": float(purity(assign, labels)),
        "nmi": float(normalized_mutual_info_score(labels, assign)),
    }


def false_negative_gap_from(v_star: np.ndarray, t_star: np.ndarray, labels: np.ndarray) -> float:
    """Mean same-class unpaired cosine minus mean cross-class cosine."""
    vn = nm.l2_normalize(np.asarray(v_star, dtype=np.float64))
    tn = nm.l2_normalize(np.asarray(t_star, dtype=np.float64))
    cos = vn @ tn.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(cos[same & off].mean() - cos[~same].mean())


def eval_retrieval(model: MLIPModel, data: PairedDataset) -> Dict[str, float]:
    test = data.test()
    e = embed(model, test.patches, test.tokens)
    return retrieval_metrics(e.v_star, e.t_star)


def eval_clustering(model: MLIPModel, data: PairedDataset) -> Dict[str, float]:
    test = data.test()
    e = embed(model, test.patches, test.tokens)
    cfg = model.cfg
    code = sinkhorn_assign(e.vkt, model.params["cl.J"], cfg.sinkhorn_eps, cfg.sinkhorn_eval_iters)
    return clustering_metrics(np.argmax(code.u, axis=1), test.labels)


def false_negative_gap(model: MLIPModel, data: PairedDataset) -> float:
    test = data.test()
    e = embed(model, test.patches, test.tokens)
    return false_negative_gap_from(e.v_star, e.t_star, test.labels)


def evaluate(model: MLIPModel, data: PairedDataset) -> Dict[str, float]:
    """All held-out metrics from a single embedding pass."""
    test = data.test()
    e = embed(model, test.patches, test.tokens)
    cfg = model.cfg
    out = retrieval_metrics(e.v_star, e.t_star)
    code = sinkhorn_assign(e.vkt, model.params["cl.J"], cfg.sinkhorn_eps, cfg.sinkhorn_eval_iters)
    out.update(clustering_metrics(np.argmax(code.u, axis=1), test.labels))
    out["false_negative_gap"] = false_negative_gap_from(e.v_star, e.t_star, test.labels)
    return out
