"""The assembled MLIP model: parameters, forward pass over a batch, all five losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .category_cl import (
    category_loss,
    fuse_and_assign,
    init_prototypes,
    prototype_entropy,
    prototype_probs,
    sinkhorn_assign,
    topic_extract,
)
from .checkpoint import decode_text, encode_text, load_checkpoint, save_checkpoint
from .config import Config, parse_config_text
from .divergence import DivergenceState, init_divergence
from .encoders import _glorot, encode_image, encode_text as encode_tokens, init_encoder_params
from .encoders import project_global, project_local
from .global_ita import GlobalBatch, global_loss
from .knowledge import EntityEmbeddings, KnowledgeGraph, build_knowledge, map_entities
from .local_ita import cross_modal_attend, local_loss, patch_weights
from .proxy import ProxyConfig, itm_loss, ts_loss

LOSS_NAMES = ("L_ita", "L_tl", "L_cl", "L_itm", "L_ts")


def loss_weights(cfg: Config) -> Dict[str, float]:
    return dict(zip(LOSS_NAMES, (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4, cfg.lambda5)))


def total_loss(components: Mapping[str, object], cfg: Config):
    """``lambda1 L_ita + lambda2 L_tl + lambda3 L_cl + lambda4 L_itm + lambda5 L_ts``.

    Components with zero weight are left out of the sum entirely.
    """
    total = None
    for name, w in loss_weights(cfg).items():
        if w == 0:
            continue
        term = components[name] * w
        total = term if total is None else total + term
    return total


def init_head_params(cfg: Config, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Local-alignment, fusion and prototype parameters."""
    dt = nm.get_dtype()
    d, de, dq = cfg.dim, cfg.entity_dim, cfg.fused_dim
    p = {}
    for side in ("lv", "lt"):
        if side == "lt" and cfg.share_local_qkv:
            p["lt.map"] = _glorot(rng, de, d, dt)
            continue
        for w in ("Q", "K", "V"):
            p[f"{side}.{w}"] = _glorot(rng, d, d, dt)
        p[f"{side}.map"] = _glorot(rng, de, d, dt)
    p["cl.core"] = (rng.standard_normal((d, d, dq)) / d).astype(dt)
    p["cl.Wo"] = _glorot(rng, dq, dq, dt)
    p["cl.ek"] = _glorot(rng, de, dq, dt)
    p["cl.Wsa"] = _glorot(rng, dq, dq, dt)
    p["cl.J"] = init_prototypes(cfg.prototypes, d, rng)
    return p


@dataclass
class StepInputs:
    """Everything a forward pass needs besides the trainable parameters."""

    patches: np.ndarray
    tokens: np.ndarray
    V_aug: np.ndarray
    T_aug: np.ndarray
    neg_idx: Optional[np.ndarray]
    swap_mask: np.ndarray
    swap_src: np.ndarray
    codes: Optional[np.ndarray] = None  # frozen Sinkhorn codes
    w_img: Optional[np.ndarray] = None  # frozen patch weights
    w_txt: Optional[np.ndarray] = None


@dataclass
class ForwardResult:
    losses: Dict[str, ag.Var]
    total: Optional[ag.Var]
    metrics: Dict[str, float]
    v_raw: np.ndarray
    t_raw: np.ndarray
    codes: np.ndarray
    w_img: np.ndarray
    w_txt: np.ndarray


@dataclass
class MLIPModel:
    cfg: Config
    params: Dict[str, np.ndarray]
    div: DivergenceState
    graph: KnowledgeGraph
    knowledge: EntityEmbeddings
    entity_order: np.ndarray
    extra: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: Config, seed: Optional[int] = None) -> "MLIPModel":
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        graph, emb = build_knowledge(
            cfg.class_count,
            cfg.relations_per_class,
            cfg.entity_dim,
            seed=cfg.data_seed,
            margin=cfg.transe_margin,
            epochs=cfg.transe_epochs,
            lr=cfg.transe_lr,
            leaky_slope=cfg.gat_slope,
        )
        params = init_encoder_params(cfg, rng)
        params.update(init_head_params(cfg, rng))
        if cfg.knowledge_trainable:
            params["kg.ctx"] = emb.contextual.astype(nm.get_dtype())
        return cls(cfg, params, init_divergence(params), graph, emb, graph.degree_order())

    # ------------------------------------------------------------------
    def knowledge_matrix(self, p: Mapping) -> object:
        if "kg.ctx" in p:
            return p["kg.ctx"]
        return self.knowledge.contextual.astype(nm.get_dtype())

    def forward(self, p: Mapping, inp: StepInputs, compute_all: bool = True) -> ForwardResult:
        """All five losses for one batch.

        ``p`` maps parameter names to Vars (training / gradient checks) or
        arrays (inference).  Sinkhorn codes and patch weights are treated as
        constants; ``inp.codes`` / ``inp.w_*`` pin them to given values.
        """
        cfg = self.cfg
        P = _Lookup(p)
        v, Pf, attn_v = encode_image(inp.patches, P, cfg)
        t, Sf, attn_t = encode_tokens(inp.tokens, P, cfg)
        V_star, T_star = project_global(v, t, P, cfg)
        losses: Dict[str, ag.Var] = {}
        metrics: Dict[str, float] = {}

        gb = GlobalBatch(V_star, T_star, inp.V_aug, inp.T_aug, cfg.tau1, cfg.lambda0)
        losses["L_ita"], parts = global_loss(gb)
        metrics.update(parts)

        # local token-knowledge-patch alignment
        kmat = self.knowledge_matrix(P)
        w_img = inp.w_img if inp.w_img is not None else patch_weights(attn_v.data)
        w_txt = inp.w_txt if inp.w_txt is not None else patch_weights(attn_t.data, include_cls=True)
        if compute_all or cfg.lambda2 > 0:
            pl, sl = project_local(Pf, Sf, P, cfg)
            kv = map_entities(kmat, cfg.patches, P["lv.map"], self.entity_order)
            kt = map_entities(kmat, cfg.seq_len, P["lt.map"], self.entity_order)
            tq = "lv" if cfg.share_local_qkv else "lt"
            zv, _ = cross_modal_attend(pl, kv, P["lv.Q"], P["lv.K"], P["lv.V"])
            zt, _ = cross_modal_attend(sl, kt, P[f"{tq}.Q"], P[f"{tq}.K"], P[f"{tq}.V"])
            zv = ag.l2_normalize(zv, axis=-1)
            zt = ag.l2_normalize(zt, axis=-1)
            losses["L_tl"], parts = local_loss((zv, pl, w_img), (zt, sl, w_txt), cfg.tau2)
            metrics.update(parts)

        # knowledge-guided category level
        topics = topic_extract(V_star, T_star, cfg.topic_mode, cfg.topic_groups, cfg.ln_eps)
        ent = ag._wrap(kmat) @ P["cl.ek"]
        _, vkt_n = fuse_and_assign(topics.v_dot, topics.t_dot, P["cl.core"], P["cl.Wo"], ent, cfg.tau3, P["cl.Wsa"])
        if inp.codes is not None:
            codes = np.asarray(inp.codes)
            metrics.update(sinkhorn_row_err=float("nan"), sinkhorn_col_err=float("nan"))
        else:
            cc = sinkhorn_assign(vkt_n.data, P["cl.J"].data, cfg.sinkhorn_eps, cfg.sinkhorn_iters)
            codes = cc.u
            metrics.update(sinkhorn_row_err=cc.row_err, sinkhorn_col_err=cc.col_err)
        Pv = prototype_probs(topics.v_dot, P["cl.J"], cfg.tau4)
        Pt = prototype_probs(topics.t_dot, P["cl.J"], cfg.tau4)
        losses["L_cl"] = category_loss(codes, Pv, Pt)
        metrics["L_cl"] = losses["L_cl"].item()
        metrics["prototype_entropy"] = prototype_entropy(Pv.data)

        # proxy tasks
        pc = ProxyConfig(cfg.margin_itm, cfg.margin_ts, cfg.alpha, cfg.swap_prob, cfg.topic_mode, cfg.topic_groups)
        v_neg = V_star[inp.neg_idx] if inp.neg_idx is not None else None
        if v_neg is None:
            losses["L_itm"] = ag.Var(np.zeros((), dtype=V_star.data.dtype))
        else:
            losses["L_itm"] = itm_loss(V_star, T_star, v_neg, pc)
        losses["L_ts"] = ts_loss(V_star, T_star, T_star[inp.swap_src], pc, inp.swap_mask)
        metrics["L_itm"] = losses["L_itm"].item()
        metrics["L_ts"] = losses["L_ts"].item()
        metrics["swap_fraction"] = float(np.mean(inp.swap_mask)) if len(inp.swap_mask) else 0.0

        if "L_tl" not in losses:
            losses["L_tl"] = ag.Var(np.zeros((), dtype=V_star.data.dtype))
            metrics.update(L_tl=0.0, L_v2t_tl=0.0, L_t2v_tl=0.0)
        total = total_loss(losses, cfg)
        metrics["L_total"] = total.item()
        return ForwardResult(losses, total, metrics, v.data, t.data, codes, w_img, w_txt)

    # ------------------------------------------------------------------
    def to_tensors(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update(self.div.to_checkpoint())
        out["kg/E"] = self.knowledge.E
        out["kg/R"] = self.knowledge.R
        out["kg/contextual"] = self.knowledge.contextual
        out["kg/order"] = self.entity_order.astype(np.float32)
        out["kg/triples"] = self.graph.triples.astype(np.float32)
        out["kg/shape"] = np.array([self.graph.n_entities, self.graph.n_relations], dtype=np.float32)
        out["meta/config"] = encode_text(self.cfg.to_text())
        out["meta/blend"] = np.array([self.div.last_s_v, self.div.last_s_t], dtype=np.float32)
        return out

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.to_tensors())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MLIPModel":
        tensors = load_checkpoint(path)
        cfg = parse_config_text(decode_text(tensors["meta/config"]))
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        div = DivergenceState.from_checkpoint(tensors)
        div.last_s_v, div.last_s_t = (float(x) for x in tensors["meta/blend"])
        n_e, n_r = (int(x) for x in tensors["kg/shape"])
        graph = KnowledgeGraph(tensors["kg/triples"].astype(np.int64), n_e, n_r)
        emb = EntityEmbeddings(tensors["kg/E"], tensors["kg/R"], tensors["kg/contextual"])
        return cls(cfg, params, div, graph, emb, tensors["kg/order"].astype(np.int64))


class _Lookup:
    """Parameter access that wraps plain arrays as constants."""

    def __init__(self, p: Mapping):
        self._p = p

    def __getitem__(self, key):
        val = self._p[key]
        return val if isinstance(val, ag.Var) else ag.Var(val)

    def __contains__(self, key):
        return key in self._p
