"""Micro image/text encoders and the shared-space projection heads.

Both encoders are one pre-LN transformer block over a [CLS]-prefixed sequence.
The image encoder embeds raw patch vectors linearly and prepends a learned
[CLS] vector; the text encoder looks tokens up in an embedding table whose id 0
is the reserved [CLS] token.  Parameters live in a flat ``{name: ndarray}``
dict; forward functions accept arrays or :class:`~mlip.autograd.Var` values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .config import Config

Params = Dict[str, np.ndarray]

IMAGE_PREFIXES = ("fv.", "hv.")
TEXT_PREFIXES = ("ft.", "ht.")


@dataclass
class ImageSample:
    patches: np.ndarray  # (M^2, d_in)

    def __post_init__(self):
        n = self.patches.shape[0]
        if int(round(n**0.5)) ** 2 != n:
            raise ValueError(f"{n} patches do not form a square grid")
        nm.check_finite(self.patches, "patches")


@dataclass
class TextSample:
    tokens: np.ndarray  # (V,) ints, tokens[0] is [CLS]

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ValueError("a text needs at least 2 tokens")


@dataclass
class FeatureSet:
    v: np.ndarray
    t: np.ndarray
    P: np.ndarray
    S: np.ndarray
    v_star: np.ndarray
    t_star: np.ndarray


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _glorot(rng, fan_in, fan_out, dtype):
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dtype)


def _block_params(prefix: str, d: int, ffn: int, rng, dtype) -> Params:
    p = {}
    for ln in ("ln1", "ln2", "ln3"):
        p[f"{prefix}.{ln}.g"] = np.ones(d, dtype)
        p[f"{prefix}.{ln}.b"] = np.zeros(d, dtype)
    for w in ("Wq", "Wk", "Wv", "Wo"):
        p[f"{prefix}.attn.{w}"] = _glorot(rng, d, d, dtype)
    p[f"{prefix}.ffn.W1"] = _glorot(rng, d, ffn, dtype)
    p[f"{prefix}.ffn.b1"] = np.zeros(ffn, dtype)
    p[f"{prefix}.ffn.W2"] = _glorot(rng, ffn, d, dtype) * 0.5
    p[f"{prefix}.ffn.b2"] = np.zeros(d, dtype)
    return p


def _head_params(prefix: str, d: int, rng, dtype) -> Params:
    p = {
        f"{prefix}.W": _glorot(rng, d, d, dtype),
        f"{prefix}.b": np.zeros(d, dtype),
        f"{prefix}.ln.g": np.ones(d, dtype),
        f"{prefix}.ln.b": np.zeros(d, dtype),
    }
    for w in ("Wq", "Wk", "Wv"):
        p[f"{prefix}.{w}"] = _glorot(rng, d, d, dtype)
    return p


def init_encoder_params(cfg: Config, rng: np.random.Generator) -> Params:
    """Fresh parameters for f_v, f_t and the projection heads h_v, h_t."""
    dt = nm.get_dtype()
    d = cfg.dim
    p: Params = {
        "fv.embed.W": _glorot(rng, cfg.patch_dim, d, dt),
        "fv.embed.b": np.zeros(d, dt),
        "fv.cls": (rng.standard_normal(d) * 0.1).astype(dt),
        "ft.tok": (rng.standard_normal((cfg.vocab_size, d)) * 0.5).astype(dt),
    }
    p.update(_block_params("fv", d, cfg.ffn_dim, rng, dt))
    p.update(_block_params("ft", d, cfg.ffn_dim, rng, dt))
    p.update(_head_params("hv", d, rng, dt))
    p.update(_head_params("ht", d, rng, dt))
    return p


def _affine_ln(x, p, name, eps):
    return ag.layer_norm(x, eps) * p[f"{name}.g"] + p[f"{name}.b"]


def _split_heads(x, heads):
    B, n, d = x.shape
    return ag.transpose(x.reshape(B, n, heads, d // heads), (0, 2, 1, 3))


def transformer_block(x, p, prefix: str, heads: int, eps: float):
    """Pre-LN block: MHA + GELU feed-forward, final LN.  Returns (out, attention)."""
    B, n, d = x.shape
    h = _affine_ln(x, p, f"{prefix}.ln1", eps)
    q = _split_heads(h @ p[f"{prefix}.attn.Wq"], heads)
    k = _split_heads(h @ p[f"{prefix}.attn.Wk"], heads)
    v = _split_heads(h @ p[f"{prefix}.attn.Wv"], heads)
    scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d // heads))
    attn = ag.softmax(scores, axis=-1)
    o = ag.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, n, d)
    x = x + o @ p[f"{prefix}.attn.Wo"]
    h2 = _affine_ln(x, p, f"{prefix}.ln2", eps)
    f = ag.gelu(h2 @ p[f"{prefix}.ffn.W1"] + p[f"{prefix}.ffn.b1"]) @ p[f"{prefix}.ffn.W2"]
    x = x + f + p[f"{prefix}.ffn.b2"]
    return _affine_ln(x, p, f"{prefix}.ln3", eps), attn


def _vars(params: Mapping) -> Mapping:
    return _VarView(params)


class _VarView(dict):
    """Lazily wraps plain arrays as constant Vars on lookup."""

    def __init__(self, params):
        super().__init__()
        self._src = params

    def __getitem__(self, key):
        val = self._src[key]
        return val if isinstance(val, ag.Var) else ag.Var(val)

    def __contains__(self, key):
        return key in self._src


def encode_image(x, params: Mapping, cfg: Config):
    """Image encoder f_v.

    ``x`` is ``(M^2, d_in)`` or batched ``(B, M^2, d_in)``.  Returns
    ``(v, P, attn_last)`` with ``v (B, d)``, ``P (B, M^2, d)`` and
    ``attn_last (B, heads, M^2+1, M^2+1)`` as Vars.
    """
    p = _vars(params)
    x = ag._wrap(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, n, din = x.shape
    if din != p["fv.embed.W"].shape[0]:
        raise ValueError(f"patch dim {din} != embedder input {p['fv.embed.W'].shape[0]}")
    d = cfg.dim
    emb = x @ p["fv.embed.W"] + p["fv.embed.b"]
    cls = ag.broadcast_to(p["fv.cls"].reshape(1, 1, d), (B, 1, d))
    seq = ag.concat([cls, emb], axis=1)
    if cfg.pos_encoding:
        seq = seq + sinusoidal_positions(n + 1, d).astype(nm.get_dtype())
    out, attn = transformer_block(seq, p, "fv", cfg.heads, cfg.ln_eps)
    return out[:, 0], out[:, 1:], attn


def encode_text(y, params: Mapping, cfg: Config):
    """Text encoder f_t with [CLS] pooling at position 0.

    Returns ``(t, S, attn_last)``; ``S`` holds all ``V`` positions.
    """
    p = _vars(params)
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None, :]
    B, V = y.shape
    if V < 2:
        raise ValueError("texts need at least 2 tokens")
    if y.min() < 0 or y.max() >= p["ft.tok"].shape[0]:
        raise ValueError("token id outside the vocabulary")
    seq = p["ft.tok"][y]
    if cfg.pos_encoding:
        seq = seq + sinusoidal_positions(V, cfg.dim).astype(nm.get_dtype())
    out, attn = transformer_block(seq, p, "ft", cfg.heads, cfg.ln_eps)
    return out[:, 0], out, attn


def _project(x, p, prefix, eps):
    # x: (..., n, d); self-attention runs over the n rows
    h = x @ p[f"{prefix}.W"] + p[f"{prefix}.b"]
    q = h @ p[f"{prefix}.Wq"]
    k = h @ p[f"{prefix}.Wk"]
    scores = (q @ ag.transpose(k)) * (1.0 / np.sqrt(h.shape[-1]))
    a = ag.softmax(scores, axis=-1)
    sa = a @ (h @ p[f"{prefix}.Wv"])
    return ag.l2_normalize(_affine_ln(sa, p, f"{prefix}.ln", eps), axis=-1)


def project_global(v, t, params: Mapping, cfg: Config):
    """``v* = norm(LN(SA(h_v(v))))`` and likewise ``t*``; ``(B, d)`` each."""
    p = _vars(params)
    v, t = ag._wrap(v), ag._wrap(t)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    B, d = v.shape
    # each global vector is a length-1 sequence for the self-attention
    vs = _project(v.reshape(B, 1, d), p, "hv", cfg.ln_eps).reshape(B, d)
    ts = _project(t.reshape(t.shape[0], 1, d), p, "ht", cfg.ln_eps).reshape(t.shape[0], d)
    return vs, ts


def project_local(P, S, params: Mapping, cfg: Config):
    """Row-normalized ``LN(SA(h(.)))`` of patch and token features."""
    p = _vars(params)
    return _project(ag._wrap(P), p, "hv", cfg.ln_eps), _project(ag._wrap(S), p, "ht", cfg.ln_eps)


def encode_features(x, y, params: Mapping, cfg: Config) -> FeatureSet:
    """Convenience inference path returning a :class:`FeatureSet` of arrays."""
    with ag.no_grad():
        v, P, _ = encode_image(x, params, cfg)
        t, S, _ = encode_text(y, params, cfg)
        vs, ts = project_global(v, t, params, cfg)
    return FeatureSet(v.data, t.data, P.data, S.data, vs.data, ts.data)


def random_transform(
    x: np.ndarray,
    rng: np.random.Generator,
    noise: float = 0.1,
    flip_prob: float = 0.5,
    scale_range: Tuple[float, float] = (0.8, 1.2),
    flip: Optional[bool] = None,
) -> np.ndarray:
    """Patch-grid horizontal flip, additive Gaussian noise, per-patch intensity scaling.

    Works on one ``(M^2, d_in)`` sample or a ``(B, M^2, d_in)`` batch (one flip
    decision per sample).  ``flip`` forces the flip decision.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    xb = x[None] if single else x
    B, n, din = xb.shape
    m = int(round(n**0.5))
    out = xb.reshape(B, m, m, din).copy()
    if flip is None:
        flips = rng.random(B) < flip_prob
    else:
        flips = np.full(B, bool(flip))
    out[flips] = out[flips][:, :, ::-1]
    out = out.reshape(B, n, din)
    if noise > 0:
        out = out + noise * rng.standard_normal(out.shape)
    lo, hi = scale_range
    if lo != 1.0 or hi != 1.0:
        out = out * rng.uniform(lo, hi, size=(B, n, 1))
    out = out.astype(x.dtype, copy=False)
    return out[0] if single else out
