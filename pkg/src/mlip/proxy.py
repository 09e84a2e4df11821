"""Image-text matching and text-swapping hinge losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autograd as ag


@dataclass
class ProxyConfig:
    margin_G: float = 0.5
    margin_Gp: float = 0.5
    alpha: float = 0.5
    gamma: float = 0.15
    mode: str = "scalar"
    groups: int = 8

    def __post_init__(self):
        if self.margin_G < 0 or self.margin_Gp < 0 or self.alpha < 0:
            raise ValueError("margins and alpha must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def _rows(x) -> ag.Var:
    x = ag._wrap(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def relevance(v, t) -> ag.Var:
    """Row-wise ``v . t`` (features are assumed unit-norm)."""
    return (ag._wrap(v) * ag._wrap(t)).sum(axis=-1)


def sample_negatives(B: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    """For each row a uniformly drawn other row index; ``None`` when ``B < 2``."""
    if B < 2:
        return None
    return (np.arange(B) + rng.integers(1, B, size=B)) % B


def itm_loss(v, t, v_neg, cfg: ProxyConfig) -> ag.Var:
    """Batch mean of ``max(0, G - r(v, t) + r(v_neg, t))``.

    ``v_neg=None`` (a batch of one has no negative) gives 0 with a warning.
    """
    v = _rows(v)
    if v_neg is None:
        warnings.warn("no negative image available; ITM loss is 0", RuntimeWarning, stacklevel=2)
        return ag.Var(np.zeros((), dtype=v.data.dtype))
    t, v_neg = _rows(t), _rows(v_neg)
    return ag.vmean(ag.relu(cfg.margin_G - relevance(v, t) + relevance(v_neg, t)))


def swap_texts(tokens: np.ndarray, gamma: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replace each text, with probability ``gamma``, by another sample's text.

    Returns ``(swapped_tokens, mask, source)`` where ``source[i]`` is the row
    whose text sample ``i`` now carries.
    """
    tokens = np.asarray(tokens)
    B = tokens.shape[0]
    source = np.arange(B)
    mask = np.zeros(B, dtype=bool)
    if B >= 2 and gamma > 0:
        draws = rng.random(B) < gamma
        partners = (np.arange(B) + rng.integers(1, B, size=B)) % B
        mask = draws
        source = np.where(mask, partners, source)
    return tokens[source], mask, source


def cross_attend(x, y, mode: str = "scalar", groups: int = 8) -> ag.Var:
    """``CA(x, y) = softmax(x . y / sqrt(d)) y`` row-wise.

    A single vector gives a one-element softmax, so ``"scalar"`` mode returns
    ``y``.  ``"sequence"`` mode attends between ``groups`` feature chunks.
    """
    x, y = _rows(x), _rows(y)
    B, d = x.shape
    if mode == "scalar":
        w = ag.softmax((x * y).sum(axis=-1, keepdims=True) * (1.0 / np.sqrt(d)), axis=-1)
        return w * y
    if mode != "sequence":
        raise ValueError(f"unknown mode {mode!r}")
    g = d // groups
    X, Y = x.reshape(B, groups, g), y.reshape(B, groups, g)
    a = ag.softmax((X @ ag.transpose(Y)) * (1.0 / np.sqrt(g)), axis=-1)
    return (a @ Y).reshape(B, d)


def ts_relevance(v, t, cfg: ProxyConfig) -> ag.Var:
    """``r_ts(v, t) = v . t + alpha * CA(v, t) . CA(t, v)``."""
    v, t = _rows(v), _rows(t)
    fused = relevance(cross_attend(v, t, cfg.mode, cfg.groups), cross_attend(t, v, cfg.mode, cfg.groups))
    return relevance(v, t) + fused * cfg.alpha


def ts_loss(v, t_orig, t_swapped, cfg: ProxyConfig, mask: Optional[np.ndarray] = None) -> ag.Var:
    """Mean over swapped rows of ``max(0, G' - r_ts(v, t) + r_ts(v, t'))``; 0 if none."""
    v, t_orig, t_swapped = _rows(v), _rows(t_orig), _rows(t_swapped)
    B = v.shape[0]
    if mask is None:
        mask = np.ones(B, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return ag.Var(np.zeros((), dtype=v.data.dtype))
    hinge = ag.relu(cfg.margin_Gp - ts_relevance(v, t_orig, cfg) + ts_relevance(v, t_swapped, cfg))
    return (hinge * mask.astype(v.data.dtype)).sum() * (1.0 / mask.sum())
