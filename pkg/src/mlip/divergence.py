"""Divergence encoders: gradient-free copies of f_v / f_t blended toward them.

The blend coefficient is the batch-mean cosine between the common encoder's
global feature and the divergence encoder's feature on the transformed image
(image side) or the same text (text side).  Negative cosines are clamped to 0
so the blend never extrapolates past either endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .config import Config
from .encoders import IMAGE_PREFIXES, TEXT_PREFIXES, encode_image, encode_text, project_global


def _side(params: Mapping[str, np.ndarray], prefixes) -> Dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in params.items() if k.startswith(prefixes)}


@dataclass
class DivergenceState:
    theta_ov: Dict[str, np.ndarray]
    theta_ot: Dict[str, np.ndarray]
    last_s_v: float = 0.0
    last_s_t: float = 0.0

    def merged(self) -> Dict[str, np.ndarray]:
        out = dict(self.theta_ov)
        out.update(self.theta_ot)
        return out

    def to_checkpoint(self) -> Dict[str, np.ndarray]:
        """Namespace the copies under ``div/`` for the checkpoint file."""
        return {f"div/{k}": v for k, v in self.merged().items()}

    @classmethod
    def from_checkpoint(cls, tensors: Mapping[str, np.ndarray]) -> "DivergenceState":
        inner = {k[len("div/"):]: np.array(v) for k, v in tensors.items() if k.startswith("div/")}
        return cls(_side(inner, IMAGE_PREFIXES), _side(inner, TEXT_PREFIXES))


def init_divergence(f_params: Mapping[str, np.ndarray]) -> DivergenceState:
    """Deep copies of the image-side and text-side common parameters."""
    ov = _side(f_params, IMAGE_PREFIXES)
    ot = _side(f_params, TEXT_PREFIXES)
    if not ov or not ot:
        raise ValueError("parameters lack image- or text-side encoder tensors")
    return DivergenceState(ov, ot)


def divergence_features(x_rt, y, state: DivergenceState, cfg: Config):
    """Raw and projected features from o_v(x_rt), o_t(y); no tape is built."""
    params = state.merged()
    with ag.no_grad():
        v, _, _ = encode_image(x_rt, params, cfg)
        t, _, _ = encode_text(y, params, cfg)
        v_aug, t_aug = project_global(v, t, params, cfg)
    return v.data, t.data, v_aug.data, t_aug.data


def augment(x_rt, y, state: DivergenceState, cfg: Config) -> Tuple[np.ndarray, np.ndarray]:
    """Projected, normalized ``(v_aug, t_aug)`` from the divergence encoders."""
    _, _, v_aug, t_aug = divergence_features(x_rt, y, state, cfg)
    return v_aug, t_aug


def blend_coefficients(v, v_raw_aug, t, t_raw_aug) -> Tuple[float, float]:
    """Batch-mean cosines, clamped to [0, 1]."""
    s_v = float(np.mean(nm.cosine_rows(np.atleast_2d(v), np.atleast_2d(v_raw_aug))))
    s_t = float(np.mean(nm.cosine_rows(np.atleast_2d(t), np.atleast_2d(t_raw_aug))))
    return min(max(s_v, 0.0), 1.0), min(max(s_t, 0.0), 1.0)


def _blend(theta_o, f_params, s):
    out = {}
    for k, old in theta_o.items():
        new = np.asarray(f_params[k])
        if new.shape != old.shape:
            raise ValueError(f"shape mismatch for {k}: {new.shape} vs {old.shape}")
        if s == 1.0:
            out[k] = np.array(new, dtype=old.dtype, copy=True)
        elif s == 0.0:
            out[k] = old
        else:
            out[k] = (s * new + (1.0 - s) * old).astype(old.dtype)
    return out


def blend_update(state: DivergenceState, f_params: Mapping[str, np.ndarray], s_v: float, s_t: float) -> DivergenceState:
    """``theta_o <- s * theta_f + (1 - s) * theta_o`` per modality."""
    if not (-1.0 <= s_v <= 1.0 and -1.0 <= s_t <= 1.0):
        raise ValueError("blend coefficients must be clamped cosines in [-1, 1]")
    s_v = max(float(s_v), 0.0)
    s_t = max(float(s_t), 0.0)
    missing = [k for k in list(state.theta_ov) + list(state.theta_ot) if k not in f_params]
    if missing:
        raise ValueError(f"common parameters missing {missing[:3]}")
    return DivergenceState(
        _blend(state.theta_ov, f_params, s_v),
        _blend(state.theta_ot, f_params, s_t),
        last_s_v=s_v,
        last_s_t=s_t,
    )
