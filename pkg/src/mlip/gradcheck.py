"""Finite-difference verification of every loss on micro-sized models."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .config import Config
from .encoders import encode_image, encode_text, project_global
from .model import LOSS_NAMES, MLIPModel, StepInputs
from .proxy import ProxyConfig, relevance, ts_relevance

# which losses each --module choice covers
MODULE_LOSSES = {
    "global_ita": ("L_ita",),
    "local_ita": ("L_tl",),
    "category_cl": ("L_cl",),
    "proxy": ("L_itm", "L_ts"),
}

KINK_CLEARANCE = 1e-3


def micro_config(**overrides) -> Config:
    base = dict(
        class_count=2,
        samples_per_class=4,
        dim=8,
        patch_dim=4,
        patches=4,
        seq_len=4,
        vocab_size=16,
        tokens_per_class=6,
        heads=2,
        ffn_dim=8,
        entity_dim=4,
        relations_per_class=1,
        transe_epochs=5,
        prototypes=4,
        fused_dim=8,
        topic_groups=2,
        batch_size=4,
        precision="f64",
    )
    base.update(overrides)
    return Config(**base)


@dataclass
class LossCheck:
    seed: int
    loss: str
    report: nm.GradReport


@dataclass
class GradcheckSummary:
    checks: List[LossCheck] = field(default_factory=list)
    seconds: float = 0.0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.report.passed for c in self.checks)

    def worst(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for c in self.checks:
            out[c.loss] = max(out.get(c.loss, 0.0), c.report.worst()[1])
        return out

    def lines(self) -> List[str]:
        out = []
        for name, rel in self.worst().items():
            ok = all(c.report.passed for c in self.checks if c.loss == name)
            seeds = len({c.seed for c in self.checks if c.loss == name})
            out.append(f"{name}: {'PASS' if ok else 'FAIL'} seeds={seeds} worst_rel={rel:.3e}")
        return out


def _hinge_arguments(model: MLIPModel, params, inp: StepInputs) -> np.ndarray:
    cfg = model.cfg
    with ag.no_grad():
        v, _, _ = encode_image(inp.patches, params, cfg)
        t, _, _ = encode_text(inp.tokens, params, cfg)
        vs, ts = project_global(v, t, params, cfg)
        pc = ProxyConfig(cfg.margin_itm, cfg.margin_ts, cfg.alpha, cfg.swap_prob, cfg.topic_mode, cfg.topic_groups)
        itm = cfg.margin_itm - relevance(vs, ts).data + relevance(vs[inp.neg_idx], ts).data
        tsw = cfg.margin_ts - ts_relevance(vs, ts, pc).data + ts_relevance(vs, ts[inp.swap_src], pc).data
    return np.concatenate([itm.ravel(), tsw.ravel()])


def _instance(cfg: Config, seed: int, max_tries: int = 50):
    """Model, parameters and a batch whose hinge arguments stay clear of their kinks."""
    for attempt in range(max_tries):
        rng = np.random.default_rng(10_000 * seed + attempt)
        model = MLIPModel.create(cfg, seed=10_000 * seed + attempt)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in model.params.items()}
        B = cfg.batch_size
        patches = rng.standard_normal((B, cfg.patches, cfg.patch_dim))
        tokens = rng.integers(1, cfg.vocab_size, size=(B, cfg.seq_len))
        tokens[:, 0] = 0
        V_aug = nm.l2_normalize(rng.standard_normal((B, cfg.dim)))
        T_aug = nm.l2_normalize(rng.standard_normal((B, cfg.dim)))
        neg = (np.arange(B) + rng.integers(1, B, size=B)) % B
        src = np.roll(np.arange(B), 1)
        inp = StepInputs(patches, tokens, V_aug, T_aug, neg, np.ones(B, dtype=bool), src)
        probe = model.forward(params, inp)
        inp.codes, inp.w_img, inp.w_txt = probe.codes, probe.w_img, probe.w_txt
        if np.min(np.abs(_hinge_arguments(model, params, inp))) > KINK_CLEARANCE:
            return model, params, inp
    raise RuntimeError(f"no kink-free instance found for seed {seed}")


def check_seed(
    cfg: Config,
    seed: int,
    losses: Sequence[str] = LOSS_NAMES,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = 2,
) -> List[LossCheck]:
    model, params, inp = _instance(cfg, seed)
    analytic = {}
    for name in losses:
        pv = {k: ag.Var(v, requires_grad=True, name=k) for k, v in params.items()}
        model.forward(pv, inp).losses[name].backward()
        analytic[name] = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in pv.items()}

    def evaluate(p):
        ls = model.forward(p, inp).losses
        return {n: ls[n].item() for n in losses}

    reports = nm.finite_diff_gradcheck_multi(
        evaluate, params, analytic, tolerance=tolerance, max_entries=max_entries, rng=np.random.default_rng(seed)
    )
    return [LossCheck(seed, n, reports[n]) for n in losses]


def run_gradcheck(
    module: Optional[str] = None,
    tolerance: float = 1e-4,
    seeds: int = 20,
    max_entries: Optional[int] = 2,
    cfg: Optional[Config] = None,
) -> GradcheckSummary:
    """All losses (or those of one module) over ``seeds`` random micro instances in float64."""
    if module is not None and module not in MODULE_LOSSES:
        raise ValueError(f"unknown module {module!r}; choose from {sorted(MODULE_LOSSES)}")
    losses = LOSS_NAMES if module is None else MODULE_LOSSES[module]
    cfg = cfg or micro_config()
    t0 = time.perf_counter()
    summary = GradcheckSummary(tolerance=tolerance)
    with nm.precision("f64"):
        for s in range(seeds):
            summary.checks.extend(check_seed(cfg, s, losses, tolerance, max_entries))
    summary.seconds = time.perf_counter() - t0
    return summary
