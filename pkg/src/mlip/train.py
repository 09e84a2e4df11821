"""Training loop: batch sampling, forward/backward, optimizer, divergence blend, metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from . import autograd as ag
from . import numerics as nm
from .category_cl import PrototypeBank
from .config import Config
from .data import PairedDataset
from .divergence import blend_coefficients, blend_update, divergence_features
from .encoders import random_transform
from .model import MLIPModel, StepInputs
from .proxy import sample_negatives, swap_texts

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "lr",
    "L_total",
    "L_v2t",
    "L_t2v",
    "L_v2a",
    "L_avt",
    "L_ita",
    "L_tl",
    "L_v2t_tl",
    "L_t2v_tl",
    "L_cl",
    "sinkhorn_row_err",
    "sinkhorn_col_err",
    "prototype_entropy",
    "L_itm",
    "L_ts",
    "swap_fraction",
    "s_v",
    "s_t",
)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


def lr_at(cfg: Config, step: int) -> float:
    """Learning rate for 0-based ``step``."""
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


class Optimizer:
    """SGD with momentum, or Adam."""

    def __init__(self, cfg: Config, params: Dict[str, np.ndarray]):
        self.kind = cfg.optimizer
        self.momentum = cfg.momentum
        self.state = {k: np.zeros_like(v) for k, v in params.items()}
        self.state2 = {k: np.zeros_like(v) for k, v in params.items()} if self.kind == "adam" else None
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for k, g in grads.items():
            if self.kind == "sgd":
                buf = self.state[k]
                buf *= self.momentum
                buf += g
                params[k] = params[k] - lr * buf
            else:
                b1, b2 = 0.9, 0.999
                m, v = self.state[k], self.state2[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mh = m / (1 - b1**self.t)
                vh = v / (1 - b2**self.t)
                params[k] = params[k] - lr * mh / (np.sqrt(vh) + 1e-8)


def make_step_inputs(model: MLIPModel, data: PairedDataset, idx: np.ndarray, rng: np.random.Generator) -> tuple:
    """Batch arrays plus the divergence-path features for one step."""
    cfg = model.cfg
    dt = nm.get_dtype()
    x = data.patches[idx].astype(dt)
    y = data.tokens[idx]
    x_rt = random_transform(
        x, rng, cfg.aug_noise, cfg.aug_flip_prob, (cfg.aug_scale_min, cfg.aug_scale_max)
    ).astype(dt)
    v_raw_aug, t_raw_aug, V_aug, T_aug = divergence_features(x_rt, y, model.div, cfg)
    neg = sample_negatives(len(idx), rng)
    _, mask, src = swap_texts(y, cfg.swap_prob, rng)
    inp = StepInputs(x, y, V_aug, T_aug, neg, mask, src)
    return inp, v_raw_aug, t_raw_aug


def _format(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9g}"


def metrics_csv(records: List[Dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow([_format(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


@dataclass
class TrainResult:
    model: MLIPModel
    records: List[Dict[str, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.records[0]["L_total"]

    @property
    def final_loss(self) -> float:
        return self.records[-1]["L_total"]


def train(
    cfg: Config,
    data: PairedDataset,
    model: Optional[MLIPModel] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Optimize all five weighted losses for ``cfg.steps`` steps.

    Per step: sample a batch, run the divergence encoders, forward + backward,
    optimizer update, prototype renormalization, then the divergence blend.
    Hidden labels are never read.  The precision mode of ``cfg`` applies for
    the duration of the call only.
    """
    with nm.precision(cfg.precision):
        return _train(cfg, data, model, out_dir)


def _train(cfg: Config, data: PairedDataset, model: Optional[MLIPModel], out_dir) -> TrainResult:
    if model is None:
        model = MLIPModel.create(cfg)
    params = {k: np.asarray(v, dtype=nm.get_dtype()) for k, v in model.params.items()}
    model.params = params
    rng = np.random.default_rng(cfg.seed + 1_000_003)
    opt = Optimizer(cfg, params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    last_good: Optional[Path] = None
    train_idx = data.train_idx
    B = min(cfg.batch_size, len(train_idx))

    for step in range(cfg.steps):
        idx = rng.choice(train_idx, size=B, replace=False)
        pv = {k: ag.Var(v, requires_grad=True, name=k) for k, v in params.items()}
        try:
            inp, v_raw_aug, t_raw_aug = make_step_inputs(model, data, idx, rng)
            fwd = model.forward(pv, inp)
        except nm.NonFiniteError as exc:
            raise TrainingDiverged(step + 1, last_good) from exc
        total = fwd.total
        if not np.isfinite(total.data):
            raise TrainingDiverged(step + 1, last_good)
        total.backward()
        grads = {k: v.grad for k, v in pv.items() if v.grad is not None}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(step + 1, last_good)
        lr = lr_at(cfg, step)
        opt.step(params, grads, lr)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingDiverged(step + 1, last_good)
        bank = PrototypeBank(params["cl.J"], cfg.tau4)
        bank.renormalize()
        params["cl.J"] = bank.J.astype(nm.get_dtype())

        s_v, s_t = blend_coefficients(fwd.v_raw, v_raw_aug, fwd.t_raw, t_raw_aug)
        model.div = blend_update(model.div, params, s_v, s_t)

        if (step + 1) % cfg.log_every == 0 or step == 0 or step + 1 == cfg.steps:
            rec = {"step": step + 1, "lr": lr, "s_v": s_v, "s_t": s_t}
            rec.update({c: fwd.metrics.get(c, float("nan")) for c in METRIC_COLUMNS if c not in rec})
            result.records.append(rec)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = out / f"checkpoint_{step + 1:06d}.ckpt"
            model.save(path)
            result.checkpoints.append(path)
            last_good = path

    if out is not None:
        final = out / "final.ckpt"
        model.save(final)
        result.checkpoints.append(final)
        (out / "metrics.csv").write_text(metrics_csv(result.records))
    return result
