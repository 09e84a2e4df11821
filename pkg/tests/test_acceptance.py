"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL ...`` line to the terminal
(also under pytest's output capture).  Criteria 6-8 share one set of cached
training runs: 5 seeds x {full, no-global, no-local, no-category}.
"""

from __future__ import annotations

import functools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from mlip import numerics as nm
from mlip.category_cl import sinkhorn_assign
from mlip.config import Config
from mlip.data import generate_dataset
from mlip.divergence import DivergenceState, blend_update
from mlip.evaluate import evaluate
from mlip.global_ita import info_nce
from mlip.gradcheck import run_gradcheck
from mlip.model import MLIPModel
from mlip.train import metrics_csv, train
from mlip.verify import oracle_sinkhorn

SEEDS = (0, 1, 2, 3, 4)
ABLATIONS = {"full": {}, "no_global": {"lambda1": 0.0}, "no_local": {"lambda2": 0.0}, "no_category": {"lambda3": 0.0}}


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {detail}")

    return emit


@functools.lru_cache(maxsize=None)
def _run(seed: int, variant: str):
    cfg = Config(seed=seed, data_seed=seed, **ABLATIONS[variant])
    data = generate_dataset(cfg)
    t0 = time.perf_counter()
    result = train(cfg, data)
    seconds = time.perf_counter() - t0
    metrics = evaluate(result.model, data)
    return result.initial_loss, result.final_loss, metrics, seconds


def _median(variant: str, key: str) -> float:
    return statistics.median(_run(s, variant)[2][key] for s in SEEDS)


# 1 -------------------------------------------------------------------------
def test_criterion_1_gradient_correctness(report):
    summary = run_gradcheck(tolerance=1e-4, seeds=20)
    ok = summary.passed and summary.seconds < 60.0
    worst = ", ".join(f"{k}={v:.1e}" for k, v in summary.worst().items())
    report(1, ok, f"seeds=20 worst_rel[{worst}] seconds={summary.seconds:.1f}")
    assert summary.passed
    assert summary.seconds < 60.0


# 2 -------------------------------------------------------------------------
def test_criterion_2_sinkhorn_marginals(report):
    # scores are cosines of unit features against unit prototypes at the default width
    B, C, d, eps, iters = 8, 4, 64, 0.05, 50
    t0 = time.perf_counter()
    row_errs, col_errs, devs = [], [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        feats = nm.l2_normalize(rng.standard_normal((B, d)))
        J = nm.l2_normalize(rng.standard_normal((C, d)))
        code = sinkhorn_assign(feats, J, eps, iters)
        ref = oracle_sinkhorn(feats @ J.T, eps)
        row_errs.append(code.row_err)
        col_errs.append(code.col_err)
        devs.append(float(np.abs(code.u - ref.assignment).max()))
    seconds = time.perf_counter() - t0
    ok = max(row_errs) < 1e-6 and max(col_errs) < 1e-4 and max(devs) < 1e-4 and seconds < 10
    n_bad = sum(c >= 1e-4 or dv >= 1e-4 for c, dv in zip(col_errs, devs))
    report(
        2,
        ok,
        f"max_row_err={max(row_errs):.1e} max_col_err={max(col_errs):.1e} "
        f"max_oracle_dev={max(devs):.1e} failing_matrices={n_bad}/100 seconds={seconds:.2f}",
    )
    assert max(row_errs) < 1e-6
    assert max(col_errs) < 1e-4
    assert max(devs) < 1e-4
    assert seconds < 10


# 3 -------------------------------------------------------------------------
def test_criterion_3_info_nce_closed_forms(report):
    with nm.precision("f64"):
        x = np.array([[1.0, 0.0, 0.0]])
        b1 = [info_nce(x, x, tau, d).item() for tau in (0.07, 0.5, 1.0) for d in ("row", "column")]
        worst = 0.0
        for B in (2, 4, 8):
            eye = np.eye(B, 16)
            for tau in (0.07, 0.5, 1.0):
                expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + B - 1))
                for d in ("row", "column"):
                    worst = max(worst, abs(info_nce(eye, eye, tau, d).item() - expected))
    ok = all(v == 0.0 for v in b1) and worst < 1e-8
    report(3, ok, f"B=1 losses={set(b1)} max_closed_form_dev={worst:.1e}")
    assert all(v == 0.0 for v in b1)
    assert worst < 1e-8


# 4 -------------------------------------------------------------------------
def test_criterion_4_divergence_algebra(report):
    rng = np.random.default_rng(0)
    f = {"fv.a": rng.standard_normal((3, 4)), "ft.b": rng.standard_normal(5)}
    o0 = DivergenceState({"fv.a": rng.standard_normal((3, 4))}, {"ft.b": rng.standard_normal(5)})
    copy = blend_update(o0, f, 1.0, 1.0)
    exact_copy = all(np.array_equal(copy.merged()[k], f[k]) for k in f)
    same = blend_update(o0, f, 0.0, 0.0)
    identity = all(np.array_equal(same.merged()[k], o0.merged()[k]) for k in f)
    worst = 0.0
    for s in (0.1, 0.37, 0.8):
        st = o0
        for n in range(1, 21):
            st = blend_update(st, f, s, s)
            for k in f:
                expected = f[k] + (1 - s) ** n * (o0.merged()[k] - f[k])
                worst = max(worst, float(np.abs(st.merged()[k] - expected).max()))
    ok = exact_copy and identity and worst < 1e-9
    report(4, ok, f"s=1 exact={exact_copy} s=0 identity={identity} geometric_dev={worst:.1e}")
    assert exact_copy and identity
    assert worst < 1e-9


# 5 -------------------------------------------------------------------------
def test_criterion_5_mi_lower_bound(report):
    # two equiprobable classes; the text keeps the image's class with prob 1-p
    p, B, n_batches, tau = 0.1, 4, 10_000, 0.5
    mi = math.log(2) + p * math.log(p) + (1 - p) * math.log(1 - p)
    rng = np.random.default_rng(0)
    protos = np.array([[1.0, 0.0], [-1.0, 0.0]])
    losses = np.empty(n_batches)
    with nm.precision("f64"):
        for i in range(n_batches):
            a = rng.integers(0, 2, size=B)
            b = np.where(rng.random(B) < p, 1 - a, a)
            losses[i] = info_nce(protos[a], protos[b], tau).item()
    bound = math.log(B - 1) - losses.mean()
    se = losses.std(ddof=1) / math.sqrt(n_batches)
    ok = bound <= mi + 3 * se
    report(5, ok, f"log(B-1)-L={bound:.4f} analytic_MI={mi:.4f} 3sigma={3 * se:.4f}")
    assert bound <= mi + 3 * se


# 6 -------------------------------------------------------------------------
def test_criterion_6_end_to_end_training(report):
    runs = [_run(s, "full") for s in SEEDS]
    seconds = sum(r[3] for r in runs)
    r1 = statistics.median(r[2]["recall@1"] for r in runs)
    pur = statistics.median(r[2]["purity"] for r in runs)
    decreased = sum(r[1] < r[0] for r in runs)
    ok = r1 >= 0.60 and pur >= 0.70 and decreased == 5 and seconds < 300
    report(
        6,
        ok,
        f"median_recall@1={r1:.3f} median_purity={pur:.3f} loss_decreased={decreased}/5 "
        f"train_seconds={seconds:.0f} per_seed_recall={[round(r[2]['recall@1'], 3) for r in runs]} "
        f"per_seed_purity={[round(r[2]['purity'], 3) for r in runs]}",
    )
    assert r1 >= 0.60
    assert decreased == 5
    assert seconds < 300
    assert pur >= 0.70


# 7 -------------------------------------------------------------------------
def test_criterion_7_false_negative_mechanism(report):
    full = [_run(s, "full")[2]["false_negative_gap"] for s in SEEDS]
    abl = [_run(s, "no_category")[2]["false_negative_gap"] for s in SEEDS]
    wins = sum(a > b for a, b in zip(full, abl))
    report(7, wins >= 4, f"wins={wins}/5 full={np.round(full, 3).tolist()} no_category={np.round(abl, 3).tolist()}")
    assert wins >= 4


# 8 -------------------------------------------------------------------------
def test_criterion_8_ablation_direction(report):
    base = _median("full", "recall@1")
    deltas = {v: _median(v, "recall@1") - base for v in ("no_global", "no_local", "no_category")}
    purity_drop = _median("full", "purity") - _median("no_category", "purity")
    ok = all(d <= 0.02 for d in deltas.values()) and purity_drop >= 0.05
    detail = " ".join(f"{k}_recall_delta={v:+.3f}" for k, v in deltas.items())
    report(8, ok, f"{detail} category_purity_drop={purity_drop:+.3f}")
    assert all(d <= 0.02 for d in deltas.values())
    assert purity_drop >= 0.05


# 9 -------------------------------------------------------------------------
def test_criterion_9_determinism_and_persistence(report, tmp_path: Path):
    cfg = Config(steps=40, samples_per_class=40)
    data = generate_dataset(cfg)
    a = train(cfg, data, out_dir=tmp_path / "a")
    train(cfg, data, out_dir=tmp_path / "b")
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    same_csv = csv_a == csv_b and csv_a == metrics_csv(a.records).encode()
    same_ckpt = (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    before = evaluate(a.model, data)
    after = evaluate(MLIPModel.load(tmp_path / "a" / "final.ckpt"), data)
    same_eval = before == after
    ok = same_csv and same_ckpt and same_eval
    report(9, ok, f"metrics_csv_identical={same_csv} checkpoints_identical={same_ckpt} eval_roundtrip_identical={same_eval}")
    assert same_csv and same_ckpt
    assert same_eval
