"""Command-line entry point: ``mlip {gen-data,train,evaluate,gradcheck,sinkhorn}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import DATASET_KEYS, Config, load_config

log = logging.getLogger("mlip")


def _defaults_epilog(keys=None) -> str:
    cfg = Config()
    lines = ["config keys and defaults (key = value):"]
    for line in cfg.to_text().splitlines():
        if keys is None or line.split(" = ", 1)[0] in keys:
            lines.append("  " + line)
    return "\n".join(lines)


def cmd_gen_data(args) -> int:
    from .data import generate_dataset

    cfg = load_config(args.spec, allowed=DATASET_KEYS) if args.spec else Config()
    data = generate_dataset(cfg)
    path = data.save(args.out)
    (Path(args.out) / "dataset.cfg").write_text(
        "".join(f"{k} = {v}\n" for k, v in (ln.split(" = ", 1) for ln in cfg.to_text().splitlines()) if k in DATASET_KEYS)
    )
    print(f"wrote {path} ({len(data)} samples, {len(data.train_idx)} train / {len(data.test_idx)} test)")
    return 0


def cmd_train(args) -> int:
    from .data import PairedDataset, generate_dataset
    from .train import TrainingDiverged, train

    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.precision is not None:
        cfg = cfg.replace(precision=args.precision)
    data = PairedDataset.load(args.data) if args.data else generate_dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    try:
        result = train(cfg, data, out_dir=out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"steps={cfg.steps} initial_loss={result.initial_loss:.6g} final_loss={result.final_loss:.6g}")
    print(f"checkpoint={result.checkpoints[-1]} metrics={out / 'metrics.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    from .data import PairedDataset
    from .evaluate import evaluate
    from .model import MLIPModel

    model = MLIPModel.load(args.checkpoint)
    data = PairedDataset.load(args.data)
    metrics = evaluate(model, data)
    for k in sorted(metrics):
        print(f"{k}={metrics[k]:.6g}")
    report = Path(args.report) if args.report else Path(args.checkpoint).with_suffix(".eval.json")
    report.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    summary = run_gradcheck(args.module, args.tolerance, args.seeds, args.max_entries)
    for line in summary.lines():
        print(line)
    print(f"seconds={summary.seconds:.1f} result={'PASS' if summary.passed else 'FAIL'}")
    return 0 if summary.passed else 1


def cmd_sinkhorn(args) -> int:
    from .kernels import sinkhorn
    from .verify import oracle_sinkhorn

    rng = np.random.default_rng(args.seed)
    scores = rng.uniform(-1.0, 1.0, size=(args.b, args.c))
    u = sinkhorn(scores, args.eps, args.iters)
    ref = oracle_sinkhorn(scores, args.eps)
    print(f"row_err={np.abs(u.sum(axis=1) - 1).max():.3e}")
    print(f"col_err={np.abs(u.sum(axis=0) - args.b / args.c).max():.3e}")
    print(f"oracle_dev={np.abs(u - ref.assignment).max():.3e}")
    print(f"oracle_iters={ref.iterations} oracle_converged={ref.converged}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlip", description="Synthetic multi-level image-text pre-training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset", epilog=_defaults_epilog(DATASET_KEYS), formatter_class=raw)
    g.add_argument("--spec", help="key = value dataset file (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write checkpoints plus metrics.csv", epilog=_defaults_epilog(), formatter_class=raw)
    t.add_argument("--config", help="key = value config file (defaults when omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory from gen-data; generated from the config when omitted")
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("f32", "f64"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="held-out retrieval, clustering and false-negative metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="JSON output path (default: <checkpoint>.eval.json)")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss; exit 0 iff all pass")
    c.add_argument("--module", choices=("global_ita", "local_ita", "category_cl", "proxy"))
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--max-entries", type=int, default=2, help="probed entries per parameter tensor")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sinkhorn", help="marginal errors of Sinkhorn codes on random scores")
    s.add_argument("--b", type=int, default=8)
    s.add_argument("--c", type=int, default=4)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sinkhorn)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
