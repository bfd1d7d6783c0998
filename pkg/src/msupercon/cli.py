"""Command-line entry point: generate, train, eval, embed, selfcheck.

Exit codes: 0 success, 1 a self-check failed, 2 usage/config/data error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_run_config
from .data import SPLITS, generate_synthetic, load_manifest, resolve_manifest
from .errors import MSCNError, NumericalError
from .evaluation import embed, evaluate_classifier, evaluate_embeddings
from .model import load_checkpoint
from .training import run_pipeline, thread_limits

log = logging.getLogger("msupercon")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _load_split(data, split: str, num_classes: int, required: bool = True):
    path = resolve_manifest(data, split)
    if not path.is_file():
        if required:
            raise FileNotFoundError(f"manifest not found: {path}")
        return None
    return load_manifest(path, num_classes=num_classes)


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config, args.set)
    out = Path(args.out or cfg.doc["paths"]["out"] or "data")
    manifests = generate_synthetic(cfg.synthetic_spec(), out)
    for split, m in manifests.items():
        counts = np.bincount([r.label for r in m.rows], minlength=cfg.num_classes)
        print(f"{split}: {len(m.rows)} samples, class counts {counts.tolist()}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set)
    if args.num_aux is not None:
        overrides.append(f"model.num_aux={args.num_aux}")
    cfg = load_run_config(args.config, overrides)
    data = args.data or cfg.doc["paths"]["data"]
    if data is None:
        raise FileNotFoundError("no dataset given (--data or paths.data)")
    out = Path(args.out or cfg.doc["paths"]["out"] or "run")
    train = _load_split(data, "train", cfg.num_classes)
    val = test = None
    if Path(data).is_dir():
        val = _load_split(data, "val", cfg.num_classes, required=False)
        test = _load_split(data, "test", cfg.num_classes, required=False)
    config = cfg.train_config(image_shape=train[0].image.shape)
    params, report = run_pipeline(config, train, val=val, test=test, out_dir=out, stage1_only=args.stage1_only)
    for r in report.records:
        acc = "" if r.train_accuracy is None else f" train_accuracy {r.train_accuracy:.4f}"
        print(f"stage {r.stage} epoch {r.epoch:>2} mean_loss {r.mean_loss:.6f}{acc}")
    for split, entry in report.final.items():
        q = entry["embedding_quality"]
        acc = f" accuracy {entry['accuracy']:.4f}" if "accuracy" in entry else ""
        print(f"{split}:{acc} separation_ratio {q['separation_ratio']:.4f} silhouette {q['silhouette']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    ds = _load_split(args.data, args.split, params.config.num_classes)
    with thread_limits():
        ev = evaluate_classifier(params, ds)
        quality = evaluate_embeddings(params, ds)
    report = {**ev.to_dict(), "embedding_quality": quality.to_dict()}
    if args.report:
        _dump_json(report, Path(args.report))
    print(f"accuracy {ev.accuracy:.4f}")
    recall = ", ".join("n/a" if r is None else f"{r:.4f}" for r in ev.per_class_recall)
    print(f"per-class recall [{recall}]")
    return EXIT_OK


def cmd_embed(args) -> int:
    params = load_checkpoint(args.ckpt)
    ds = _load_split(args.data, args.split, params.config.num_classes)
    with thread_limits():
        z = embed(params, ds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", *(f"z{k}" for k in range(z.shape[1]))])
        for s, row in zip(ds, z):
            w.writerow([s.sample_id, s.label, *(repr(float(v)) for v in row)])
    print(f"wrote {len(ds)} embeddings of dim {z.shape[1]} to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    with thread_limits():
        results = run_selfcheck(instances=args.instances, seed=args.seed, perturb=args.perturb_grad, factor=args.perturb_factor)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = load_run_config(args.config, args.set)
    print(json.dumps(cfg.doc, indent=2, sort_keys=True))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msupercon", description="Two-stage supervised contrastive training with multimodal fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration JSON (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. train.epochs_stage1=3")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    with_config(g)
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="stage 1 then stage 2; writes checkpoint and reports")
    with_config(t)
    t.add_argument("--data", help="dataset root or train manifest CSV")
    t.add_argument("--out", help="run directory")
    t.add_argument("--stage1-only", action="store_true", help="skip classifier training")
    t.add_argument("--num-aux", type=int, choices=(0, 1, 2, 4), help="number of auxiliaries fused (overrides model.num_aux)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset root or manifest CSV")
    e.add_argument("--split", default="test", choices=SPLITS, help="split used when --data is a root (default test)")
    e.add_argument("--report", help="evaluation report JSON path")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="export projection embeddings as CSV")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test", choices=SPLITS)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_embed)

    s = sub.add_parser("selfcheck", help="gradient checks, loss oracles and freeze invariants")
    s.add_argument("--instances", type=int, default=20, help="random instances per gradient check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--perturb-grad", metavar="OP", help="corrupt one op's gradient rule (mutation test)")
    s.add_argument("--perturb-factor", type=float, default=1.01)
    s.set_defaults(func=cmd_selfcheck)

    c = sub.add_parser("config", help="print the resolved configuration")
    with_config(c)
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MSCNError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
