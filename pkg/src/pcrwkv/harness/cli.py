"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, bad input, mismatch),
2 I/O error (missing files, refusing to overwrite).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from ..data import CloudStore, Manifest, build_benchmark, load_manifest
from ..errors import PcrwkvError
from ..model import Model
from .ablate import SUITES, ablate
from .bench import bench_agt, bench_kernels, slopes, write_bench
from .evaluate import evaluate, write_eval
from .runconfig import load_run_config
from .train import train

log = logging.getLogger("pcrwkv")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_gen_data(args) -> int:
    manifest = load_manifest(args.manifest) if args.manifest else Manifest()
    counts = build_benchmark(manifest, args.out, force=args.force)
    print(f"wrote benchmark to {args.out}")
    print("domain\tsplit\t" + "\t".join(manifest.classes))
    for domain, splits in counts.items():
        for split, per_class in splits.items():
            print(f"{domain}\t{split}\t" + "\t".join(map(str, per_class)))
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config, seed=args.seed)
    if args.out:
        rc = rc.with_(out_dir=str(Path(args.out).resolve()))
    t0 = time.perf_counter()
    result = train(rc)
    seconds = time.perf_counter() - t0
    store = CloudStore(rc.data_root)
    ev = evaluate(result.model, store, rc.target, rc.train.eval_batch)
    write_eval(ev, rc.out_dir, store.manifest().classes)
    with open(Path(rc.out_dir) / "run_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "seed", "target_accuracy", "best_val_accuracy", "best_epoch", "train_seconds",
                    "parameters"])
        w.writerow([rc.target, rc.seed, repr(ev.accuracy), repr(result.best_val_acc), result.best_epoch,
                    f"{seconds:.3f}", result.model.num_parameters()])
    print(f"best source-val accuracy {result.best_val_acc:.4f} at epoch {result.best_epoch}")
    print(f"target {rc.target} accuracy {ev.accuracy:.4f}; outputs in {rc.out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    config = Path(args.config) if args.config else ckpt.parent / "run.cfg"
    rc = load_run_config(config)
    store = CloudStore(rc.data_root)
    model = Model.load(ckpt, rc.model)
    ev = evaluate(model, store, args.task, rc.train.eval_batch)
    out = Path(args.out) if args.out else ckpt.parent
    paths = write_eval(ev, out, store.manifest().classes)
    print(f"target {args.task} accuracy {ev.accuracy:.4f}")
    for c, name in enumerate(store.manifest().classes):
        print(f"  {name:10s} {ev.per_class[c]:.4f}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config)
    out = Path(args.out) if args.out else Path(rc.out_dir) / "ablation"
    table = ablate(
        rc,
        args.suite,
        seeds=args.seeds,
        tasks=args.tasks.split(",") if args.tasks else None,
        jobs=args.jobs,
        cache_dir=str(out / "cells"),
    )
    table.write(out)
    print(table.to_text())
    return 0


def cmd_bench(args) -> int:
    rows = bench_kernels(args.kernel, args.lengths, width=args.width, repeats=args.repeats)
    if args.agt_sizes:
        rows += bench_agt(args.agt_sizes, width=args.width)
    write_bench(rows, args.out)
    print("kind\tsize\tflops\tseconds")
    for r in rows:
        print(f"{r.kind}\t{r.size}\t{r.flops}\t{r.seconds:.6f}")
    for kind, s in slopes(rows).items():
        parts = [f"{k}={v:.3f}" for k, v in s.items()]
        print(f"{kind}: log-log " + ", ".join(parts))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcrwkv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialise the synthetic multi-domain benchmark")
    g.add_argument("--manifest", help="manifest file (defaults to the built-in 5-class, 4-domain setup)")
    g.add_argument("--out", default="data/synthetic")
    g.add_argument("--force", action="store_true", help="overwrite an existing tree")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on source domains of one leave-one-out task")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="override [run] out_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a target domain")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True, help="target domain name")
    e.add_argument("--config", help="run config (default: run.cfg next to the checkpoint)")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite over tasks and seeds")
    a.add_argument("--suite", required=True, choices=sorted(SUITES))
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    a.add_argument("--tasks", help="comma-separated target domains (default: all)")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench", help="FLOP counts and timings versus sequence length")
    b.add_argument("--kernel", action="append", choices=["biwkv", "softmax"], required=True)
    b.add_argument("--lengths", type=_int_list, default=[1024, 2048, 4096, 8192, 16384])
    b.add_argument("--agt-sizes", type=_int_list, default=None)
    b.add_argument("--width", type=int, default=16)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PcrwkvError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
