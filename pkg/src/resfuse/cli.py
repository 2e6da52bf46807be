"""Command-line interface.

Subcommands: gen-data, train, eval, predict, gradcheck, compare.
Every run echoes its resolved config as JSON on stdout before acting.
Exit codes: 0 success, 1 usage error, 2 runtime error; failures print a
one-line ``error: <reason>`` on stderr.

RESFUSE_THREADS caps internal (BLAS) parallelism; 1 is fully
deterministic mode. It must take effect before numpy loads, so the
heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_size(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--size expects D,H,W, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--size expects integers, got {text!r}")


def _parse_seeds(text: str):
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="resfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", default="32,32,32")
    g.add_argument("--spec", help="JSON file overriding the phantom spec")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=["plain", "direct", "weighted"],
                   default="weighted")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSONL metrics log path")
    t.add_argument("--crop", type=int, help="cubic training crop size")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--post-only", action="store_true",
                   help="single-sequence baseline: post volume on both branches "
                        "of a plain model")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val"], default="val")
    e.add_argument("--post-only", action="store_true")
    e.add_argument("--export-slices", help="directory for slice/figure exports")

    p = sub.add_parser("predict", help="segment one pre/post volume pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pre", required=True)
    p.add_argument("--post", required=True)
    p.add_argument("--out", required=True, help="output label volume (.rfsv)")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--size", type=int, default=4)
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compare", help="run the variant comparison experiment")
    c.add_argument("--data", required=True)
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--epochs", type=int, default=30)
    c.add_argument("--lr", type=float, default=1e-3)
    c.add_argument("--crop", type=int)
    c.add_argument("--noiseless-data", help="noiseless dataset for the gland "
                                            "false-positive readout")
    c.add_argument("--out-dir", default="compare_out")
    return parser


def _echo_config(args: argparse.Namespace):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    resolved["command"] = args.command
    print(json.dumps(resolved, sort_keys=True))


def _run(args: argparse.Namespace) -> int:
    import numpy as np

    from . import phantom
    from .network import checkpoint_load
    from .training import TrainConfig, evaluate_checkpoint, train
    from .tensor import Tensor, no_grad

    if args.command == "gen-data":
        spec_dict = {"size": _parse_size(args.size)}
        if args.spec:
            with open(args.spec) as fh:
                spec_dict.update(json.load(fh))
        spec = phantom.PhantomSpec.from_dict(spec_dict)
        manifest = phantom.write_dataset(args.out, args.cases, args.seed, spec)
        print(f"wrote {len(manifest['cases'])} cases to {args.out} "
              f"({len(manifest['train'])} train / {len(manifest['val'])} val)")
        return 0

    if args.command == "train":
        config = TrainConfig(
            data_dir=args.data, checkpoint_path=args.out, log_path=args.log,
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
            seed=args.seed, crop_size=args.crop,
            variant="plain" if args.post_only else args.variant,
            post_only=args.post_only)
        result = train(config, resume_path=args.resume)
        print(f"best val DSC {result.best_val_dsc:.4f}; "
              f"checkpoints: {result.last_path} / {result.best_path}")
        return 0

    if args.command == "eval":
        records, agg = evaluate_checkpoint(
            args.ckpt, args.data, args.split, post_only=args.post_only,
            export_dir=args.export_slices)
        for rec in records:
            print(f"case {rec.case}: dsc {rec.dsc:.4f} recall {rec.recall:.4f}")
        print(json.dumps({"split": args.split, **agg}, sort_keys=True))
        return 0

    if args.command == "predict":
        net, _, _ = checkpoint_load(args.ckpt)
        pre = phantom.volume_read(args.pre).astype(np.float32)
        post = phantom.volume_read(args.post).astype(np.float32)
        with no_grad():
            logits = net.forward(Tensor(pre[None, None]), Tensor(post[None, None]))
        pred = logits.data[0].argmax(axis=0).astype(np.uint8)
        phantom.volume_write(args.out, pred)
        print(f"wrote prediction ({int((pred == 1).sum())} foreground voxels) "
              f"to {args.out}")
        return 0

    if args.command == "gradcheck":
        from .verify import REL_TOL, run_suite

        report = run_suite(trials=args.trials, size=args.size, seed=args.seed)
        ok = True
        for name, err in report.items():
            status = "ok" if err <= REL_TOL else "FAIL"
            ok &= err <= REL_TOL
            print(f"{name:<16} max relative error {err:.3e}  {status}")
        if not ok:
            print("error: gradient check exceeded tolerance", file=sys.stderr)
            return 2
        return 0

    if args.command == "compare":
        from .experiment import run_compare
        from .report import format_compare_table, write_compare_report

        results = run_compare(
            args.data, args.out_dir, _parse_seeds(args.seeds), args.epochs,
            lr=args.lr, crop_size=args.crop, noiseless_dir=args.noiseless_data)
        write_compare_report(results, args.out_dir)
        print(format_compare_table(results), end="")
        print(f"report written to {args.out_dir}")
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    threads = os.environ.get("RESFUSE_THREADS")
    if threads:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        args = build_parser().parse_args(argv)
        _echo_config(args)
        return _run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure, one machine-parsable line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
