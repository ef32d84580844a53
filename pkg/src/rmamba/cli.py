"""Command-line interface.

Subcommands: train, eval, predict, gradcheck, bench-scan, synth.
Exit codes: 0 success, 1 operational failure (diagnostic on stderr),
2 usage errors (argparse).
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import bench, kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig, load_config_file
from .data import (load_dataset, load_image, save_dataset_dir, save_gray_file,
                   save_mask_file, split_dataset, synth_dataset, write_atomic)
from .trainer import evaluate, train


def _resolve_data(spec, size):
    """`<dir>` or `synth:<seed>:<n>` to a Dataset."""
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad synth spec {spec!r}, expected synth:<seed>:<n>")
        return synth_dataset(int(parts[1]), int(parts[2]), size=size)
    return load_dataset(spec, size=size)


def _load_configs(path) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    return load_config_file(path)


def _csv_bytes(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def cmd_train(args):
    model_cfg, train_cfg = _load_configs(args.config)
    ds = _resolve_data(args.data, train_cfg.image_size)
    train_ds, val_ds, test_ds = split_dataset(ds, train_cfg.seed,
                                              val_fraction=train_cfg.val_fraction,
                                              test_fraction=train_cfg.test_fraction)
    if len(val_ds) == 0:
        train_ds, val_ds = ds, ds  # tiny desk runs: validate on the training set
    print(f"training on {len(train_ds)} images, validating on {len(val_ds)} "
          f"(variant {model_cfg.resolved().variant}, attention {model_cfg.resolved().attention})")
    model, history = train(model_cfg, train_cfg, train_ds, val_ds, log=print)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "best.ckpt", model, seed=train_cfg.seed)
    rows = [(h.epoch, f"{h.train_loss:.6f}", f"{h.val_loss:.6f}", f"{h.lr:.8g}") for h in history]
    write_atomic(out / "history.csv", _csv_bytes(rows, ("epoch", "train_loss", "val_loss", "lr")))
    print(f"saved checkpoint and history to {out}")
    return 0


CSV_HEADER = ("Dice", "mIoU", "Recall", "Precision", "F2", "HD")


def cmd_eval(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    size = args.size
    ds = _resolve_data(args.data, size)
    records, mean = evaluate(model, ds)
    rows = [[f"{v:.6f}" for v in rec.as_row()] for _, rec in records]
    rows.append([f"{v:.6f}" for v in mean.as_row()])  # final row: column means
    write_atomic(args.csv, _csv_bytes(rows, CSV_HEADER))
    printable = ", ".join(f"{k} {v:.4f}" for k, v in zip(CSV_HEADER, mean.as_row()))
    print(f"evaluated {len(records)} images: {printable}")
    print(f"wrote {args.csv}")
    return 0


def cmd_predict(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    size = args.size
    image = load_image(args.image, size)
    from .tensor import Tensor, no_grad
    with no_grad():
        preds = model(Tensor(image[None]))
    mask = (preds.final.data[0, 0] >= 0.5).astype(np.float32)
    out = Path(args.mask_out)
    save_mask_file(out, mask)
    # side outputs, coarse to fine
    for stage_idx, prob in zip((4, 3, 2, 1), preds.probs):
        side = out.with_name(f"{out.stem}_stage{stage_idx}{out.suffix}")
        save_gray_file(side, prob.data[0, 0])
    print(f"wrote {out} and 4 side-output maps")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all
    results, elapsed = run_all(verbose=True, log=print)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed "
          f"in {elapsed:.1f}s (backend: {kernels.backend_name()})")
    return 1 if failed else 0


def cmd_bench_scan(args):
    lengths = [int(v) for v in args.lengths.split(",")]
    rows = bench.run_bench(lengths)
    print(format_backend_note())
    print(bench.format_table(rows))
    ratio = bench.sequential_slope_ratio(rows)
    print(f"sequential ns/element max/min across lengths: {ratio:.2f}x")
    return 0


def format_backend_note():
    return (f"active backend: {kernels.backend_name()} "
            f"(available: {', '.join(kernels.available_backends())}; "
            f"set RMAMBA_NUMBA=0 for the pure-numpy path)")


def cmd_synth(args):
    ds = synth_dataset(args.seed, args.n, size=args.size)
    save_dataset_dir(ds, args.out)
    print(f"wrote {args.n} image/mask pairs to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="rmamba",
                                     description="Selective-scan segmentation network: train, evaluate, predict.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key=value config file (defaults used if omitted)")
    p.add_argument("--data", required=True, help="dataset dir or synth:<seed>:<n>")
    p.add_argument("--out", required=True, help="output directory for checkpoint and history")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset dir or synth:<seed>:<n>")
    p.add_argument("--csv", required=True, help="output CSV path")
    p.add_argument("--size", type=int, default=256, help="ingestion image size")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask-out", required=True, dest="mask_out", help="output PNG/PGM mask path")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time the scan kernels")
    p.add_argument("--lengths", default="1024,2048,4096")
    p.set_defaults(fn=cmd_bench_scan)

    p = sub.add_parser("synth", help="materialize a synthetic dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
