"""Command-line entry point.

Subcommands: synth-gen, baseline-pca, train, predict, eval, attn-dump.
Every command takes --seed and writes its artifacts under --out. Runs with
identical flags and seeds produce byte-identical CSV outputs. HGT_THREADS
caps evaluation parallelism over frames (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import training as tr
from .errors import ContractError, DatasetFormatError
from .model import ModelParams


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"pane grid must look like 4x4, got {text!r}") from e


def _write_args(out_dir: str, args: argparse.Namespace) -> None:
    os.makedirs(out_dir, exist_ok=True)
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(out_dir, "run_args.json"), "w") as f:
        json.dump(doc, f, indent=1, default=str)


def cmd_synth_gen(args) -> int:
    n_test = args.test_frames if args.test_frames is not None else max(1, round(args.frames * 0.2))
    n_train = args.frames - n_test
    if n_train < 1:
        print(f"error: {args.frames} frames leave no training split", file=sys.stderr)
        return 1
    _write_args(args.out, args)
    manifest = ds.generate_dataset(
        args.out, n_train=n_train, n_test=n_test, size=args.size,
        noise_level=args.noise, seed=args.seed, target_points=args.points,
        full_cover=args.full_cover,
    )
    print(f"wrote {len(manifest.frames)} frames ({n_train} train / {n_test} test) to {args.out}")
    return 0


def _run_eval(args, method: str, params: ModelParams | None) -> int:
    store = ds.FrameStore(args.data)
    report = ev.evaluate_method(
        store, args.split, method, params=params, seed=args.seed,
        pane_grid=args.pane_grid,
    )
    _write_args(args.out, args)
    ev.write_per_point_csv(os.path.join(args.out, "per_point.csv"), report)
    ev.write_quantile_csv(os.path.join(args.out, "quantile.csv"), report)
    ev.write_summary_csv(os.path.join(args.out, "report.csv"), ev.summary_rows([report]))
    table = ev.summarize([report])
    with open(os.path.join(args.out, "summary.txt"), "w") as f:
        f.write(table)
    if getattr(args, "trace", False):
        if params is None:
            print("error: --trace needs a model method", file=sys.stderr)
            return 1
        for fid in store.ids(args.split):
            ev.export_frame_attention(params, store, fid,
                                      os.path.join(args.out, "trace", fid), seed=args.seed)
    print(table, end="")
    print(f"mean angle error: {report.mean_angle_deg:.3f} deg over {args.split} split")
    return 0


def cmd_baseline_pca(args) -> int:
    return _run_eval(args, "pca", None)


def cmd_train(args) -> int:
    config = tr.TrainConfig.from_json(args.config)
    if args.out:
        config.out_dir = args.out
    if args.data:
        config.dataset_root = args.data
    if args.seed is not None:
        config.seed = args.seed
    result = tr.train(config)
    last = [r for r in result.reports if r.split == "test"][-1]
    print(f"finished {config.epochs} epochs; test mean angle {last.mean_angle_deg:.3f} deg")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss report: {result.loss_csv_path}")
    return 0


def cmd_predict(args) -> int:
    params = ModelParams.load(args.checkpoint)
    store = ds.FrameStore(args.data)
    from .model import context_for_frame, predict_frame
    from .training import make_panes

    _write_args(args.out, args)
    order = {fid: i for i, fid in enumerate(store.ids())}
    for fid in store.ids(args.split):
        frame = store.load(fid)
        ctx = context_for_frame(frame, params.config, args.seed, order[fid])
        subsets = None if args.pane_grid is None else make_panes(frame, args.pane_grid)
        pred = predict_frame(params, ctx, pane_subsets=subsets)
        ds.write_f64(os.path.join(args.out, f"pred_{fid}.f64"), pred.vectors)
        ds.write_f64(os.path.join(args.out, f"quality_{fid}.f64"),
                     pred.quality_mask.astype(np.float64))
    print(f"wrote predictions for {len(store.ids(args.split))} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = None
    if args.method in ("hgt", "hgn"):
        if not args.checkpoint:
            print("error: --checkpoint is required for model methods", file=sys.stderr)
            return 1
        params = ModelParams.load(args.checkpoint)
    return _run_eval(args, args.method, params)


def cmd_attn_dump(args) -> int:
    params = ModelParams.load(args.checkpoint)
    store = ds.FrameStore(args.data)
    _write_args(args.out, args)
    paths = ev.dump_attention(params, store, args.frame, args.point, args.out, seed=args.seed)
    row = paths["row"]
    print(f"dumped {len(paths['blocks'])} attention blocks for frame {args.frame}, "
          f"point {args.point} (row sum {row.sum():.6f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgt", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    g.add_argument("--frames", type=int, required=True, help="total frame count")
    g.add_argument("--test-frames", type=int, default=None,
                   help="frames held out for testing (default: 20%%)")
    g.add_argument("--size", type=int, default=ds.DEFAULT_IMAGE_SIZE)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--points", type=int, default=None, help="target points per frame")
    g.add_argument("--full-cover", action="store_true",
                   help="enclose the scene and sample rays over the whole image")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_synth_gen)

    for name, fn in (("baseline-pca", cmd_baseline_pca), ("eval", cmd_eval)):
        e = sub.add_parser(name, help=f"{name} over a dataset split")
        if name == "eval":
            e.add_argument("--method", choices=("pca", "hgt", "hgn"), required=True)
            e.add_argument("--checkpoint", default=None)
            e.add_argument("--trace", action="store_true",
                           help="also export per-frame attention matrices")
        e.add_argument("--data", required=True)
        e.add_argument("--split", choices=("train", "test"), default="test")
        e.add_argument("--pane-grid", type=_parse_grid, default=None,
                       help="evaluate attention per pane, e.g. 4x4 (default: full frame)")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", required=True)
        e.set_defaults(func=fn)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", default=None, help="override dataset root")
    t.add_argument("--out", default=None, help="override output directory")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write per-frame normal predictions")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", choices=("train", "test"), default="test")
    pr.add_argument("--pane-grid", type=_parse_grid, default=None)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("attn-dump", help="export attention matrices for one frame")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--frame", required=True)
    a.add_argument("--point", type=int, required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attn_dump)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, DatasetFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
