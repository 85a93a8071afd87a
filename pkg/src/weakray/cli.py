"""Command-line surface.

Subcommands: ``train``, ``eval``, ``localize``, ``sweep``, ``synth-gen``,
``gradcheck``.  Settings come from a flat ``key = value`` config file plus
``--set key=value`` overrides; dataset directories are the layout written
by ``synth-gen`` (or a ``labels.csv``/``boxes.csv`` pair with an
``images/`` directory for pre-labeled data).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from . import data as dataio
from . import localization as loc
from . import training


def _load_flat(args) -> dict:
    flat = {}
    if getattr(args, "config", None):
        flat = cfg.parse_config_text(Path(args.config).read_text())
    return cfg.apply_overrides(flat, getattr(args, "set", None) or [])


def _load_samples(directory, flat, mode="eval"):
    pp = None
    if any(k.startswith("data.") for k in flat):
        pp = cfg.preprocess_from_flat(flat)
    return dataio.load_dataset(directory, pp=pp, mode=mode)


def _cmd_train(args) -> int:
    flat = _load_flat(args)
    samples, class_names = _load_samples(args.data, flat, mode="train")
    config = cfg.train_config_from_flat(flat, default_classes=class_names)
    val_samples = None
    if args.val:
        val_samples, _ = _load_samples(args.val, flat)
    result = training.train(config, samples, val_samples)
    training.save_checkpoint(result.best_checkpoint, args.out)
    header = (
        f"seed = {config.seed}\n"
        f"lr schedule: multiplicative, x{config.lr_decay_factor:g} every "
        f"{config.lr_decay_every} epochs (l2_penalty = {config.l2_penalty:g})\n"
        f"class weights: {'inverted' if config.invert_class_weights else 'as positive fraction'}"
    )
    log_text = result.log_text(header)
    if args.log:
        Path(args.log).write_text(log_text)
    else:
        sys.stdout.write(log_text)
    print(f"checkpoint (best epoch {result.best_epoch}) written to {args.out}")
    return 0


def _expected_hash(args, flat) -> str | None:
    if not getattr(args, "config", None):
        return None
    # hash checking uses the full canonical form of the requested config
    config = cfg.train_config_from_flat(flat)
    return cfg.config_hash(cfg.format_config(cfg.train_config_to_flat(config)))


def _cmd_eval(args) -> int:
    flat = _load_flat(args)
    ckpt = training.load_checkpoint(args.checkpoint)
    samples, _names = _load_samples(args.data, flat)
    result = training.evaluate(
        ckpt,
        samples,
        expected_config_hash=_expected_hash(args, flat),
        heatmap_dir=args.heatmap_dir,
    )
    print(result.classification.to_text())
    if result.localization is not None:
        print(result.localization.to_text())
    else:
        print("localization: n/a (no ground-truth boxes in dataset)")
    if args.report:
        with open(args.report, "w") as f:
            result.classification.to_csv(f)
    if args.boxes:
        model, _ = training.model_from_checkpoint(ckpt)
        with open(args.boxes, "w") as f:
            loc.boxes_to_csv(result.predicted_boxes, model.head.class_names, f)
    return 0


def _cmd_localize(args) -> int:
    flat = _load_flat(args)
    ckpt = training.load_checkpoint(args.checkpoint)
    samples, _names = _load_samples(args.data, flat)
    model, _config = training.model_from_checkpoint(ckpt)
    thresholds = loc.default_thresholds(model.head.class_names)
    if args.threshold_default is not None:
        thresholds = np.full(len(model.head.class_names), args.threshold_default)
    if args.threshold_cardiomegaly is not None:
        for i, name in enumerate(model.head.class_names):
            if name == "Cardiomegaly":
                thresholds[i] = args.threshold_cardiomegaly
    result = training.evaluate(
        model,
        samples,
        box_thresholds=thresholds,
        heatmap_dir=args.heatmap_dir,
        min_box_area=args.min_area,
    )
    with open(args.out, "w") as f:
        loc.boxes_to_csv(result.predicted_boxes, model.head.class_names, f)
    n_boxes = sum(len(b) for b in result.predicted_boxes.values())
    print(f"{n_boxes} boxes over {len(samples)} images written to {args.out}")
    return 0


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise cfg.ConfigError(f"grid entry {item!r} must be key=v1,v2,...")
        key, values = item.split("=", 1)
        key = key.strip()
        cast = float if key == "alpha" else int
        grid[key] = [cast(v) for v in values.split(",") if v.strip()]
    return grid


def _cmd_sweep(args) -> int:
    flat = _load_flat(args)
    samples, class_names = _load_samples(args.data, flat, mode="train")
    config = cfg.train_config_from_flat(flat, default_classes=class_names)
    eval_samples, _ = _load_samples(args.eval_data or args.data, flat)
    checkpoint = training.load_checkpoint(args.checkpoint) if args.checkpoint else None
    grid = _parse_grid(args.grid)
    result = training.sweep(config, grid, samples, eval_samples, checkpoint=checkpoint)
    with open(args.out, "w") as f:
        result.to_csv(f)
    print(f"{len(result.rows)} rows ({result.num_train_runs} training runs) -> {args.out}")
    return 0


def _cmd_synth_gen(args) -> int:
    radius = tuple(int(v) for v in args.radius.split(","))
    spec = dataio.SyntheticSpec(
        image_size=args.size,
        num_classes=args.classes,
        radius_range=radius,
        noise_level=args.noise,
        positive_rate=args.positive_rate,
        seed=args.seed,
    )
    dataio.write_synthetic_dataset(spec, args.n, args.out)
    print(f"{args.n} images ({args.classes} classes, {args.size}px) written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradient_suite

    results = run_gradient_suite(instances=args.instances, tolerance=args.tolerance)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.op:20s} max_rel_err={r.max_error:.3e}  {status}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} ops within {args.tolerance:g}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakray",
        description="Weakly supervised chest radiograph classification and localization.",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="flat key=value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", help="validation dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="write the epoch,split,loss,macro_auroc CSV here")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="classification and localization reports")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write class,auroc CSV here")
    p.add_argument("--boxes", help="write predicted boxes CSV here")
    p.add_argument("--heatmap-dir", help="dump per-(image,class) heatmap PGMs here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("localize", help="extract bounding boxes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="boxes CSV output path")
    p.add_argument("--heatmap-dir")
    p.add_argument("--threshold-cardiomegaly", type=float,
                   help="binarization threshold for the Cardiomegaly class")
    p.add_argument("--threshold-default", type=float,
                   help="binarization threshold for all classes")
    p.add_argument("--min-area", type=float, default=0.0,
                   help="discard boxes smaller than this many pixels")
    p.set_defaults(fn=_cmd_localize)

    p = sub.add_parser("sweep", help="hyperparameter sweep")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="evaluation set (defaults to --data)")
    p.add_argument("--checkpoint", help="reuse this model for test-time-only sweeps")
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2",
                   help="e.g. alpha=0.25,0.5,1 or M=2,14 (repeatable)")
    p.add_argument("--out", required=True, help="sweep CSV output path")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("synth-gen", help="generate a planted-disc dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-rate", type=float, default=0.5)
    p.add_argument("--radius", default="8,13", help="disc radius range LO,HI")
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(fn=_cmd_synth_gen)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (cfg.ConfigError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def console_main() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_main()
