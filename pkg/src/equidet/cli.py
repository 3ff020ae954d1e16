"""Command line entry point.

Subcommands: synth (dataset generation), degrade (degraded-pair dumps),
train, eval, infer and report.  Every run writes a manifest with the fully
resolved configuration into its output directory; flags override values
from an optional JSON config file.  EQUIDET_OUTPUT_DIR provides a default
--out when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import degrade as dg
from . import evaluate as ev
from . import scenes as sc
from . import train as tr
from .errors import DatasetError, EquidetError
from .imgio import load_png, save_png

DEFAULT_SEED = 0


def _seed(args) -> int:
    return DEFAULT_SEED if args.seed is None else args.seed


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("EQUIDET_OUTPUT_DIR")
    if not out:
        raise DatasetError("no output directory given (use --out or EQUIDET_OUTPUT_DIR)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, command: str, payload: dict) -> None:
    with open(out / "manifest.json", "w") as f:
        json.dump({"command": command, "version": __version__, **payload}, f, indent=2, default=str)


def _cmd_synth(args) -> int:
    out = _out_dir(args)
    config = sc.SceneConfig(
        image_side=args.image_side,
        num_classes=args.num_classes,
        objects_per_image=(args.objects_min, args.objects_max),
        object_side_range=(args.side_min, args.side_max),
        background=args.background,
        rng_seed=_seed(args),
    )
    sc.generate_dataset(config, args.count, "train", out / "train")
    if args.test_count:
        sc.generate_dataset(config, args.test_count, "test", out / "test")
    _write_manifest(out, "synth", {"config": asdict(config), "count": args.count, "test_count": args.test_count})
    print(f"wrote {args.count} train / {args.test_count} test scenes to {out}")
    return 0


def _cmd_degrade(args) -> int:
    out = _out_dir(args)
    scenes = sc.load_dataset(Path(args.dataset))
    if args.count:
        scenes = scenes[: args.count]
    sampler = dg.SamplerConfig(
        hr_side=scenes[0].image.shape[0] if scenes else 128,
        scale_range=ev._PROTOCOL_SCALE[args.protocol],
    )
    rng = np.random.default_rng(_seed(args))
    for scene in scenes:
        params = dg.sample_degradation(rng, sampler)
        lr = dg.degrade(scene.image, params, rng)
        stem = f"pair_{scene.scene_id:05d}"
        save_png(scene.image, out / f"{stem}_hr.png")
        save_png(lr, out / f"{stem}_lr.png")
        target = dg.normalize_params(params)
        with open(out / f"{stem}_params.json", "w") as f:
            json.dump(
                {
                    "kernel_type": params.kernel_type,
                    "kernel_size": params.kernel_size,
                    "width_major": params.width_major,
                    "width_minor": params.width_minor,
                    "angle": params.angle,
                    "scale": params.scale,
                    "resample_method": params.resample_method,
                    "noise_sigma": params.noise_sigma,
                    "output_size": list(params.output_size),
                    "k_norm": target.k_norm,
                    "s_norm": target.s_norm,
                    "n_norm": target.n_norm,
                },
                f,
                indent=2,
            )
    _write_manifest(
        out,
        "degrade",
        {"dataset": args.dataset, "count": len(scenes), "protocol": args.protocol, "seed": _seed(args)},
    )
    print(f"wrote {len(scenes)} degraded pairs to {out}")
    return 0


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


def _train_config(args) -> tr.TrainConfig:
    base = tr.TrainConfig()
    values = _load_config_file(args.config)
    for key in ("decay_milestones", "stage_widths"):
        if values.get(key) is not None:
            values[key] = tuple(values[key])
    flag_map = {
        "scheme": args.scheme,
        "with_transform_head": args.transform_head,
        "with_restore_head": args.restore_head,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "base_lr": args.base_lr,
        "transform_lr": args.transform_lr,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "warmup_iters": args.warmup_iters,
        "hr_side": args.hr_side,
        "seed": args.seed,
        "transform_stage": args.transform_stage,
        "eval_every": args.eval_every,
    }
    if args.milestones is not None:
        flag_map["decay_milestones"] = tuple(int(m) for m in args.milestones.split(","))
    # flags override the config file, which overrides defaults
    values.update({k: v for k, v in flag_map.items() if v is not None})
    config = replace(base, **values)
    config.validate()
    return config


def _cmd_train(args) -> int:
    out = _out_dir(args)
    config = _train_config(args)
    final, history = tr.train_loop(
        config,
        args.dataset,
        out,
        resume_from=args.resume,
        log=(lambda rec: print(json.dumps(rec))) if args.verbose else None,
    )
    print(f"final checkpoint: {final} ({len(history)} epochs logged)")
    return 0


def _cmd_eval(args) -> int:
    out = _out_dir(args)
    reports = ev.run_benchmark(
        checkpoints={args.name: args.checkpoint},
        test_dir=args.dataset,
        protocol=args.protocol,
        out_dir=out,
        seed=_seed(args),
        max_images=args.max_images,
        measure_speed=not args.no_fps,
    )
    _write_manifest(
        out,
        "eval",
        {"checkpoint": args.checkpoint, "dataset": args.dataset, "protocol": args.protocol, "seed": _seed(args)},
    )
    for name, report in reports.items():
        ap = "n/a" if report.mean_ap50 is None else f"{report.mean_ap50:.3f}"
        print(f"{name}: AP50={ap} over {report.num_images} images")
    return 0


def _cmd_infer(args) -> int:
    out = _out_dir(args)
    model, config = tr.model_from_checkpoint(args.checkpoint)
    image = load_png(args.image)
    detections = ev.infer(model, image, score_threshold=args.threshold)
    save_png(ev._draw_detections(image, detections), out / "detections.png")
    payload = [
        {"box": d.box.as_list(), "class_id": d.class_id, "class": sc.CLASS_NAMES[d.class_id], "score": d.score}
        for d in detections
    ]
    with open(out / "detections.json", "w") as f:
        json.dump(payload, f, indent=2)
    _write_manifest(out, "infer", {"checkpoint": args.checkpoint, "image": args.image, "threshold": args.threshold})
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_report(args) -> int:
    out = _out_dir(args)
    rows = []
    for path in args.results:
        with open(path) as f:
            rows.extend(json.loads(line) for line in f if line.strip())
    ev._write_table(rows, out, "merged")
    _write_manifest(out, "report", {"inputs": list(args.results)})
    print((out / "table_merged.txt").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equidet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (or set EQUIDET_OUTPUT_DIR)")
        p.add_argument("--seed", type=int, default=None, help=f"rng seed (default {DEFAULT_SEED})")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--image-side", type=int, default=128)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--objects-min", type=int, default=1)
    p.add_argument("--objects-max", type=int, default=4)
    p.add_argument("--side-min", type=float, default=16.0)
    p.add_argument("--side-max", type=float, default=56.0)
    p.add_argument("--background", choices=sc.BACKGROUNDS, default="textured")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("degrade", help="dump degraded HR/LR pairs with parameter sidecars")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset split directory (e.g. data/train)")
    p.add_argument("--count", type=int, default=0, help="limit the number of pairs (0 = all)")
    p.add_argument("--protocol", choices=ev.PROTOCOLS, default="random")
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("train", help="train one model configuration")
    common(p)
    p.add_argument("--dataset", required=True, help="directory containing train/ (and test/)")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--scheme", choices=tr.SCHEMES)
    p.add_argument("--transform-head", dest="transform_head", action="store_true", default=None)
    p.add_argument("--no-transform-head", dest="transform_head", action="store_false")
    p.add_argument("--restore-head", dest="restore_head", action="store_true", default=None)
    p.add_argument("--no-restore-head", dest="restore_head", action="store_false")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--transform-lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-iters", type=int)
    p.add_argument("--milestones", help="comma-separated decay epochs, e.g. 21,27")
    p.add_argument("--hr-side", type=int)
    p.add_argument("--transform-stage", type=int, choices=(2, 3, 4))
    p.add_argument("--eval-every", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a degraded test set")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="test split directory")
    p.add_argument("--protocol", choices=ev.PROTOCOLS, default="random")
    p.add_argument("--max-images", type=int, default=None)
    p.add_argument("--name", default="model")
    p.add_argument("--no-fps", action="store_true", help="skip throughput measurement")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="run detection on one PNG image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("report", help="merge benchmark results into one table")
    common(p)
    p.add_argument("results", nargs="+", help="results_*.jsonl files to merge")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EquidetError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
