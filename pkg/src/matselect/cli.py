"""Command-line entry point for the whole workflow.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
Every subcommand honors --seed for bitwise-reproducible artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from matselect import ablate as ab
from matselect import core
from matselect import datagen as dg
from matselect import evaluation as ev
from matselect import head as hd
from matselect import trainer as tr
from matselect.core import QueryPoint


class ValidationError(Exception):
    """User input problem: exits with status 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matselect",
                                     description="Two-level material selection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--manifest", help="JSON file of generation settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a selection model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TOML training config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--queries", type=int, default=None, help="queries per image (k)")
    p.add_argument("--single-resolution", action="store_true")
    p.add_argument("--single-level", choices=["texture", "subtexture"])
    p.add_argument("--learning-rate", type=float, default=None)

    p = sub.add_parser("eval", help="run metrics and robustness protocols")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocols", default="metrics",
                   help="comma list: metrics,pixel,zoom,illumination,threshold")
    p.add_argument("--report", required=True, help="output path prefix")
    p.add_argument("--split", default="holdout", choices=["holdout", "train"])
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print the JSON summary to stdout")

    p = sub.add_parser("select", help="click-to-mask on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--x", type=int, required=True)
    p.add_argument("--y", type=int, required=True)
    p.add_argument("--level", default="texture", choices=["texture", "subtexture"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("ablate", help="paired-training ablation suites")
    p.add_argument("--suite", required=True, choices=list(ab.SUITES))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TOML training config")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--config", help="TOML service config")
    p.add_argument("--checkpoint")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--ui-dir")

    p = sub.add_parser("export-features", help="write feature containers for an image's tiles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _train_config(args) -> tr.TrainConfig:
    config = tr.load_train_config(args.config) if args.config else tr.TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["max_steps"] = args.steps
    if getattr(args, "queries", None) is not None:
        overrides["queries_per_image"] = args.queries
    if getattr(args, "single_resolution", False):
        overrides["single_resolution"] = True
    if getattr(args, "single_level", None):
        overrides["single_level"] = args.single_level
    if getattr(args, "learning_rate", None) is not None:
        overrides["learning_rate"] = args.learning_rate
    return replace(config, **overrides) if overrides else config


def cmd_gen_data(args) -> int:
    settings = {}
    if args.manifest:
        settings = json.loads(Path(args.manifest).read_text())
    config = dg.DatasetConfig.from_dict(settings)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory not writable: {exc}") from exc
    manifest = dg.gen_dataset(config, out)
    print(f"wrote {len(manifest['scenes'])} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    result = tr.train(args.data, config, out_checkpoint=args.out, loss_csv=args.loss_csv)
    final = result.losses[-1]["total"] if result.losses else float("nan")
    print(f"trained {len(result.losses)} steps, final loss {final:.4f}, "
          f"checkpoint {args.out}")
    return 0


def cmd_eval(args) -> int:
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    known = {"metrics", "pixel", "zoom", "illumination", "threshold"}
    unknown = set(protocols) - known
    if unknown:
        raise ValidationError(f"unknown protocols {sorted(unknown)}; choose from {sorted(known)}")
    model = hd.load_checkpoint(args.ckpt)
    predictor = ev.CheckpointPredictor(model)
    _, records = dg.load_dataset(args.data)
    records = [r for r in records if r.split == args.split]
    if not records:
        raise ValidationError(f"no scenes in split {args.split!r}")
    levels = model.head_config.levels_out

    summary: dict = {}
    rows: list[dict] = []
    if "metrics" in protocols:
        cases = ev.cases_from_records(records, levels=levels,
                                      queries_per_scene=args.queries, seed=args.seed)
        rows = ev.evaluate_cases(predictor, cases)
        summary["metrics"] = ev.summarize(rows)
    if "pixel" in protocols:
        values = []
        for rec in records:
            out = ev.pixel_consistency(predictor, rec.images()[0], rec.annotation(),
                                       level=levels[-1], seed=args.seed)
            values += [r["hamming"] for r in out if r["hamming"] is not None]
        summary["pixel_consistency"] = float(np.mean(values)) if values else None
    if "zoom" in protocols:
        values = []
        for rec in records:
            ann = rec.annotation()
            h, w = ann.texture_ids.shape
            rng = core.make_rng(args.seed, 5)
            for _ in range(3):
                q = QueryPoint(int(rng.integers(w)), int(rng.integers(h)), w, h)
                values.append(ev.zoom_consistency(predictor, rec.images()[0], q,
                                                  level=levels[-1]))
        summary["zoom_consistency"] = float(np.mean(values))
    if "illumination" in protocols:
        values = []
        for rec in records:
            images = rec.images()
            if len(images) < 2:
                continue
            ann = rec.annotation()
            h, w = ann.texture_ids.shape
            rng = core.make_rng(args.seed, 6)
            q = QueryPoint(int(rng.integers(w)), int(rng.integers(h)), w, h)
            values.append(ev.illumination_consistency(predictor, images, q,
                                                      level=levels[-1]))
        summary["illumination_consistency"] = float(np.mean(values)) if values else None
    if "threshold" in protocols:
        cases = [(c.image, c.q, c.gt_mask) for c in ev.cases_from_records(
            records, levels=(levels[-1],), queries_per_scene=2, seed=args.seed)]
        sens = ev.threshold_sensitivity(predictor, cases, np.linspace(0.3, 0.7, 9),
                                        level=levels[-1])
        summary["threshold_sensitivity"] = sens

    ev.write_report(rows, summary, f"{args.report}.csv", f"{args.report}.json")
    if args.json:
        print(json.dumps(summary, indent=1, sort_keys=True))
    elif "metrics" in summary:
        print(ev.format_table(summary["metrics"]))
    print(f"report written to {args.report}.csv / {args.report}.json", file=sys.stderr)
    return 0


def cmd_select(args) -> int:
    if not (0.0 < args.threshold < 1.0):
        raise ValidationError(f"threshold must lie in (0, 1), got {args.threshold}")
    model = hd.load_checkpoint(args.ckpt)
    image = core.read_image_png(args.image)
    h, w = image.shape[:2]
    if not (0 <= args.x < w and 0 <= args.y < h):
        raise ValidationError(f"click ({args.x}, {args.y}) outside image {w}x{h}")
    if args.level not in model.head_config.levels_out:
        raise ValidationError(f"model has no {args.level!r} channel")
    q = QueryPoint(args.x, args.y, w, h)
    scores, mask = model.select(image, q, level=args.level, threshold=args.threshold)
    prefix = args.out
    core.write_mask_png(f"{prefix}_mask.png", mask)
    for name in model.head_config.levels_out:
        channel = scores[:, :, model.head_config.channel(name)]
        Path(f"{prefix}_scores_{name}.png").write_bytes(core.encode_scores_bytes(channel))
    overlay = image.copy()
    green = np.array([0.0, 1.0, 0.0])
    sel = mask.astype(bool)
    overlay[sel] = 0.5 * overlay[sel] + 0.5 * green
    core.write_image_png(f"{prefix}_overlay.png", overlay)
    print(f"mask area {mask.mean():.3f}; wrote {prefix}_mask.png and friends")
    return 0


def cmd_ablate(args) -> int:
    config = _train_config(args)
    results = ab.run_suite(args.suite, args.data, args.out, config)
    print(json.dumps(results, indent=1, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from matselect import service as sv

    config = sv.ServiceConfig.load(args.config) if args.config else sv.ServiceConfig.load()
    overrides = {}
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if args.port is not None:
        overrides["port"] = args.port
    if args.ui_dir:
        overrides["ui_dir"] = args.ui_dir
    if overrides:
        config = replace(config, **overrides)
    if not config.checkpoint:
        raise ValidationError("no checkpoint configured (flag --checkpoint or config file)")
    sv.serve(config)
    return 0


def cmd_export_features(args) -> int:
    from matselect import encoder as enc
    from matselect import pyramid as pyr

    model = hd.load_checkpoint(args.ckpt)
    image = core.read_image_png(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    levels = pyr.build_pyramid(image, model.pyramid_config, model.encoder_config)
    written = 0
    for level_tiles in levels.tiles:
        for _, _, tile in level_tiles:
            key = enc.hash_image(tile)
            output = enc.encode(tile, model.encoder)
            enc.write_feature_container(out / f"{key[:16]}.msfeat", model.encoder_config,
                                        key, output)
            written += 1
    print(f"wrote {written} feature containers to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "select": cmd_select,
    "ablate": cmd_ablate,
    "serve": cmd_serve,
    "export-features": cmd_export_features,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
