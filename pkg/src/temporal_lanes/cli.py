"""Command-line entry point.

    temporal-lanes gen-data        --out DIR [--count N] [--offset K]
    temporal-lanes train           --data DIR --out DIR [--eval-data DIR] [--steps N] [--no-tgem ...]
    temporal-lanes gradcheck       [--modules NAME ...] [--out report.json]
    temporal-lanes eval            --data DIR (--checkpoint FILE | --predictions DIR) --out report.json
    temporal-lanes plot            --out DIR [--report FILE] [--manifest FILE ...] [--data DIR --scene I --frame T]
    temporal-lanes ingest-openlane --ann DIR --out DIR

Every subcommand accepts --config, --preset, --seed and --deterministic. Exit
codes: 0 success, 2 invalid input or failed check, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .config import PRESETS, ConfigError, RunConfig, load_config

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("temporal_lanes")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or YAML file with RunConfig keys")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named base configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="temporal-lanes", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic sequences to disk")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, help="number of scenes (default data.num_scenes)")
    p.add_argument("--offset", type=int, help="scene index offset (default data.scene_seed_offset)")

    p = sub.add_parser("train", help="train the full pipeline")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--eval-data", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-threshold", type=float)
    p.add_argument("--no-tgem", action="store_true")
    p.add_argument("--no-tiqg-temporal", action="store_true")
    p.add_argument("--no-cost-volume", action="store_true")
    p.add_argument("--nan-at-step", type=int, help="fault injection: force a non-finite loss at this step")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("--modules", nargs="+")
    p.add_argument("--corrupt", help="negative control: break the backward pass of this module")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("eval", help="evaluate a checkpoint or stored predictions")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="dataset-layout directory of predicted lanes")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("plot", help="overlay, 3D view, loss and metric figures")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path)
    p.add_argument("--manifest", type=Path, action="append", default=[])
    p.add_argument("--data", type=Path)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--frame", type=int)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("ingest-openlane", help="convert OpenLane-style annotations")
    _common(p)
    p.add_argument("--ann", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args, extra: dict | None = None) -> RunConfig:
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    return load_config(args.config, overrides, preset=args.preset)


def cmd_gen_data(args) -> int:
    from .training import gen_dataset

    cfg = resolve_config(args)
    index = gen_dataset(cfg, args.out, args.count, args.offset)
    log.info("wrote %d scenes (%d lanes) to %s", len(index["scenes"]), index["lanes_total"], args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import load_dataset, train

    extra = {}
    if args.steps is not None:
        extra["optim"] = {"steps": args.steps, "epochs": None}
    ablation = {k: False for k, flag in (("use_tgem", args.no_tgem), ("use_tiqg_temporal", args.no_tiqg_temporal),
                                         ("use_cost_volume", args.no_cost_volume)) if flag}
    if ablation:
        extra["ablation"] = ablation
    cfg = resolve_config(args, extra)
    scenes = load_dataset(args.data)
    eval_scenes = load_dataset(args.eval_data) if args.eval_data else None
    result = train(cfg, scenes, args.out, eval_scenes, args.eval_threshold, args.nan_at_step)
    log.info("trained %d steps, final loss %.5f, f1 %.3f", result.steps, result.final_loss, result.metrics["f1"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    resolve_config(args)
    reports = run_gradcheck(args.modules, args.corrupt, seed=args.seed or 0)
    for r in reports:
        print(f"{r.module:16s} {'PASS' if r.passed else 'FAIL'}  max rel err {r.max_error:.3e}")
        for op, err in r.errors.items():
            print(f"    {op:24s} {err:.3e}")
    if args.out:
        io.write_json(args.out, {"tolerance": TOLERANCE, "modules": [
            {"module": r.module, "passed": r.passed, "max_error": r.max_error, "operations": r.errors}
            for r in reports]})
    return EXIT_OK if all(r.passed for r in reports) else EXIT_INVALID


def _scenes_have_images(scenes) -> bool:
    return all(f.image is not None for frames in scenes for f in frames)


def cmd_eval(args) -> int:
    from .metrics import evaluate_frames
    from .training import evaluate_model, load_dataset, load_model

    scenes = load_dataset(args.data)
    if args.checkpoint:
        cfg_given = args.config is not None or args.preset is not None
        model, cfg = load_model(args.checkpoint, resolve_config(args) if cfg_given else None)
        if not _scenes_have_images(scenes):
            raise ValueError(f"{args.data}: metadata-only frames cannot be run through a checkpoint; "
                             "use --predictions")
        threshold = cfg.eval_match_threshold if args.threshold is None else args.threshold
        report = evaluate_model(model, cfg, scenes, threshold)
        report.tags = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    else:
        cfg = resolve_config(args)
        preds = load_dataset(args.predictions)
        if [len(s) for s in preds] != [len(s) for s in scenes]:
            raise ValueError(f"{args.predictions}: scene/frame layout differs from {args.data}")
        threshold = cfg.eval_match_threshold if args.threshold is None else args.threshold
        frames = [(p.lanes_gt, g.lanes_gt) for ps, gs in zip(preds, scenes) for p, g in zip(ps, gs)]
        report = evaluate_frames(frames, threshold, tags={"predictions": str(args.predictions), "data": str(args.data)})
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(args.out, report.to_dict())
    print(f"f1 {report.f1:.4f}  precision {report.precision:.4f}  recall {report.recall:.4f}  "
          f"category acc {report.category_accuracy:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from . import plotting

    if not (args.report or args.manifest or args.data):
        raise ValueError("nothing to plot: pass --report, --manifest or --data")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.report:
        written.append(plotting.metrics_bar(out / "metrics.png", io.read_json(args.report)))
    if args.manifest:
        for m in args.manifest:
            if not m.is_file():
                raise FileNotFoundError(f"{m}: manifest not found")
        written.append(plotting.loss_curves(out / "loss_curves.png", {m.parent.name or str(m): m for m in args.manifest}))
    if args.data:
        from .training import load_dataset

        scenes = load_dataset(args.data)
        if not 0 <= args.scene < len(scenes):
            raise ValueError(f"--scene {args.scene} outside [0, {len(scenes)})")
        frames = scenes[args.scene]
        t = len(frames) - 1 if args.frame is None else args.frame
        if not 0 <= t < len(frames):
            raise ValueError(f"--frame {t} outside [0, {len(frames)})")
        frame = frames[t]
        preds = []
        cfg = resolve_config(args)
        if args.checkpoint:
            from .model import make_batch
            from .training import load_model, predict

            model, cfg = load_model(args.checkpoint)
            gap = cfg.model.temporal_gap
            if t < gap:
                raise ValueError(f"--frame {t} has no frame {gap} steps earlier for the temporal model")
            preds = predict(model, make_batch([(frames[t - gap], frame)], cfg), cfg.y_grid)[0]
        hw = cfg.sim.lane_half_width
        written.append(plotting.perspective_overlay(out / "overlay.png", frame.rig, frame.lanes_gt, preds,
                                                    image=frame.image, half_width=hw))
        written.append(plotting.view_3d(out / "view3d.png", frame.lanes_gt, preds))
    for w in written:
        log.info("wrote %s", w)
    return EXIT_OK


def cmd_ingest_openlane(args) -> int:
    from .openlane import ingest

    cfg = resolve_config(args)
    index = ingest(args.ann, args.out, cfg.y_grid, cfg.num_categories)
    log.info("ingested %d segments (%d lanes) into %s", len(index["scenes"]), index["lanes_total"], args.out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "ingest-openlane": cmd_ingest_openlane,
}


def main(argv=None) -> int:
    from .openlane import SchemaError
    from .training import NumericalAbort

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, SchemaError, io.ContainerError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
