"""Command-line entry point: ``probtri {synth,calibrate,baseline,eval,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace

from ..errors import ProbTriError
from ..inference import PtConfig, extract_pose, run
from .baselines import bundle_adjust, ransac8pt
from .experiment import (
    SceneSpec,
    aggregate,
    format_aggregate,
    load_config,
    make_scene,
    records_to_csv,
    run_experiment,
    write_csv,
)
from .io import (
    dump_json,
    load_result,
    load_scene,
    read_heatmaps,
    result_to_json,
    save_scene,
    scene_to_json,
    write_heatmaps,
)
from .metrics import evaluate
from .scene import NoiseModel, render_observations


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", help="output file (stdout when omitted, where applicable)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    return p


def _noise_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pixel-sigma", type=float, default=0.0)
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.add_argument("--heatmap-sigma", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probtri", description="Multi-view rig calibration from 2D heatmaps.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--joints", type=int, default=17)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--focal", type=float, default=70.0)
    p.add_argument("--heatmaps", help="also write rendered heatmaps to this raw float32 file")
    _noise_flags(p)

    p = sub.add_parser("calibrate", parents=[common], help="run probabilistic calibration on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--heatmaps", help="raw heatmap file; rendered from the scene when omitted")
    p.add_argument("--iters", type=int, default=PtConfig.iterations)
    p.add_argument("--samples", type=int, default=PtConfig.samples)
    p.add_argument("--config", help="TOML file whose [inference] table overrides the defaults")
    _noise_flags(p)

    p = sub.add_parser("baseline", parents=[common], help="run a classical baseline on a scene")
    p.add_argument("--method", choices=("ransac8pt", "ba"), required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--init", choices=("naive", "ransac"), default="naive", help="bundle adjustment start")
    _noise_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score a result file against its scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--result", required=True)

    p = sub.add_parser("sweep", parents=[common], help="run a method comparison sweep")
    p.add_argument("--config", required=True)
    return parser


def _emit(obj, out) -> None:
    if out:
        dump_json(obj, out)
    else:
        print(json.dumps(obj, indent=2))


def _observations(args, scene, with_heatmaps=True):
    noise = NoiseModel(args.pixel_sigma, args.outlier_rate, args.heatmap_sigma, args.seed)
    return render_observations(scene, noise, with_heatmaps=with_heatmaps)


def cmd_synth(args) -> int:
    spec = SceneSpec(args.cams, args.joints, args.frames, args.image_size, args.focal)
    scene = make_scene(spec, args.seed)
    if args.out:
        save_scene(scene, args.out)
    else:
        print(json.dumps(scene_to_json(scene), indent=2))
    if args.heatmaps:
        _, hm = _observations(args, scene)
        write_heatmaps(hm, args.heatmaps)
    return 0


def cmd_calibrate(args) -> int:
    scene = load_scene(args.scene)
    cfg = load_config(args.config).inference if args.config else PtConfig()
    cfg = replace(cfg, iterations=args.iters, samples=args.samples, seed=args.seed, threads=args.threads)
    hm = read_heatmaps(args.heatmaps) if args.heatmaps else _observations(args, scene)[1]
    res = run(hm, scene.rig.intrinsics, cfg)
    pts = extract_pose(res)
    settings = {k: v for k, v in asdict(cfg).items() if k != "threads"}
    echo = {"inference": settings, "scene": args.scene, "init_mode": res.init_mode}
    _emit(result_to_json(res.map_rig, pts, evaluate(res.map_rig, pts, scene), res.mean_residual_history, echo),
          args.out)
    return 0


def cmd_baseline(args) -> int:
    scene = load_scene(args.scene)
    kp, _ = _observations(args, scene, with_heatmaps=False)
    intr = scene.rig.intrinsics
    if args.method == "ransac8pt":
        rig, pts = ransac8pt(kp, intr)
    else:
        rig, pts = bundle_adjust(kp, intr, init=args.init, seed=args.seed)
    echo = {"method": args.method, "init": args.init if args.method == "ba" else None, "scene": args.scene}
    _emit(result_to_json(rig, pts, evaluate(rig, pts, scene), (), echo), args.out)
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    rig, pts = load_result(args.result)
    _emit(evaluate(rig, pts, scene).as_dict(), args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    records = run_experiment(cfg, threads=args.threads)
    if args.out:
        write_csv(records, args.out)
    else:
        sys.stdout.write(records_to_csv(records))
    sys.stderr.write(format_aggregate(aggregate(records)))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ProbTriError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
