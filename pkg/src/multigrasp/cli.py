"""
Command line entry point.

    multigrasp gen-synth --seed 7 --objects 3 > scene.json
    multigrasp simulate --seed 0 --target 12 < scene.json
    multigrasp selftest --quick

Documents go through standard input/output unless --input/--output name files.
Exit status: 0 success, 1 the computation reported failures, 2 usage or
format error. Every error prints one "code: reason" line on stderr first.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from math import pi
from pathlib import Path

import matplotlib.pyplot as plt

from . import __version__
from .classes import GraspError
from .dataio import (
    canonical,
    episode_document,
    load_bundle,
    load_cornell_predictions,
    load_cornell_sample,
    load_relation_graph,
    load_scene,
    plan_document,
    save_bundle,
    save_scene,
    synth_scene,
    understanding_document,
)
from .evaluation import EvalConfig, cornell_accuracy, cv_splits, mapg
from .planner import VISIBILITY, SceneState, plan_target, simulate
from .postprocess import PostConfig, run_pipeline
from .selftest import SUITES, results_frame, run_selftest
from .toytrain import TrainConfig, train_scene

logger = logging.getLogger(__name__)

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    code = "usage-error"


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports a usage error instead of exiting."""

    def error(self, message):
        raise UsageError(message)


########################
# I/O                  #
########################


def _read_text(path):
    if path in (None, "-"):
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def _read_bytes(path):
    if path in (None, "-"):
        return sys.stdin.buffer.read()
    return Path(path).read_bytes()


def _write(args, text):
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)


def _eval_config(args):
    return EvalConfig(
        angle_threshold=args.angle_deg * pi / 180,
        grasp_iou_threshold=args.iou,
        od_iou_threshold=args.od_iou,
        ap_method=args.ap_method,
        top_k=args.top_k,
    )


def _emit_report(args, report):
    if args.format == "document":
        _write(args, canonical(report.to_document()))
    else:
        _write(args, report.to_text() + "\n")


########################
# COMMANDS             #
########################


def cmd_decode(args):
    h = load_bundle(_read_bytes(args.input))
    cfg = PostConfig(od_conf=args.conf, gd_conf=args.conf)
    g = run_pipeline(h, h.specs, cfg)
    _write(args, canonical(understanding_document(g)))
    return OK


def _cornell_id(path):
    stem = Path(path).stem
    return stem[:-4] if stem.endswith("cpos") else stem


def cmd_eval_cornell(args):
    if args.split != "none" and args.seed is None:
        raise UsageError("--split needs an explicit --seed")
    cfg = _eval_config(args)
    samples = [load_cornell_sample(_read_text(p), image_id=_cornell_id(p)) for p in args.rect_files]
    predictions = load_cornell_predictions(_read_text(args.predictions))
    skipped = sum(s.skipped for s in samples)
    report = cornell_accuracy([predictions.get(s.image_id) for s in samples], [s.positives for s in samples], cfg)
    notes = [f"{skipped} rectangles with NaN vertices skipped"] if skipped else []
    if args.split != "none":
        ids = list(range(len(samples)))
        folds = cv_splits(ids, args.split, args.folds, args.seed, group_key=lambda i: samples[i].group)
        for k, fold in enumerate(folds):
            part = cornell_accuracy(
                [predictions.get(samples[i].image_id) for i in fold], [samples[i].positives for i in fold], cfg
            )
            notes.append(f"{args.split} fold {k}: accuracy {part.accuracy:.4f} over {part.n_images} images")
    report = replace(report, notes=report.notes + tuple(notes))
    _emit_report(args, report)
    return OK


def cmd_eval_scenes(args):
    if len(args.scenes) != len(args.predictions):
        raise UsageError("give one prediction document per scene document")
    scenes = [load_scene(_read_text(p)) for p in args.scenes]
    outputs = [load_relation_graph(_read_text(p)).nodes for p in args.predictions]
    _emit_report(args, mapg(outputs, scenes, _eval_config(args)))
    return OK


def cmd_plan(args):
    g = load_relation_graph(_read_text(args.input))
    _write(args, canonical(plan_document(plan_target(g, args.target))))
    return OK


def cmd_simulate(args):
    scene = load_scene(_read_text(args.input))
    state = SceneState.from_annotation(scene, visibility=args.visibility)
    episode = simulate(state, args.target, max_steps=args.max_steps, seed=args.seed, grasp_success=args.grasp_success)
    _write(args, canonical(episode_document(episode)))
    return OK if episode.success else FAILED


def cmd_gen_synth(args):
    scene, _ = synth_scene(args.seed, args.objects, args.classes, args.size)
    _write(args, save_scene(scene))
    return OK


def cmd_train_toy(args):
    scene = load_scene(_read_text(args.input))
    cfg = TrainConfig(steps=args.steps, lr=args.lr, momentum=args.momentum, seed=args.seed, optimizer=args.optimizer)
    trace, report = train_scene(scene, cfg, args.classes, _eval_config(args))
    if args.bundle:
        Path(args.bundle).write_bytes(save_bundle(trace.final))
    if args.plot:
        fig, ax = plt.subplots()
        trace.plot(ax)
        fig.savefig(args.plot)
        plt.close(fig)
    if args.format == "document":
        _write(args, canonical({
            "trace": [[i, v] for i, v in enumerate(trace.totals)],
            "recovery": [vars(o) for o in report.objects],
            "success_rate": report.success_rate,
        }))
    else:
        _write(args, trace.to_text() + "\n" + report.to_text())
    return OK if report.success else FAILED


def cmd_selftest(args):
    results = run_selftest(quick=args.quick, only=args.only)
    if args.format == "document":
        _write(args, canonical({"suites": [vars(r) for r in results]}))
    else:
        _write(args, results_frame(results).to_string(index=False) + "\n")
    return OK if all(r.passed for r in results) else FAILED


########################
# PARSER               #
########################


def _metric_flags(p):
    p.add_argument("--iou", type=float, default=0.25, help="rectangle-metric IOU threshold")
    p.add_argument("--angle-deg", type=float, default=30.0, help="rectangle-metric angle threshold")
    p.add_argument("--od-iou", type=float, default=0.5, help="box IOU threshold for mAP")
    p.add_argument("--ap-method", choices=["continuous", "interpolated"], default="continuous")
    p.add_argument("--top-k", type=int, default=1, help="grasps scored per Cornell image")


def build_parser():
    parser = Parser(prog="multigrasp", description="Multi-task grasp detection pipeline tools.")
    parser.add_argument("--version", action="version", version=".".join(map(str, __version__)))
    common = Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--output", "-o", help="write the result here instead of stdout")
    common.add_argument("--format", choices=["text", "document"], default="text")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("decode", parents=[common], help="tensor bundle -> scene-understanding document")
    p.add_argument("--input", "-i", default="-")
    p.add_argument("--conf", type=float, default=0.5)
    p.set_defaults(run=cmd_decode)

    p = sub.add_parser("eval-cornell", parents=[common], help="Cornell rectangle metric accuracy")
    p.add_argument("rect_files", nargs="+", help="positive rectangle files (pcdXXXXcpos.txt)")
    p.add_argument("--predictions", required=True, help="Cornell prediction document")
    p.add_argument("--split", choices=["none", "image_wise", "object_wise"], default="none")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, help="fold shuffle seed, required with --split")
    _metric_flags(p)
    p.set_defaults(run=cmd_eval_cornell)

    p = sub.add_parser("eval-scenes", parents=[common], help="mAP and mAPg over annotated scenes")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--predictions", nargs="+", required=True, help="scene-understanding documents")
    _metric_flags(p)
    p.set_defaults(run=cmd_eval_scenes)

    p = sub.add_parser("plan", parents=[common], help="grasp plan for a target class")
    p.add_argument("--input", "-i", default="-")
    p.add_argument("--target", type=int, required=True)
    p.set_defaults(run=cmd_plan)

    p = sub.add_parser("simulate", parents=[common], help="run one simulated grasping episode")
    p.add_argument("--input", "-i", default="-")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-steps", type=int, default=20)
    p.add_argument("--grasp-success", type=float, default=1.0)
    p.add_argument("--visibility", type=float, default=VISIBILITY)
    p.set_defaults(run=cmd_simulate)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic scene document")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--objects", type=int, required=True)
    p.add_argument("--classes", type=int, default=31)
    p.add_argument("--size", type=int, default=320)
    p.set_defaults(run=cmd_gen_synth)

    p = sub.add_parser("train-toy", parents=[common], help="fit a head tensor to one scene")
    p.add_argument("--input", "-i", default="-")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--classes", type=int, default=31)
    p.add_argument("--plot", help="save the loss curve to this image file")
    p.add_argument("--bundle", help="save the trained head tensor to this file")
    _metric_flags(p)
    p.set_defaults(run=cmd_train_toy)

    p = sub.add_parser("selftest", parents=[common], help="run the acceptance suites")
    p.add_argument("--quick", action="store_true", help="smaller samples")
    p.add_argument("--only", nargs="+", choices=[name for name, _ in SUITES])
    p.set_defaults(run=cmd_selftest)
    return parser


def dispatch(argv) -> int:
    """Run one command and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.run(args)
    except (GraspError, UsageError) as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return USAGE
    except UnicodeDecodeError as e:
        print(f"io-error: input is not UTF-8 text ({e.reason} at byte {e.start})", file=sys.stderr)
        return USAGE
    except (AssertionError, ValueError) as e:
        print(f"invalid-argument: {e}", file=sys.stderr)
        return USAGE
    except OSError as e:
        print(f"io-error: {e}", file=sys.stderr)
        return USAGE


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
