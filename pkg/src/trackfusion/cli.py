"""Command-line entry point: ``trackfusion <command> ...``.

Exit status is 0 on success, 1 when an input fails to parse or validate and
2 when the numerics break down.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .emissions import ObservableLayout
from .evaluation import evaluate_boxes
from .fusion import FusionConfig, FusionEngine
from .hmm import HmmParams
from .simulator import ScenarioConfig, generate_scenario, run_closed_loop
from .states import build_state_space
from .traceio import (
    ParamsFormatError,
    TraceFormatError,
    TraceHeader,
    iter_trace,
    load_params,
    params_to_dict,
    read_report_boxes,
    read_trace,
    save_params,
    write_report,
    write_trace,
)

log = logging.getLogger("trackfusion")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2


def _dump_json(obj, path: Optional[str]):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load_scenario(args) -> ScenarioConfig:
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.config}: {exc}") from None
        cfg = ScenarioConfig.from_dict(d)
    else:
        cfg = ScenarioConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.frames is not None:
        cfg.frames = args.frames
    return cfg.validate()


def _failure_episodes(trace) -> list[int]:
    n = len(trace[0].reports) if trace else 0
    out = [0] * n
    prev = [True] * n
    for rec in trace:
        for c, ok in enumerate(rec.correct or [True] * n):
            if prev[c] and not ok:
                out[c] += 1
            prev[c] = ok
    return out


def cmd_simulate(args) -> int:
    cfg = _load_scenario(args)
    trace = generate_scenario(cfg)
    write_trace(args.out, TraceHeader(cfg.layout, cfg.seed), trace)
    tp = sum(1 for r in trace if r.detection is not None and r.detection_tp)
    fp = sum(1 for r in trace if r.detection is not None and not r.detection_tp)
    print(f"frames: {len(trace)}")
    print(f"failure episodes per channel: {_failure_episodes(trace)}")
    print(f"detections: {tp} true positive, {fp} false positive")
    return EXIT_OK


def _fusion_config(args, layout: ObservableLayout) -> FusionConfig:
    return FusionConfig(
        layout,
        correct_iou=args.correct_iou,
        gate_iou=args.gate_iou,
        window=args.window,
        max_iters=args.iters,
    )


def _summary(outputs, trace, engine: FusionEngine, fusion: FusionConfig) -> dict:
    det = [(o.detection, r.detection_tp) for o, r in zip(outputs, trace) if o.detection != "none"]
    counts = {
        "total": len(det),
        "accepted": sum(1 for d, _ in det if d == "accepted"),
        "rejected": sum(1 for d, _ in det if d == "rejected"),
        "true_positive": sum(1 for _, tp in det if tp is True),
        "false_positive": sum(1 for _, tp in det if tp is False),
        "accepted_false_positive": sum(1 for d, tp in det if d == "accepted" and tp is False),
        "rejected_true_positive": sum(1 for d, tp in det if d == "rejected" and tp is True),
    }
    out = {
        "frames": len(outputs),
        "detections": counts,
        "learn_count": engine.learn_count,
        "config": {
            "correct_iou": fusion.correct_iou,
            "gate_iou": fusion.gate_iou,
            "window": fusion.window,
            "iters": fusion.max_iters,
            "layout": fusion.layout.to_dict(),
        },
        "params": params_to_dict(engine.params),
    }
    if trace and all(r.gt_bbox is not None for r in trace):
        ev = evaluate_boxes([o.bbox for o in outputs], [r.gt_bbox for r in trace])
        out["recall"] = ev.recall
        out["mean_iou"] = ev.mean_iou
    return out


def _initial_params(args, layout: ObservableLayout) -> Optional[HmmParams]:
    if not args.params:
        return None
    params = load_params(args.params)
    if params.n != layout.n or params.m != layout.m:
        raise ValueError(f"{args.params}: parameters do not fit the trace layout")
    return params


def _finish_run(args, outputs, trace, engine, fusion) -> int:
    write_report(args.out, outputs, fusion.n)
    summary_path = args.summary or str(Path(args.out).with_suffix(".json"))
    _dump_json(_summary(outputs, trace, engine, fusion), summary_path)
    if args.params_out:
        save_params(args.params_out, engine.params)
    return EXIT_OK


def cmd_run(args) -> int:
    stream = iter_trace(args.trace)
    header = next(stream)
    fusion = _fusion_config(args, header.layout)
    engine = FusionEngine(fusion, _initial_params(args, header.layout))
    trace, outputs = [], []
    for rec in stream:
        outputs.append(engine.step(rec.reports, rec.detection, rec.shared))
        trace.append(rec)
    return _finish_run(args, outputs, trace, engine, fusion)


def cmd_loop(args) -> int:
    cfg = _load_scenario(args)
    fusion = _fusion_config(args, cfg.layout)
    run = run_closed_loop(cfg, fusion, _initial_params(args, cfg.layout))
    if args.trace_out:
        write_trace(args.trace_out, TraceHeader(cfg.layout, cfg.seed), run.trace)
    return _finish_run(args, run.outputs, run.trace, run.engine, fusion)


def cmd_evaluate(args) -> int:
    boxes = read_report_boxes(args.report)
    _, trace = read_trace(args.trace)
    if len(boxes) != len(trace):
        raise ValueError(f"report has {len(boxes)} frames, trace has {len(trace)}")
    if any(r.gt_bbox is None for r in trace):
        raise ValueError("trace lacks ground-truth boxes")
    ev = evaluate_boxes(boxes, [r.gt_bbox for r in trace], args.threshold)
    if args.overlaps:
        with open(args.overlaps, "w", encoding="utf-8") as fh:
            fh.write("frame,iou\n")
            for k, v in enumerate(ev.overlaps, start=1):
                fh.write(f"{k},{float(v)!r}\n")
    _dump_json({"frames": len(boxes), "recall": ev.recall, "mean_iou": ev.mean_iou,
                "threshold": args.threshold}, args.out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    params = load_params(args.params)
    space = build_state_space(params.n)
    a = params.transitions / params.transitions.sum(axis=1, keepdims=True)
    labels = [space.label(i) for i in range(space.size)]
    width = max(8, params.n + 2)
    print(f"trackers: {params.n}  states: {params.n_states}  observables: {params.m}")
    print("transition matrix (row = from, column = to; 1 = tracker correct)")
    print(" " * width + "".join(f"{lab:>{width}}" for lab in labels))
    with np.printoptions(suppress=True):
        for lab, row in zip(labels, a):
            print(f"{lab:>{width}}" + "".join(f"{v:>{width}.4f}" for v in row))
    print("beta shapes (p, q) per state and observable")
    for i, lab in enumerate(labels):
        cells = "  ".join(
            f"({params.emissions.p[i, j]:.4g}, {params.emissions.q[i, j]:.4g})" for j in range(params.m)
        )
        print(f"{lab:>{width}}  {cells}")
    return EXIT_OK


def cmd_init(args) -> int:
    layout = ObservableLayout(tuple(args.dims), args.shared)
    save_params(args.out, HmmParams.default(layout))
    return EXIT_OK


def _engine_flags(p: argparse.ArgumentParser):
    p.add_argument("--iters", type=int, default=3, help="GEM iterations per learning step (default 3)")
    p.add_argument("--window", choices=("full", "segment"), default="full",
                   help="learn from the full history or only the segment just closed")
    p.add_argument("--gate-iou", type=float, default=0.5, help="IoU a detection needs with the majority box")
    p.add_argument("--correct-iou", type=float, default=0.5, help="IoU that marks a channel correct on a detection")
    p.add_argument("--params", help="initial parameters (JSON); defaults to the built-in prior")
    p.add_argument("--params-out", help="write the final parameters here")
    p.add_argument("--summary", help="summary JSON path (default: report path with .json)")


def _scenario_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="scenario JSON; defaults to the built-in scenario")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--frames", type=int, help="override the frame count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic trace (channels restart on true detections)")
    _scenario_flags(p)
    p.add_argument("--out", required=True, help="trace file to write (JSON lines)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="stream a trace through the fusion engine")
    p.add_argument("trace")
    p.add_argument("--out", required=True, help="per-frame report CSV")
    _engine_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("loop", help="simulate with the engine's restart directives fed back")
    _scenario_flags(p)
    p.add_argument("--out", required=True, help="per-frame report CSV")
    p.add_argument("--trace-out", help="also write the closed-loop trace")
    _engine_flags(p)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("evaluate", help="recall and mean IoU of a report against a trace")
    p.add_argument("report")
    p.add_argument("trace")
    p.add_argument("--threshold", type=float, default=0.5, help="overlap a frame must exceed to count")
    p.add_argument("--overlaps", help="per-frame IoU CSV path")
    p.add_argument("--out", help="metrics JSON path (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print a parameter file")
    p.add_argument("params")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("init", help="write the default parameters for a layout")
    p.add_argument("--dims", type=int, nargs="+", required=True, help="observables per tracker")
    p.add_argument("--shared", type=int, default=0, help="observables shared by all trackers")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"trackfusion: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TraceFormatError, ParamsFormatError, ValueError, TypeError, OSError) as exc:
        print(f"trackfusion: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
