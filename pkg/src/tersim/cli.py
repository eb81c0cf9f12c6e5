"""Command-line entry point: run / measure / compare / serve."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import harness
from .harness import IncompatibleRuns, ScenarioError
from .phantom import read_pgm


def _seed_from_env() -> int | None:
    raw = os.environ.get("TERSIM_SEED")
    return int(raw) if raw else None


def _cmd_run(args) -> int:
    seed = args.seed if args.seed is not None else _seed_from_env()
    try:
        metrics, result, code = harness.run_scenario(
            args.scenario,
            out_dir=args.out,
            preset_override=args.preset,
            seed_override=seed,
            dump_frames=args.dump_frames,
            write_trace=args.trace,
        )
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"scenario error: {problem}", file=sys.stderr)
        return 1
    print(harness.metrics_json(metrics), end="")
    if code != 0:
        print("run aborted: safety event or solver failure (see metrics)", file=sys.stderr)
    return code


def _cmd_measure(args) -> int:
    frames_dir = Path(args.frames_dir)
    paths = sorted(frames_dir.glob("frame_*.pgm"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        print(f"no frame_*.pgm files in {frames_dir}", file=sys.stderr)
        return 1
    frames = []
    for p in paths:
        width, height, pixels = read_pgm(p)
        frames.append(
            {"seq": int(p.stem.split("_")[1]), "width": width, "height": height, "pixels": pixels}
        )
    try:
        result = harness.measure_ap_diameter(
            frames,
            threshold=args.threshold,
            pixel_spacing=args.spacing,
            vessel_below_threshold=not args.vessel_above,
        )
    except harness.NotFound:
        print("no lumen pixels found in any frame", file=sys.stderr)
        return 1
    print(
        json.dumps(
            {"ap_diameter_mm": result.ap_diameter_mm, "frame_seq": result.frame_seq},
            sort_keys=True,
        )
    )
    return 0


def _cmd_compare(args) -> int:
    metrics_a = json.loads(Path(args.a).read_text())
    metrics_b = json.loads(Path(args.b).read_text())
    try:
        report = harness.compare_runs(metrics_a, metrics_b)
    except IncompatibleRuns as exc:
        print(f"incompatible runs: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _cmd_serve(args) -> int:
    try:
        from .server import serve
    except ImportError as exc:
        print(f"serve mode needs the [serve] extra (fastapi + uvicorn): {exc}", file=sys.stderr)
        return 1
    host, _, port = args.listen.rpartition(":")
    seed = args.seed if args.seed is not None else _seed_from_env()
    faults = []
    if args.inject_disruption:
        start, length = (float(x) for x in args.inject_disruption.split(","))
        faults.append(("link_disruption", start, start + length))
    try:
        serve(
            args.scenario,
            host=host or "127.0.0.1",
            port=int(port),
            preset_override=args.preset,
            seed_override=seed,
            extra_faults=faults,
        )
    except ScenarioError as exc:
        for problem in exc.problems:
            print(f"scenario error: {problem}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tersim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario file or bundled scenario name")
    run_p.add_argument("scenario")
    run_p.add_argument("--preset", help="channel preset override", default=None)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", default=None, help="output directory for metrics/trace/frames")
    run_p.add_argument("--dump-frames", action="store_true")
    run_p.add_argument("--trace", action="store_true")
    run_p.set_defaults(fn=_cmd_run)

    measure_p = sub.add_parser("measure", help="measure AP diameter from dumped frames")
    measure_p.add_argument("frames_dir")
    measure_p.add_argument("--threshold", type=float, default=90.0)
    measure_p.add_argument("--spacing", type=float, default=1.0, help="mm per pixel")
    measure_p.add_argument(
        "--vessel-above", action="store_true", help="lumen is brighter than the threshold"
    )
    measure_p.set_defaults(fn=_cmd_measure)

    compare_p = sub.add_parser("compare", help="compare two metrics.json records")
    compare_p.add_argument("a")
    compare_p.add_argument("b")
    compare_p.set_defaults(fn=_cmd_compare)

    serve_p = sub.add_parser("serve", help="real-time session bridge for the operator console")
    serve_p.add_argument("scenario")
    serve_p.add_argument("--listen", default="127.0.0.1:8766")
    serve_p.add_argument("--preset", default=None)
    serve_p.add_argument("--seed", type=int, default=None)
    serve_p.add_argument(
        "--inject-disruption",
        default=None,
        metavar="START,LEN",
        help="add a link outage (seconds from session start, length)",
    )
    serve_p.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
