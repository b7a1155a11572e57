"""Command-line entry point: simulate, estimate, calibrate, evaluate, fps-report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .av_correspondence import write_pairs_manifest
from .depth import CalibrationModel, calibrate
from .errors import FlashbangError
from .io import dumps_json, read_json, write_json

log = logging.getLogger("flashbang")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _fps_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(parser):
    parser.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flashbang", description="Flash-to-bang depth estimation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="generate a dataset from a DatasetSpec JSON")
    _common(p)

    p = sub.add_parser("estimate", help="estimate depths for one scene directory")
    _common(p)
    p.add_argument("scene_dir", type=Path)
    p.add_argument("--fps", type=int, default=None, help="frame folder to use (default: highest)")
    p.add_argument("--calibration", type=Path, default=None)

    p = sub.add_parser("calibrate", help="fit the clock offset from labelled runs")
    _common(p)
    p.add_argument("source", type=Path, help="dataset directory or JSON with 'samples'")
    p.add_argument("--fit-v", action="store_true", help="also fit the sound speed")
    p.add_argument("--fps", type=_fps_list, default=None, help="default: highest in the dataset")

    p = sub.add_parser("evaluate", help="run the pipeline over a dataset and write metrics")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--calibration", type=Path, default=None)
    p.add_argument("--fps", type=_fps_list, default=None, help="e.g. 30,240")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("fps-report", help="improvement-ratio table against the top frame rate")
    _common(p)
    p.add_argument("dataset", type=Path)
    p.add_argument("--calibration", type=Path, default=None)
    p.add_argument("--baseline", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    return parser


def _pipeline_config(args) -> harness.PipelineConfig:
    if args.config is None:
        return harness.PipelineConfig()
    return harness.PipelineConfig.from_dict(read_json(args.config))


def _calibration(args):
    return CalibrationModel.load(args.calibration) if args.calibration else None


def _emit(payload, out: Path | None, name: str):
    if out is None:
        print(dumps_json(payload))
        return
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / name, payload)
    print(out / name)


def cmd_simulate(args) -> int:
    if args.config is None:
        raise _UsageError("simulate needs --config <DatasetSpec JSON>")
    if args.out is None:
        raise _UsageError("simulate needs --out <dir>")
    spec = harness.DatasetSpec.from_dict(read_json(args.config))
    if args.seed is not None:
        spec.seed = args.seed
    path = harness.generate_dataset(spec, args.out)
    print(path)
    return EXIT_OK


def cmd_estimate(args) -> int:
    frames, audio, truth = harness.load_scene(args.scene_dir, args.fps)
    config = _pipeline_config(args)
    model = _calibration(args) or CalibrationModel(t_hw_s=float(truth.get("t_hw_s", 0.0)))
    data = harness.SceneData(args.scene_dir.name, frames, audio, truth)
    results, rows, corr = harness.process_scene(data, model, config)
    payload = {
        "scene": str(args.scene_dir),
        "fps": frames.fps,
        "t_hw_s": model.t_hw_s,
        "events": [{"t_video": r.t_video, "t_audio": r.t_audio, "depth_m": r.depth_m,
                    "status": r.status, "reason": r.reason, "flagged": r.flagged, **r.detail}
                   for r in results],
        "unmatched_audio": len(corr.unmatched_audio),
        "unmatched_motion": len(corr.unmatched_motion),
        "rows": rows,
    }
    _emit(payload, args.out, "depth.json")
    if args.out is not None:
        write_pairs_manifest(args.out / "pairs", corr, frames.fps)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    if args.source.is_file():
        samples = read_json(args.source)["samples"]
    else:
        ds = harness.DiskDataset(args.source)
        if args.seed is not None:
            log.info("--seed has no effect on an existing dataset")
        # labels are the ground-truth depths; the offset starts at zero and is what we fit
        # the highest frame rate has the smallest video timing error, so it is the default
        fps = args.fps or [max(ds.fps_set)]
        report = harness.run_pipeline(ds, CalibrationModel(0.0), _pipeline_config(args), fps=fps)
        samples = harness.calibration_samples(report)
    model = calibrate(samples, fit_v=args.fit_v)
    _emit(model.to_dict(), args.out, "calibration.json")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = harness.DiskDataset(args.dataset)
    report = harness.run_pipeline(ds, _calibration(args), _pipeline_config(args), fps=args.fps,
                                  workers=args.workers)
    if len(report.fps_values) > 1 and max(ds.fps_set) in report.fps_values:
        report.improvement = harness.improvement_ratios(report.rows, max(ds.fps_set))
    out = args.out or args.dataset
    csv_path, json_path = report.write(out)
    print(csv_path)
    print(json_path)
    return EXIT_OK


def cmd_fps_report(args) -> int:
    ds = harness.DiskDataset(args.dataset)
    table = harness.fps_consistency_report(ds, _pipeline_config(args), _calibration(args),
                                           args.baseline, workers=args.workers)
    table["format_version"] = 1
    _emit(table, args.out, "fps_report.json")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "calibrate": cmd_calibrate,
            "evaluate": cmd_evaluate, "fps-report": cmd_fps_report}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"flashbang: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FlashbangError, OSError, ValueError, KeyError) as exc:
        print(f"flashbang {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
