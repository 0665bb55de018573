"""Command-line entry point: ``paintps <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, detection, pipeline, synth
from .errors import InputError, NumericalError

EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _names(value):
    return value.split(",") if value else None


def _detect_flags(p):
    p.add_argument("--window", type=int, default=51, help="local median window (px)")
    p.add_argument("--sigma-k", type=float, default=3.0, help="MAD multiplier for the albedo threshold")
    p.add_argument("--template-sigmas", default="2,4,8,16", help="Gaussian template sigmas (px)")
    p.add_argument("--ncc-min", type=float, default=0.5)
    p.add_argument("--median-stride", type=int, default=3, help="1 computes the exact median filter")
    p.add_argument("--h-min", type=float, default=5.0, help="minimum blob response (um)")
    p.add_argument("--min-width", type=float, default=20.0, help="smallest blob width (um)")
    p.add_argument("--max-width", type=float, default=600.0, help="largest blob width (um)")
    p.add_argument("--min-area", type=int, default=detection.MIN_AREA)


def _params(args):
    albedo = detection.AlbedoParams(
        window=args.window, sigma_k=args.sigma_k,
        template_sigmas=tuple(float(s) for s in args.template_sigmas.split(",")),
        ncc_min=args.ncc_min, stride=args.median_stride,
    )
    depth = detection.DepthParams(h_min_um=args.h_min, min_width_um=args.min_width,
                                  max_width_um=args.max_width)
    return albedo, depth


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paintps", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("synth", parents=[common], help="render a synthetic scene and its stack")
    p.add_argument("scene", help="scene JSON")

    p = sub.add_parser("calibrate", parents=[common], help="estimate lights, write lights.json")
    p.add_argument("manifest")
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--window-deg", type=float, default=15.0, help="elevation search half-width")
    p.add_argument("--elevation", type=float, help="start elevation instead of the drop-off estimate")
    p.add_argument("--write-flat", action="store_true", help="also write the flat-fielded stack")

    p = sub.add_parser("solve", parents=[common], help="normals and albedo")
    p.add_argument("manifest")
    p.add_argument("lights")

    p = sub.add_parser("integrate", parents=[common], help="depth map from normals")
    p.add_argument("normals")
    p.add_argument("--pitch", type=float, required=True, help="um per pixel")
    p.add_argument("--validity")
    p.add_argument("--mesh", action="store_true")

    p = sub.add_parser("detect", parents=[common], help="protrusion detection")
    p.add_argument("albedo")
    p.add_argument("depth")
    p.add_argument("regions")
    p.add_argument("--pitch", type=float, required=True)
    p.add_argument("--manual", help="externally drawn protrusion mask")
    p.add_argument("--region-names")
    _detect_flags(p)

    p = sub.add_parser("stats", parents=[common], help="per-region densities and histograms")
    p.add_argument("protrusions")
    p.add_argument("regions")
    p.add_argument("--pitch", type=float, required=True)
    p.add_argument("--bin-width", type=float, default=100.0)
    p.add_argument("--fine-bins", action="store_true", help="50 um bins below 300 um")
    p.add_argument("--reference", help="second protrusions CSV (e.g. manual) to compare against")
    p.add_argument("--region-names")

    p = sub.add_parser("run", parents=[common], help="calibrate, solve, integrate, detect, stats")
    p.add_argument("--config", help="RunConfig JSON; flags override it")
    p.add_argument("--manifest")
    p.add_argument("--regions")
    p.add_argument("--manual")
    p.add_argument("--region-names")
    p.add_argument("--mesh", action="store_true")
    p.add_argument("--fine-bins", action="store_true")
    return parser


def _run_config(args) -> pipeline.RunConfig:
    overrides = {
        "manifest": args.manifest, "regions": args.regions, "manual": args.manual,
        "region_names": _names(args.region_names), "out": args.out or ".",
        "threads": args.threads, "seed": args.seed,
        "mesh": args.mesh or None, "fine_bins": args.fine_bins or None,
    }
    if args.config:
        overrides["out"] = args.out
        return pipeline.RunConfig.from_json(args.config, **overrides)
    if not args.manifest or not args.regions:
        raise InputError("run needs --config or both --manifest and --regions")
    return pipeline.RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def dispatch(args) -> dict:
    out = Path(args.out or ".")
    if args.command == "synth":
        scene = pipeline._load_json(args.scene)
        truth = synth.write_synthetic(scene, out, seed=args.seed)
        return {"protrusions": len(truth["protrusions"]), "lights": len(truth["lights"])}
    if args.command == "calibrate":
        return pipeline.run_calibrate(args.manifest, out, args.degree, args.window_deg, args.elevation,
                                      args.write_flat, args.threads)
    if args.command == "solve":
        return pipeline.run_solve(args.manifest, args.lights, out, args.threads)
    if args.command == "integrate":
        return pipeline.run_integrate(args.normals, args.pitch, out, args.validity, args.mesh, args.threads)
    if args.command == "detect":
        albedo, depth = _params(args)
        return pipeline.run_detect(args.albedo, args.depth, args.regions, args.pitch, out, args.manual,
                                   albedo, depth, args.min_area, _names(args.region_names))
    if args.command == "stats":
        return pipeline.run_stats(args.protrusions, args.regions, args.pitch, out, args.bin_width,
                                  args.fine_bins, args.reference, _names(args.region_names))
    if args.command == "run":
        report = pipeline.run(_run_config(args))
        return {"stages": report["stages"], "timings_s": report["timings_s"]}
    raise InputError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = dispatch(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, NumericalError):
            return EXIT_NUMERICAL
        return EXIT_INPUT if isinstance(exc.cause, InputError) else 1
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
