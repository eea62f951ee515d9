"""Batch command-line front end.

Commands
--------
estimate-ica   estimate a mixing matrix from an image and write it as JSON
fit            fit the blemish model for a region and report per-channel stats
retouch        apply a gain vector to a region and write the edited image
fade           render a gain schedule as numbered frames (fading sequence)
matrix         render a haemoglobin x melanin gain grid as one tiled image
eval           psnr/ssim between two images

Every command validates its inputs fully before writing any artifact, and
identical invocations produce byte-identical outputs.  Exit codes: 0 ok
(fit non-convergence is a warning in the report, not a failure), 2
validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import jsonutil
from .chromophore import IcaConfig, MixingMatrix, estimate_mixing_matrix, samples_from_image
from .errors import PipelineError
from .pixelcore import RgbImage8, Roi, read_png, write_png
from .retouch import (
    GainSchedule,
    GainVector,
    PipelineConfig,
    cache_key,
    gain_matrix,
    prepare_roi,
    psnr,
    retouch_roi,
    simulate_fading,
    ssim,
)
from .sog_fit import FitConfig

REPORT_SCHEMA = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


@dataclass
class JobSpec:
    command: str
    inputs: dict = field(default_factory=dict)    # parsed/validated values
    outputs: dict = field(default_factory=dict)   # path -> writer callable, filled by run


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_VALIDATION
    try:
        run(_validate(args))
        return EXIT_OK
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skinchroma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command")

    def common(p, roi=True):
        p.add_argument("--in", dest="input", required=True, help="input PNG")
        if roi:
            p.add_argument("--roi", required=True, help="x,y,w,h in image pixels")
        p.add_argument("--sigma", type=float, default=None, help="separation blur stddev (px)")
        p.add_argument("--seed", type=int, default=None, help="estimation seed (recorded in reports)")
        p.add_argument("--mixing-matrix", dest="mixing_matrix", default=None, help="mixing matrix JSON path")
        p.add_argument("--config", default=None, help="pipeline config JSON; flags win over file values")
        p.add_argument("--report", default=None, help="write a JSON report here")

    p = sub.add_parser("estimate-ica", help="estimate a mixing matrix from an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output matrix JSON path")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--report", default=None)

    p = sub.add_parser("fit", help="fit the blemish model for a region")
    common(p)
    p.add_argument("--dump-layers", dest="dump_layers", default=None,
                   help="directory for base/texture debug PNGs (texture shifted +0.5)")

    p = sub.add_parser("retouch", help="apply gains to a region")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-h", dest="alpha_h", type=float, default=0.0)
    p.add_argument("--alpha-m", dest="alpha_m", type=float, default=0.0)
    p.add_argument("--alpha-r", dest="alpha_r", type=float, default=0.0)
    p.add_argument("--feather", action="store_true", help="2 px linear blend at the roi edge")

    p = sub.add_parser("fade", help="render a fading schedule")
    common(p)
    p.add_argument("--schedule", required=True, help="comma-separated gains, e.g. 0,-0.25,-0.5")
    p.add_argument("--channel", choices=["h", "m", "r"], default="m", help="channel the schedule drives")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--prefix", default="fade")

    p = sub.add_parser("matrix", help="render a gain grid")
    common(p)
    p.add_argument("--alphas-h", dest="alphas_h", required=True, help="comma-separated row gains")
    p.add_argument("--alphas-m", dest="alphas_m", required=True, help="comma-separated column gains")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="psnr/ssim between two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--report", default=None)
    return parser


# ---------------------------------------------------------------------------
# Validation: everything is checked and loaded before any file is written.

def _validate(args) -> JobSpec:
    spec = JobSpec(command=args.command)
    v = spec.inputs

    if args.command == "eval":
        v["a"] = _load_image(args.a)
        v["b"] = _load_image(args.b)
        v["report"] = args.report
        return spec

    v["input_path"] = args.input
    v["image"] = _load_image(args.input)
    v["config"] = _load_config(args)
    v["report"] = getattr(args, "report", None)
    v["seed"] = args.seed if args.seed is not None else IcaConfig.seed

    if args.command == "estimate-ica":
        v["out"] = args.out
        return spec

    v["roi"] = _parse_roi(args.roi, v["image"])
    if args.command == "fit":
        v["dump_layers"] = args.dump_layers
    elif args.command == "retouch":
        v["out"] = args.out
        v["gains"] = GainVector(alpha_h=args.alpha_h, alpha_m=args.alpha_m, alpha_r=args.alpha_r)
        if args.feather:
            v["config"] = replace(v["config"], feather=True)
    elif args.command == "fade":
        alphas = _parse_floats(args.schedule, "schedule")
        if not alphas:
            raise CliError("schedule must contain at least one gain")
        kw = {"alpha_" + args.channel: 1.0}
        entries = tuple(
            GainVector(**{k: v_ * a for k, v_ in kw.items()}) for a in alphas
        )
        v["schedule"] = GainSchedule(entries, tuple(str(i) for i in range(len(alphas))))
        v["alphas"] = alphas
        v["channel"] = args.channel
        v["out_dir"] = args.out_dir
        v["prefix"] = args.prefix
    elif args.command == "matrix":
        v["alphas_h"] = _parse_floats(args.alphas_h, "alphas-h")
        v["alphas_m"] = _parse_floats(args.alphas_m, "alphas-m")
        if not v["alphas_h"] or not v["alphas_m"]:
            raise CliError("gain lists must be non-empty")
        v["out"] = args.out
    return spec


def _load_image(path: str) -> RgbImage8:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {path}")
    try:
        return read_png(p)
    except Exception as err:
        raise CliError(f"cannot decode {path}: {err}") from err


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    path = getattr(args, "config", None)
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            obj = jsonutil.loads(p.read_text())
        except ValueError as err:
            raise CliError(f"config {path} is not valid JSON: {err}") from err
        fit = FitConfig(**obj.get("fit", {})) if "fit" in obj else cfg.fit
        cfg = PipelineConfig(
            eps=obj.get("eps", cfg.eps),
            sigma=obj.get("sigma", cfg.sigma),
            fit=fit,
            feather=obj.get("feather", cfg.feather),
        )
    matrix_path = getattr(args, "mixing_matrix", None)
    if matrix_path:
        p = Path(matrix_path)
        if not p.is_file():
            raise CliError(f"mixing matrix file not found: {matrix_path}")
        try:
            cfg = replace(cfg, matrix=MixingMatrix.load(p))
        except (ValueError, PipelineError) as err:
            raise CliError(f"bad mixing matrix {matrix_path}: {err}") from err
    if getattr(args, "sigma", None) is not None:
        if args.sigma <= 0:
            raise CliError(f"--sigma must be positive, got {args.sigma}")
        cfg = replace(cfg, sigma=args.sigma)
    return cfg


def _parse_roi(text: str, image: RgbImage8) -> Roi:
    parts = text.split(",")
    if len(parts) != 4:
        raise CliError(f"--roi expects x,y,w,h, got {text!r}")
    try:
        x, y, w, h = (int(p) for p in parts)
        roi = Roi(x, y, w, h)
        roi.validate_in(image.width, image.height)
    except (ValueError, PipelineError) as err:
        raise CliError(f"bad roi {text!r}: {err}") from err
    return roi


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip() != ""]
    except ValueError as err:
        raise CliError(f"bad --{name} value {text!r}: {err}") from err


# ---------------------------------------------------------------------------
# Execution

def run(spec: JobSpec) -> None:
    handler = {
        "estimate-ica": _run_estimate_ica,
        "fit": _run_fit,
        "retouch": _run_retouch,
        "fade": _run_fade,
        "matrix": _run_matrix,
        "eval": _run_eval,
    }[spec.command]
    try:
        handler(spec.inputs)
    except PipelineError as err:
        raise CliError(str(err)) from err


def _base_report(v, cfg: PipelineConfig, command: str) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "command": command,
        "input": v["input_path"],
        "seed": v["seed"],
    }


def _fit_summary(fit) -> dict:
    return {
        key: {
            "n": ch.n,
            "rms": ch.rms,
            "converged": ch.converged,
            "iterations": ch.iterations,
        }
        for key, ch in fit.channels.items()
    }


def _write_report(path: str | None, obj: dict) -> None:
    if path:
        Path(path).write_text(jsonutil.dumps(obj) + "\n")


def _run_estimate_ica(v) -> None:
    cfg = v["config"]
    samples = samples_from_image(v["image"], sigma=cfg.sigma, eps=cfg.eps)
    matrix = estimate_mixing_matrix(samples, IcaConfig(seed=v["seed"]))
    matrix.save(v["out"])
    _write_report(
        v["report"],
        {
            "schema": REPORT_SCHEMA,
            "command": "estimate-ica",
            "input": v["input_path"],
            "seed": v["seed"],
            "samples": int(samples.shape[0]),
            "matrix": jsonutil.loads(matrix.to_json()),
        },
    )


def _run_fit(v) -> None:
    cfg: PipelineConfig = v["config"]
    roi: Roi = v["roi"]
    prepared, _ = prepare_roi(v["image"], roi, cfg)
    if v.get("dump_layers"):
        _dump_layers(v["dump_layers"], prepared)
    report = _base_report(v, cfg, "fit")
    report.update(
        {
            "roi": [roi.x, roi.y, roi.w, roi.h],
            "sigma": prepared.sigma,
            "channels": _fit_summary(prepared.fit),
            "fit": prepared.fit.to_json_obj(),
            "warnings": [] if prepared.fit.converged else ["fit did not fully converge"],
        }
    )
    _write_report(v["report"], report)
    for key, ch in prepared.fit.channels.items():
        print(f"{key}: n={ch.n} rms={ch.rms:.6g} converged={ch.converged}")


def _dump_layers(out_dir: str, prepared) -> None:
    import numpy as np

    from .pixelcore import ColorSpace, PixelPatch, linear_to_srgb

    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for name, patch in (("base", prepared.base), ("texture", prepared.texture)):
        values = patch.channels + 0.5 if name == "texture" else patch.channels
        vis = PixelPatch(np.clip(values, 0.0, 1.0), ColorSpace.LINEAR)
        write_png(linear_to_srgb(vis), d / f"{name}.png")


def _run_retouch(v) -> None:
    cfg: PipelineConfig = v["config"]
    roi: Roi = v["roi"]
    result = retouch_roi(v["image"], roi, v["gains"], cfg)
    write_png(result.output, v["out"])
    report = _base_report(v, cfg, "retouch")
    report.update(
        {
            "roi": [roi.x, roi.y, roi.w, roi.h],
            "gains": v["gains"].as_dict(),
            "clamps": result.clamps.as_dict(),
            "contrast_before": result.contrast_before.as_dict(),
            "contrast_after": result.contrast_after.as_dict(),
            "fit_key": cache_key(v["image"], roi, cfg)[0].hex() if result.fit else None,
            "channels": _fit_summary(result.fit) if result.fit else None,
            "warnings": [] if result.converged else ["fit did not fully converge"],
        }
    )
    sidecar = v["report"] or (v["out"] + ".retouch.json")
    _write_report(sidecar, report)


def _run_fade(v) -> None:
    cfg: PipelineConfig = v["config"]
    roi: Roi = v["roi"]
    out_dir = Path(v["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    results = simulate_fading(v["image"], roi, v["schedule"], cfg)
    frames = []
    for i, result in enumerate(results):
        name = f"{v['prefix']}_{i:03d}.png"
        write_png(result.output, out_dir / name)
        frames.append(
            {
                "label": result.label,
                "file": name,
                "gains": result.gains.as_dict(),
                "clamps": result.clamps.as_dict(),
                "contrast_after": result.contrast_after.as_dict(),
            }
        )
    report = _base_report(v, cfg, "fade")
    report.update(
        {
            "roi": [roi.x, roi.y, roi.w, roi.h],
            "channel": v["channel"],
            "contrast_before": results[0].contrast_before.as_dict(),
            "frames": frames,
            "channels": _fit_summary(results[0].fit),
            "warnings": [] if results[0].converged else ["fit did not fully converge"],
        }
    )
    _write_report(v["report"] or str(out_dir / f"{v['prefix']}_report.json"), report)


def _run_matrix(v) -> None:
    cfg: PipelineConfig = v["config"]
    roi: Roi = v["roi"]
    grid = gain_matrix(v["image"], roi, v["alphas_h"], v["alphas_m"], cfg)
    write_png(grid, v["out"])
    report = _base_report(v, cfg, "matrix")
    report.update(
        {
            "roi": [roi.x, roi.y, roi.w, roi.h],
            "alphas_h": v["alphas_h"],
            "alphas_m": v["alphas_m"],
            "tile": [roi.w, roi.h],
        }
    )
    _write_report(v["report"], report)


def _run_eval(v) -> None:
    import math

    a, b = v["a"], v["b"]
    value_psnr = psnr(a, b)
    value_ssim = ssim(a, b)
    identical = math.isinf(value_psnr)
    print(f"psnr: {'inf' if identical else f'{value_psnr:.4f}'} dB  ssim: {value_ssim:.6f}")
    _write_report(
        v["report"],
        {
            "schema": REPORT_SCHEMA,
            "command": "eval",
            "psnr_db": None if identical else value_psnr,
            "identical": identical,
            "ssim": value_ssim,
        },
    )


if __name__ == "__main__":
    sys.exit(main())
