"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 plugin
backend failure.  All commands are deterministic given their --seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import diffusion, mechanistic, metrics, phantom, pipeline, plugin
from .errors import InvalidInputError, NumericalError, PluginError
from .image import (BinaryMask, Image2D, read_image, read_mask, write_image,
                    write_mask)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_PLUGIN = 4


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")


def _floats_csv(text: str):
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"bad numeric list {text!r}: {exc}") from exc


def _read_value_column(path):
    values = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError as exc:
                raise InvalidInputError(f"{path}: bad value {row[0]!r}") from exc
    return np.array(values)


def _check_intensity_domain(img: Image2D, name: str, allow_normalize: bool):
    lo, hi = float(img.pixels.min()), float(img.pixels.max())
    if lo < -0.01 or hi > 1.01:
        if not allow_normalize:
            raise InvalidInputError(
                f"{name}: intensities [{lo:.3g}, {hi:.3g}] outside [0, 1]; "
                "re-run with --normalize to min-max rescale on ingestion")
        span = hi - lo
        if span <= 0:
            raise InvalidInputError(f"{name}: constant image cannot be normalized")
        return img.with_pixels((img.pixels - lo) / span)
    return img


def _build_denoiser(spec: str, ref: Image2D, brain_mask, s0: float):
    if spec == "analytic-delta":
        return diffusion.DeltaDenoiser(ref)
    if spec == "analytic-gaussian":
        return diffusion.GaussianDenoiser(mu=ref, s0=s0, support=brain_mask)
    if spec.startswith("plugin:"):
        return plugin.PluginDenoiser(spec[len("plugin:"):])
    raise InvalidInputError(
        f"unknown denoiser {spec!r}; expected analytic-delta, analytic-gaussian "
        "or plugin:COMMAND")


def _build_regressor(spec: str, ref: Image2D, brain_mask, tau, softness,
                     denoiser, nl, sched):
    if spec == "soft-area":
        profile = None
        if isinstance(denoiser, diffusion.GaussianDenoiser):
            profile = denoiser.flow_noise_profile(nl, sched)
        return diffusion.SoftAreaRegressor(tau=tau, softness=softness,
                                           brain_mask=brain_mask, reference=ref,
                                           flow_profile=profile)
    if spec.startswith("plugin:"):
        return plugin.PluginRegressor(spec[len("plugin:"):])
    raise InvalidInputError(
        f"unknown regressor {spec!r}; expected soft-area or plugin:COMMAND")


# ---------------------------------------------------------------------------
# commands

def cmd_fit(args) -> int:
    series = mechanistic.read_series(args.series, args.meta)
    fit = mechanistic.fit_params(series, decay_form=args.decay_form)
    ens = mechanistic.bootstrap_fit(series, args.bootstrap, args.noise,
                                    rng_seed=args.seed,
                                    noise_mode=args.noise_mode,
                                    decay_form=args.decay_form)
    payload = {"fit": fit.to_dict(), "ensemble": ens.to_dict()}
    with open(args.out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _print_json({"r_squared": fit.r_squared, "converged": fit.converged,
                 "n_replicates": len(ens), "out": str(args.out)})
    return EXIT_OK


def cmd_predict(args) -> int:
    with open(args.fit) as fh:
        payload = json.load(fh)
    ens = mechanistic.BootstrapEnsemble.from_dict(payload["ensemble"])
    quantiles = _floats_csv(args.quantiles)
    values = mechanistic.predict_quantiles(ens, args.time, quantiles)
    _print_json({"time_days": args.time,
                 "quantiles": {repr(q): float(v) for q, v in zip(quantiles, values)}})
    return EXIT_OK


def cmd_generate(args) -> int:
    ref = _check_intensity_domain(read_image(args.image), args.image,
                                  args.normalize)
    brain = read_mask(args.mask)
    sched = diffusion.make_schedule(args.steps, args.beta_start, args.beta_end)
    denoiser = _build_denoiser(args.denoiser, ref, brain, args.s0)
    regressor = _build_regressor(args.regressor, ref, brain, args.tau,
                                 args.softness, denoiser, args.nl, sched)
    guidance = diffusion.GuidanceConfig(s_ct=args.s_ct, dyn_clamp=args.dyn_clamp,
                                        target=args.target)
    try:
        out = diffusion.generate(ref, args.nl, denoiser, regressor, guidance,
                                 sched, args.seed)
    finally:
        for backend in (denoiser, regressor):
            close = getattr(backend, "close", None)
            if close:
                close()
    write_image(args.out, out)
    value, _ = diffusion.soft_tumor_fraction(out.pixels, args.tau, args.softness,
                                             brain.bits)
    _print_json({"out": str(args.out), "target": args.target,
                 "final_soft_fraction": value})
    return EXIT_OK


def _config_from_args(args, **overrides) -> pipeline.RunConfig:
    base = dict(nl=getattr(args, "nl", 1), s_ct=getattr(args, "s_ct", 50000.0),
                steps=args.steps, seed=args.seed,
                theta=getattr(args, "theta", 0.5), tau=args.tau,
                softness=args.softness, s0=args.s0, dyn_clamp=args.dyn_clamp)
    base.update(overrides)
    return pipeline.RunConfig(**base)


def _write_probmap_outputs(args, pm, mask, extra) -> None:
    write_image(args.out_map, pm.to_image())
    write_mask(args.out_mask, mask)
    sidecar = {"mode": pm.mode, "n_aggregated": pm.n_aggregated,
               "theta": args.theta}
    sidecar.update(extra)
    with open(str(args.out_map) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _print_json({"out_map": str(args.out_map), "out_mask": str(args.out_mask),
                 **sidecar})


def cmd_probmap(args) -> int:
    ref = _check_intensity_domain(read_image(args.image), args.image,
                                  args.normalize)
    brain = read_mask(args.mask)
    if args.mode == "dynamic":
        if not (args.series and args.series_meta and args.time is not None):
            raise InvalidInputError(
                "dynamic mode needs --series, --series-meta and --time")
        series = mechanistic.read_series(args.series, args.series_meta)
        cfg = _config_from_args(args, n_bootstrap=args.bootstrap,
                                noise_sigma=args.noise,
                                target_percentile_cap=args.cap,
                                probmap_mode="dynamic")
        result = pipeline.run_dynamic_prediction(series, ref, brain, args.time,
                                                 cfg)
        extra = {"n_targets": int(result.kept_indices.size),
                 "reference_fraction": result.reference_fraction,
                 "target_fractions_geometric":
                     [float(v) for v in result.target_fractions],
                 "targets_regressor_scale": [float(v) for v in result.targets]}
        if args.save_generated:
            outdir = Path(args.save_generated)
            outdir.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(result.generated):
                write_image(outdir / f"gen_{i:03d}.img", img)
        _write_probmap_outputs(args, result.probability_map,
                               result.predicted_mask, extra)
        return EXIT_OK

    if args.target is None:
        raise InvalidInputError("static mode needs --target")
    cfg = _config_from_args(args, probmap_mode="static")
    result = pipeline.run_static_prediction(ref, brain, args.target,
                                            args.repeats, cfg)
    if args.save_generated:
        outdir = Path(args.save_generated)
        outdir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(result.generated):
            write_image(outdir / f"gen_{i:03d}.img", img)
    _write_probmap_outputs(args, result.probability_map, result.predicted_mask,
                           {"target": args.target, "n_repeats": args.repeats})
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.metric == "ssim":
        a = read_image(args.a)
        b = read_image(args.b)
        region = read_mask(args.region)
        _print_json({"ssim": metrics.ssim_region(a, b, region)})
    elif args.metric == "hd95":
        a = read_mask(args.a)
        b = read_mask(args.b)
        spacing = args.spacing if args.spacing is not None else a.pixel_spacing
        _print_json({"hd95_mm": metrics.hd95(a, b, spacing)})
    else:  # wilcoxon
        x = _read_value_column(args.x)
        y = _read_value_column(args.y)
        res = metrics.wilcoxon_signed_rank(x, y)
        _print_json({"statistic": res.statistic, "p_two_sided": res.p_two_sided,
                     "n": res.n, "method": res.method})
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    with open(args.pairs) as fh:
        manifest = json.load(fh)
    if not isinstance(manifest, list) or not manifest:
        raise InvalidInputError(f"{args.pairs}: expected a nonempty JSON list")
    pairs = []
    for entry in manifest:
        ref = _check_intensity_domain(read_image(entry["image"]), entry["image"],
                                      args.normalize)
        pairs.append(pipeline.GridPair(
            ref=ref,
            brain_mask=read_mask(entry["brain_mask"]),
            tumor_mask=read_mask(entry["tumor_mask"]),
            target_fraction=float(entry["target"])))
    cfg = _config_from_args(args)
    rows = pipeline.grid_search(pairs, _floats_csv(args.nl_values),
                                _floats_csv(args.s_ct_values), cfg)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nl", "s_ct", "ssim_tumor", "ssim_outside"])
        for row in rows:
            writer.writerow([row.nl, repr(row.s_ct), repr(row.ssim_tumor),
                             repr(row.ssim_outside)])
    _print_json({"out": str(args.out), "n_cells": len(rows)})
    return EXIT_OK


def cmd_phantom(args) -> int:
    spec = phantom.read_phantom_spec(args.spec)
    series = phantom.generate_phantom_series(spec, seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"pixel_spacing_mm": spec.pixel_spacing, "frames": [],
                "brain_mask": "brain_mask.img",
                "brain_area_mm2": series.brain_mask.area_mm2()}
    write_mask(outdir / "brain_mask.img", series.brain_mask)
    for i, frame in enumerate(series.frames):
        image_name = f"t{i:03d}_image.img"
        mask_name = f"t{i:03d}_mask.img"
        write_image(outdir / image_name, frame.image)
        write_mask(outdir / mask_name, frame.mask)
        manifest["frames"].append({
            "time_days": frame.time, "image": image_name, "mask": mask_name,
            "model_area_mm2": frame.area_mm2,
            "mask_area_mm2": frame.mask_area_mm2})
    mechanistic.write_series(outdir / "series.csv", outdir / "series_meta.json",
                             series.area_series())
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _print_json({"out": str(outdir), "n_frames": len(series.frames)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_generation_options(p, include_nl=True, include_s_ct=True):
    if include_nl:
        p.add_argument("--nl", type=int, default=200,
                       help="forward diffusion steps before guided denoising")
    if include_s_ct:
        p.add_argument("--s-ct", dest="s_ct", type=float, default=50000.0,
                       help="constant guidance scale")
    p.add_argument("--steps", type=int, default=1000, help="schedule length")
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--tau", type=float, default=pipeline.DEFAULT_TAU,
                   help="regressor intensity threshold")
    p.add_argument("--softness", type=float, default=pipeline.DEFAULT_SOFTNESS,
                   help="regressor logistic width")
    p.add_argument("--s0", type=float, default=pipeline.DEFAULT_S0,
                   help="analytic-gaussian denoiser prior width")
    p.add_argument("--dyn-clamp", dest="dyn_clamp", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true",
                   help="min-max rescale input images to [0, 1] on load")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gliosynth",
        description="Tumor growth forecasting with guided diffusion synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the growth model and bootstrap it")
    p.add_argument("--series", required=True, help="CSV with t_days,area_mm2")
    p.add_argument("--meta", required=True, help="JSON sidecar with onset/brain area")
    p.add_argument("--bootstrap", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.10)
    p.add_argument("--noise-mode", choices=("multiplicative", "additive"),
                   default="multiplicative")
    p.add_argument("--decay-form", choices=mechanistic.DECAY_FORMS,
                   default="independent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="quantiles of bootstrap predictions")
    p.add_argument("--fit", required=True, help="output of the fit command")
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--quantiles", default="2.5,50,97.5")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("generate", help="one guided generation")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="brain mask image")
    p.add_argument("--target", type=float, required=True,
                   help="tumor-fraction target in regressor scale")
    p.add_argument("--denoiser", default="analytic-gaussian",
                   help="analytic-delta | analytic-gaussian | plugin:COMMAND")
    p.add_argument("--regressor", default="soft-area",
                   help="soft-area | plugin:COMMAND")
    p.add_argument("--out", required=True)
    _add_generation_options(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("probmap", help="tumor growth probability map")
    p.add_argument("--mode", choices=("static", "dynamic"), required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--target", type=float, help="static mode target fraction")
    p.add_argument("--repeats", type=int, default=25, help="static repeats")
    p.add_argument("--series", help="dynamic mode series CSV")
    p.add_argument("--series-meta", dest="series_meta")
    p.add_argument("--time", type=float, help="dynamic mode future time, days")
    p.add_argument("--bootstrap", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.10)
    p.add_argument("--cap", type=float, default=90.0,
                   help="target percentile cap")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--out-map", dest="out_map", required=True)
    p.add_argument("--out-mask", dest="out_mask", required=True)
    p.add_argument("--save-generated", dest="save_generated")
    _add_generation_options(p)
    p.set_defaults(func=cmd_probmap)

    p = sub.add_parser("eval", help="similarity / distance / paired test")
    esub = p.add_subparsers(dest="metric", required=True)
    e = esub.add_parser("ssim")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--region", required=True)
    e.set_defaults(func=cmd_eval)
    e = esub.add_parser("hd95")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--spacing", type=float)
    e.set_defaults(func=cmd_eval)
    e = esub.add_parser("wilcoxon")
    e.add_argument("--x", required=True, help="CSV, one value per line")
    e.add_argument("--y", required=True)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="sweep nl and s_ct, score SSIM")
    p.add_argument("--pairs", required=True,
                   help="JSON list of {image, brain_mask, tumor_mask, target}")
    p.add_argument("--nl", dest="nl_values", default="100,200,500",
                   help="comma-separated noise levels")
    p.add_argument("--s-ct", dest="s_ct_values", default="50000,100000,500000",
                   help="comma-separated guidance scales")
    p.add_argument("--out", required=True, help="output CSV table")
    _add_generation_options(p, include_nl=False, include_s_ct=False)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("phantom", help="synthesize a longitudinal phantom")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PluginError as exc:
        print(f"plugin error: {exc}", file=sys.stderr)
        return EXIT_PLUGIN
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidInputError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
