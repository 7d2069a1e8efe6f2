"""Command-line front end.

One subcommand per pipeline stage plus `sweep` and `pipeline` for the
composed runs. Exit codes: 0 on success, 2 for configuration problems
(every offending key is reported, not just the first), 3 for runtime
failures. Verbosity comes from the PANP_LOG environment variable
(error | info | debug, default info). All randomness is derived from
--seed, so every subcommand is reproducible bit for bit; the pipeline's
wall-clock timings live in their own file and are the only rerun-variant
output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .core import (Grid2D, PixelImage, RfFrame, ScalarField, read_container,
                   write_container)
from .acoustics import (MediumConfig, TransducerArray, forward_chain,
                        make_solver_config)
from .optics import McConfig, OpticalProperties, build_p0, mc_fluence, \
    rasterize_needle
from .recon import (STANDARD_PIXEL, fk_reconstruct, to_standard_image,
                    zero_early_samples)
from . import dataset as ds_mod
from . import neural
from .detect import binarize, fit_segment, hough_accumulate, hough_peaks, \
    line_to_segment, max_contour_select
from . import pipeline as pl
from .pipeline import ConfigError, SCHEMA_VERSION

LOG = logging.getLogger("panvis")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("PANP_LOG", "info")
    if name not in _LOG_LEVELS:
        raise ConfigError([f"PANP_LOG: unknown level {name!r}; expected "
                           f"one of {', '.join(sorted(_LOG_LEVELS))}"])
    logging.basicConfig(level=_LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError([f"--config: file not found: {path}"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"--config: {path} is not valid JSON ({e})"])


def _write_json(path, doc) -> None:
    pl._write_json(path, doc)


def _config_and_seed(args) -> tuple[dict, int]:
    cfg = pl.validate_config(_load_config(args.config))
    seed = cfg["seed"] if args.seed is None else args.seed
    return cfg, int(seed)


# ---------------------------------------------------------------------------
# single-stage commands
# ---------------------------------------------------------------------------

def _simulate(cfg: dict, seed: int):
    section = cfg["dataset"]
    ds = pl.dataset_config(section)
    pose = pl.pose_from_config(cfg, ds.grid)
    mu_a = section["mu_a_values"][0]
    tissue = OpticalProperties(mu_a=mu_a, mu_s=section["mu_s"],
                               anisotropy=section["anisotropy"])
    mask, _ = rasterize_needle(pose, ds.grid)
    mc = mc_fluence(ds.grid, tissue, ds.beam,
                    McConfig(n_photons=section["n_photons"], seed=seed),
                    needle_mask=mask)
    p0 = build_p0(mc, mask)
    extra = {"schema_version": SCHEMA_VERSION, "seed": seed, "mu_a": mu_a,
             "grid": {"nx": ds.grid.nx, "nz": ds.grid.nz, "dx": ds.grid.dx},
             "pose": dataclasses.asdict(pose)}
    return ds, mc, p0, extra


def cmd_simulate_fluence(args) -> int:
    cfg, seed = _config_and_seed(args)
    os.makedirs(args.out, exist_ok=True)
    ds, mc, p0, extra = _simulate(cfg, seed)
    write_container(os.path.join(args.out, "fluence.padf"),
                    mc.fluence.values, role="fluence",
                    pixel_size_m=ds.grid.dx, extra=extra)
    write_container(os.path.join(args.out, "p0.padf"), p0.values,
                    role="initial_pressure", pixel_size_m=ds.grid.dx,
                    extra=extra)
    LOG.info("fluence and initial pressure written to %s", args.out)
    return 0


def cmd_forward(args) -> int:
    cfg, seed = _config_and_seed(args)
    section = cfg["dataset"]
    ds = pl.dataset_config(section)
    if args.infile is not None:
        hdr, values = read_container(args.infile)
        g = (hdr.get("extra") or {}).get("grid")
        grid = Grid2D(nx=g["nx"], nz=g["nz"], dx=g["dx"]) if g else ds.grid
        p0 = ScalarField(grid, np.asarray(values, dtype=np.float64),
                         role="initial_pressure")
    else:
        ds, _, p0, _ = _simulate(cfg, seed)
        grid = ds.grid
    solver = make_solver_config(grid, ds.medium, ds.array,
                                precision=section["precision"])
    rf = zero_early_samples(forward_chain(p0, ds.medium, ds.array, solver))
    os.makedirs(args.out, exist_ok=True)
    write_container(os.path.join(args.out, "rf.padf"), rf.samples,
                    role="rf_frame", sample_rate_hz=ds.array.sample_rate,
                    extra={"schema_version": SCHEMA_VERSION, "seed": seed,
                           "array": dataclasses.asdict(ds.array),
                           "medium": dataclasses.asdict(ds.medium)})
    LOG.info("RF frame written to %s", os.path.join(args.out, "rf.padf"))
    return 0


def cmd_reconstruct(args) -> int:
    cfg, _ = _config_and_seed(args)
    hdr, values = read_container(args.infile)
    extra = hdr.get("extra") or {}
    if "array" in extra:
        array = TransducerArray(**extra["array"])
    else:
        a = cfg["dataset"]["array"]
        array = TransducerArray(n_elements=a["n_elements"],
                                pitch=a["pitch"],
                                n_samples=a["n_samples"])
    if "medium" in extra:
        medium = MediumConfig(**extra["medium"])
    else:
        m = cfg["dataset"]["medium"]
        medium = MediumConfig(sound_speed=m["sound_speed"],
                              density=m["density"])
    frame = RfFrame(np.asarray(values, dtype=np.float64), array)
    image = to_standard_image(fk_reconstruct(frame, medium))
    os.makedirs(args.out, exist_ok=True)
    write_container(os.path.join(args.out, "recon.padf"), image.values,
                    role="recon_image", pixel_size_m=image.pixel_size,
                    extra={"schema_version": SCHEMA_VERSION})
    LOG.info("reconstruction written to %s",
             os.path.join(args.out, "recon.padf"))
    return 0


def cmd_gen_dataset(args) -> int:
    cfg, seed = _config_and_seed(args)
    ds = pl.dataset_config(cfg["dataset"])
    jobs = cfg["jobs"] if args.jobs is None else args.jobs
    ds_mod.gen_dataset(ds, args.out, seed=seed, count=args.count,
                       jobs=jobs, log=LOG.info)
    LOG.info("dataset written to %s", args.out)
    return 0


def cmd_train(args) -> int:
    problems = []
    div = 2 ** (args.scales - 1)
    if args.input_size % div:
        problems.append(f"--input-size: must be divisible by {div} for a "
                        f"{args.scales}-scale network")
    if args.iters < 1:
        problems.append("--iters: must be at least 1")
    if args.lr <= 0:
        problems.append("--lr: must be positive")
    if problems:
        raise ConfigError(problems)
    man = ds_mod.load_manifest(args.manifest)
    net_cfg = neural.NetworkConfig(n_scales=args.scales,
                                   base_channels=args.base_channels)
    tcfg = neural.TrainConfig(iterations=args.iters,
                              batch_size=args.batch, lr0=args.lr,
                              seed=args.seed, val_every=args.val_every,
                              input_size=args.input_size,
                              precision=args.precision)
    weights, history = neural.train(man, net_cfg, tcfg, log=LOG.info)
    neural.save_weights(args.out, weights)
    _write_json(os.path.splitext(args.out)[0] + "_history.json",
                {"schema_version": SCHEMA_VERSION,
                 "train_loss": history["train_loss"],
                 "val_loss": history["val_loss"]})
    LOG.info("weights written to %s", args.out)
    return 0


def _load_weights_file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"weights file not found: {path}; run `panvis train` first or "
            f"point --weights at an existing .padf weights file")
    return neural.load_weights(path)


def _read_image(path) -> PixelImage:
    hdr, values = read_container(path)
    return PixelImage(np.asarray(values, dtype=np.float64),
                      pixel_size=hdr.get("pixel_size_m") or STANDARD_PIXEL)


def cmd_infer(args) -> int:
    weights = _load_weights_file(args.weights)
    div = 2 ** (weights.config.n_scales - 1)
    if args.size % div:
        raise ConfigError([f"--size: must be divisible by {div} for the "
                           f"loaded {weights.config.n_scales}-scale "
                           f"network"])
    image = _read_image(args.infile)
    out = neural.infer(weights, image, size=args.size)
    write_container(args.out, out.values, role="enhanced_image",
                    pixel_size_m=out.pixel_size,
                    extra={"schema_version": SCHEMA_VERSION,
                           "source": os.path.basename(args.infile)})
    LOG.info("enhanced image written to %s", args.out)
    return 0


def cmd_detect(args) -> int:
    if args.method == "unet-postproc" and args.weights is None:
        raise ConfigError(["--weights: required for method unet-postproc"])
    image = _read_image(args.infile)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "method": args.method,
        "alpha": args.alpha,
        "image": {"rows": image.values.shape[0],
                  "cols": image.values.shape[1],
                  "path": os.path.basename(args.infile)},
        "threshold": None,
        "lines": [],
        "segment": None,
    }
    shape = image.values.shape

    if args.method == "hough":
        mask = binarize(image.values, alpha=args.alpha)
        doc["threshold"] = float(args.alpha * image.values.max())
        if mask.any():
            lines = hough_peaks(hough_accumulate(mask), args.peaks,
                                min_votes=args.min_votes)
            doc["lines"] = [{"r": ln.r, "theta": ln.theta,
                             "votes": ln.votes} for ln in lines]
            if lines:
                seg = line_to_segment(lines[0], shape)
                doc["segment"] = pl._segment_record(seg)
    else:
        weights = _load_weights_file(args.weights)
        div = 2 ** (weights.config.n_scales - 1)
        if args.size % div:
            raise ConfigError([f"--size: must be divisible by {div} for "
                               f"the loaded {weights.config.n_scales}-scale "
                               f"network"])
        enhanced = neural.infer(weights, image, size=args.size).values
        doc["threshold"] = float(args.alpha * enhanced.max())
        mask = max_contour_select(binarize(enhanced, alpha=args.alpha))
        seg = None
        if mask.any():
            try:
                seg = fit_segment(mask)
            except ValueError:
                seg = None
        if seg is not None:
            # map back from network resolution to source-image pixels
            rs = shape[0] / enhanced.shape[0]
            cs = shape[1] / enhanced.shape[1]
            doc["segment"] = {
                "endpoint_a": [seg.endpoint_a[0] * cs,
                               seg.endpoint_a[1] * rs],
                "endpoint_b": [seg.endpoint_b[0] * cs,
                               seg.endpoint_b[1] * rs],
            }

    if args.out:
        _write_json(args.out, doc)
        LOG.info("detection written to %s", args.out)
    else:
        json.dump(doc, sys.stdout, sort_keys=True, indent=1)
        sys.stdout.write("\n")
    return 0


def cmd_eval(args) -> int:
    man = ds_mod.load_manifest(args.truth)
    preds = {}
    for name in sorted(os.listdir(args.pred)):
        if not (name.startswith("pred_") and name.endswith(".padf")):
            continue
        index = int(name[5:-5])
        _, values = read_container(os.path.join(args.pred, name))
        preds[index] = np.asarray(values, dtype=np.float64)
    if not preds:
        raise RuntimeError(f"no pred_*.padf files found in {args.pred}")
    report = pl.evaluate_entries(man, preds, alpha=args.alpha,
                                 n_peaks=args.peaks,
                                 min_votes=args.min_votes)
    _write_json(args.out, report)
    LOG.info("metrics for %d frames written to %s", len(preds), args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    pl.sweep(args.kind, cfg, args.out, seed=args.seed, jobs=args.jobs,
             log=LOG.info)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args.config)
    pl.run_pipeline(cfg, args.out, seed=args.seed, jobs=args.jobs,
                    log=LOG.info)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_seed(p, out_dir=True):
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the config seed")
    if out_dir:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panvis",
        description="LED photoacoustic needle imaging: simulation, "
                    "reconstruction, enhancement, detection, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-fluence",
                       help="Monte Carlo fluence and initial pressure for "
                            "one pose")
    _add_config_seed(p)
    p.set_defaults(func=cmd_simulate_fluence)

    p = sub.add_parser("forward",
                       help="acoustic forward simulation to an RF frame")
    _add_config_seed(p)
    p.add_argument("--in", dest="infile", default=None,
                   help="initial-pressure container; simulated when absent")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("reconstruct",
                       help="frequency-domain reconstruction to the "
                            "standard image")
    _add_config_seed(p)
    p.add_argument("--in", dest="infile", required=True,
                   help="RF-frame container")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gen-dataset", help="generate a semi-synthetic "
                                           "dataset with a manifest")
    _add_config_seed(p)
    p.add_argument("--count", type=int, default=None,
                   help="overrides the config entry count")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the enhancement network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weights file (.padf)")
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--precision", choices=("float32", "float64"),
                   default="float32")
    p.add_argument("--val-every", type=int, default=25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="enhance one image with trained "
                                     "weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=256,
                   help="network inference resolution")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("detect", help="locate the needle in one image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--method", choices=("unet-postproc", "hough"),
                   required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", default=None,
                   help="detection JSON (stdout when absent)")
    p.add_argument("--alpha", type=float, default=0.2,
                   help="threshold as a fraction of the image maximum")
    p.add_argument("--min-votes", type=int, default=1)
    p.add_argument("--peaks", type=int, default=1)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score predictions against a dataset "
                                    "manifest")
    p.add_argument("--pred", required=True,
                   help="directory of pred_*.padf enhancements")
    p.add_argument("--truth", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--min-votes", type=int, default=1)
    p.add_argument("--peaks", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="parameter sweep with CSV and plot")
    p.add_argument("--kind", choices=pl.SWEEP_KINDS, required=True)
    _add_config_seed(p)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pipeline", help="dataset, training, inference and "
                                        "evaluation in one run")
    _add_config_seed(p)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - single exit path for the CLI
        LOG.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
