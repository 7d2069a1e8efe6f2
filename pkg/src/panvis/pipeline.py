"""End-to-end orchestration on top of the stage modules.

Provides the JSON run-configuration schema (validated with every problem
reported, not just the first), the full gen-dataset -> train -> infer ->
detect -> eval pipeline with its summary table, the supplementary-style
parameter sweeps, and overlay rendering. Everything here is deterministic
for fixed seeds; wall-clock timings are quarantined in their own output
file so reruns stay byte-identical.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import time
from dataclasses import replace

import numpy as np
from PIL import Image

from .core import (Grid2D, PixelImage, RfFrame, read_container,
                   resize_bicubic, write_container)
from .acoustics import MediumConfig, TransducerArray
from .optics import GAUGE_DIAMETERS, BeamConfig, NeedlePose
from .recon import (DEFAULT_ZERO_SAMPLES, STANDARD_PIXEL, average_frames,
                    fk_reconstruct, physical_to_standard,
                    to_standard_image)
from .dataset import (BackgroundConfig, DatasetConfig, DatasetManifest,
                      composite_rf, gen_background_rf, gen_dataset,
                      load_pair, pose_from_record, pose_table,
                      simulate_needle)
from . import neural
from .neural import NetworkConfig, TrainConfig, infer
from .detect import (HoughLine, NeedleSegment, binarize, fit_segment,
                     hough_accumulate, hough_peaks, line_to_segment,
                     max_contour_select)
from .metrics import mhd, segment_to_pointset, snr

LOG = logging.getLogger("panvis.pipeline")

SCHEMA_VERSION = 1

# summary table columns, in the order the result tables use them
COL_CONV = "Conventional"
COL_UNET = "U-Net"
COL_POST = "U-Net + post-processing"
COL_SHT = "SHT"
COLUMNS = (COL_CONV, COL_UNET, COL_POST, COL_SHT)

# default sweep grids
DEFAULT_AVERAGING_COUNTS = tuple(range(4, 25, 2))
DEFAULT_GAUGES = ("16G", "18G", "20G", "25G", "30G")
DEFAULT_CAPACITY_SCALES = (3, 4, 5)
DEFAULT_INPUT_SIZES = (64, 128, 256)
SWEEP_KINDS = ("averaging", "diameter", "capacity", "input_size")

# local purpose tags for seed derivation inside sweeps
_TAG_SWEEP_MC = 11
_TAG_SWEEP_BG = 12
_TAG_SWEEP_NOISE = 13


class ConfigError(ValueError):
    """Raised with the complete list of configuration problems."""

    def __init__(self, problems):
        self.problems = tuple(problems)
        super().__init__(f"{len(self.problems)} config problem(s): "
                         + "; ".join(self.problems))


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

class _Leaf:
    def __init__(self, default, check):
        self.default = default
        self.check = check


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return _is_int(v) or isinstance(v, float)


def _int_min(lo):
    def check(v):
        if not _is_int(v):
            return "must be an integer"
        if v < lo:
            return f"must be >= {lo}"
    return check


def _num_range(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        if not _is_num(v):
            return "must be a number"
        if (v <= lo if lo_open else v < lo) or (v >= hi if hi_open else v > hi):
            bra = "(" if lo_open else "["
            ket = ")" if hi_open else "]"
            return f"must be in {bra}{lo}, {hi}{ket}"
    return check


def _num_min(lo, open_=False):
    def check(v):
        if not _is_num(v):
            return "must be a number"
        if v <= lo if open_ else v < lo:
            return f"must be {'>' if open_ else '>='} {lo}"
    return check


def _choice(options):
    def check(v):
        if v not in options:
            return f"must be one of {', '.join(map(str, options))}"
    return check


def _num_list(item_check, min_len=1):
    def check(v):
        if not isinstance(v, (list, tuple)) or len(v) < min_len:
            return f"must be a list of at least {min_len} number(s)"
        for x in v:
            err = item_check(x)
            if err:
                return f"every element {err}"
    return check


def _pair(item_check, ordered=True):
    def check(v):
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            return "must be a pair [low, high]"
        for x in v:
            err = item_check(x)
            if err:
                return f"every element {err}"
        if ordered and v[0] > v[1]:
            return "low must not exceed high"
    return check


def _choice_list(options):
    def check(v):
        if not isinstance(v, (list, tuple)) or not v:
            return "must be a nonempty list"
        bad = [str(x) for x in v if x not in options]
        if bad:
            return (f"unknown value(s) {', '.join(bad)}; expected "
                    f"{', '.join(map(str, options))}")
    return check


def _schema_version(v):
    if not _is_int(v) or v != SCHEMA_VERSION:
        return f"must equal {SCHEMA_VERSION} (this build's config schema)"


def _optional_num(v):
    if v is not None and not _is_num(v):
        return "must be a number or null"


_PRECISION = _choice(("float32", "float64"))

# defaults reproduce the desk-scale reference run end to end
_SPEC = {
    "schema_version": _Leaf(SCHEMA_VERSION, _schema_version),
    "seed": _Leaf(0, _int_min(0)),
    "jobs": _Leaf(1, _int_min(1)),
    "dataset": {
        "count": _Leaf(200, _int_min(1)),
        "grid": {
            "nx": _Leaf(200, _int_min(16)),
            "nz": _Leaf(200, _int_min(16)),
            "dx": _Leaf(0.2e-3, _num_min(0, open_=True)),
        },
        "array": {
            "n_elements": _Leaf(128, _int_min(8)),
            "pitch": _Leaf(0.3e-3, _num_min(0, open_=True)),
            "n_samples": _Leaf(1024, _int_min(64)),
        },
        "medium": {
            "sound_speed": _Leaf(1540.0, _num_min(0, open_=True)),
            "density": _Leaf(1000.0, _num_min(0, open_=True)),
        },
        "beam_width": _Leaf(38.4e-3, _num_min(0, open_=True)),
        "gauge": _Leaf("18G", _choice(tuple(sorted(GAUGE_DIAMETERS)))),
        "depths": _Leaf([5e-3, 10e-3, 15e-3, 20e-3, 25e-3],
                        _num_list(_num_min(0, open_=True))),
        "angles_deg": _Leaf([20.0, 35.0, 50.0, 65.0],
                            _num_list(_num_range(0, 90, lo_open=True))),
        "mu_a_values": _Leaf([1.0, 1.5, 2.0],
                             _num_list(_num_min(0, open_=True))),
        "mu_s": _Leaf(1000.0, _num_min(0)),
        "anisotropy": _Leaf(0.9, _num_range(-1, 1, lo_open=True,
                                            hi_open=True)),
        "n_photons": _Leaf(50_000, _int_min(1)),
        "tip_band": _Leaf([0.35, 0.65], _pair(_num_range(0, 1))),
        "target_peak_factor": _Leaf(1.5, _num_min(0, open_=True)),
        "precision": _Leaf("float32", _PRECISION),
        "background": {
            "n_vessels": _Leaf([2, 6], _pair(_int_min(0))),
            "radius_range": _Leaf([0.5e-3, 2.0e-3],
                                  _pair(_num_min(0, open_=True))),
            "depth_range": _Leaf([5.0e-3, 30.0e-3],
                                 _pair(_num_min(0, open_=True))),
            "two_layer_prob": _Leaf(0.35, _num_range(0, 1)),
            "noise_std": _Leaf(0.002, _num_min(0)),
        },
    },
    "train": {
        "iterations": _Leaf(2000, _int_min(1)),
        "batch_size": _Leaf(4, _int_min(1)),
        "lr0": _Leaf(1.0e-3, _num_min(0, open_=True)),
        "n_scales": _Leaf(3, _int_min(1)),
        "base_channels": _Leaf(16, _int_min(1)),
        "input_size": _Leaf(128, _int_min(4)),
        "precision": _Leaf("float32", _PRECISION),
        "val_every": _Leaf(25, _int_min(1)),
    },
    "detect": {
        "alpha": _Leaf(0.2, _num_range(0, 1, lo_open=True)),
        "min_votes": _Leaf(1, _int_min(1)),
        "n_peaks": _Leaf(1, _int_min(1)),
        "infer_size": _Leaf(256, _int_min(4)),
    },
    "pose": {
        "entry_x": _Leaf(None, _optional_num),
        "angle_deg": _Leaf(45.0, _num_range(0, 90, lo_open=True)),
        "depth": _Leaf(10.0e-3, _num_min(0, open_=True)),
    },
    "sweep": {
        "counts": _Leaf(list(DEFAULT_AVERAGING_COUNTS),
                        _num_list(_int_min(1))),
        "gauges": _Leaf(list(DEFAULT_GAUGES),
                        _choice_list(tuple(sorted(GAUGE_DIAMETERS)))),
        "scales": _Leaf(list(DEFAULT_CAPACITY_SCALES),
                        _num_list(_int_min(1))),
        "input_sizes": _Leaf(list(DEFAULT_INPUT_SIZES),
                             _num_list(_int_min(4))),
        "repeats": _Leaf(3, _int_min(1)),
        "iterations": _Leaf(None, lambda v: None if v is None
                            else _int_min(1)(v)),
        "noise_std": _Leaf(0.05, _num_min(0, open_=True)),
    },
}


def _defaults(spec):
    out = {}
    for key, sub in spec.items():
        out[key] = _defaults(sub) if isinstance(sub, dict) \
            else copy.deepcopy(sub.default)
    return out


def _merge(spec, doc, path, out, problems):
    for key in sorted(doc):
        value = doc[key]
        where = f"{path}{key}"
        if key not in spec:
            problems.append(f"{where}: unknown key")
            continue
        sub = spec[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                problems.append(f"{where}: must be an object")
            else:
                _merge(sub, value, where + ".", out[key], problems)
        else:
            err = sub.check(value)
            if err:
                problems.append(f"{where}: {err}")
            else:
                out[key] = list(value) if isinstance(value, (list, tuple)) \
                    else value


def validate_config(doc: dict | None) -> dict:
    """Merge a JSON config onto the defaults.

    Raises ConfigError carrying every offending key (dotted path plus
    reason) rather than stopping at the first one.
    """
    out = _defaults(_SPEC)
    if doc is None:
        return out
    if not isinstance(doc, dict):
        raise ConfigError(["top level: must be a JSON object"])
    problems: list[str] = []
    _merge(_SPEC, doc, "", out, problems)
    if problems:
        raise ConfigError(problems)
    return out


def _size_problems(cfg) -> list[str]:
    """Cross-field checks the per-key schema cannot express."""
    problems = []
    div = 2 ** (cfg["train"]["n_scales"] - 1)
    for key in ("input_size",):
        if cfg["train"][key] % div:
            problems.append(f"train.{key}: must be divisible by {div} for a "
                            f"{cfg['train']['n_scales']}-scale network")
    if cfg["detect"]["infer_size"] % div:
        problems.append(f"detect.infer_size: must be divisible by {div} for "
                        f"a {cfg['train']['n_scales']}-scale network")
    return problems


# ---------------------------------------------------------------------------
# config -> stage objects
# ---------------------------------------------------------------------------

def dataset_config(section: dict) -> DatasetConfig:
    g, a, m, bg = (section["grid"], section["array"], section["medium"],
                   section["background"])
    return DatasetConfig(
        grid=Grid2D(nx=g["nx"], nz=g["nz"], dx=g["dx"]),
        medium=MediumConfig(sound_speed=m["sound_speed"],
                            density=m["density"]),
        array=TransducerArray(n_elements=a["n_elements"], pitch=a["pitch"],
                              n_samples=a["n_samples"]),
        beam=BeamConfig(width=section["beam_width"]),
        background=BackgroundConfig(
            n_vessels=tuple(bg["n_vessels"]),
            radius_range=tuple(bg["radius_range"]),
            depth_range=tuple(bg["depth_range"]),
            two_layer_prob=bg["two_layer_prob"],
            noise_std=bg["noise_std"]),
        depths=tuple(section["depths"]),
        angles_deg=tuple(section["angles_deg"]),
        mu_a_values=tuple(section["mu_a_values"]),
        mu_s=section["mu_s"],
        anisotropy=section["anisotropy"],
        gauge=section["gauge"],
        n_photons=section["n_photons"],
        count=section["count"],
        tip_band=tuple(section["tip_band"]),
        target_peak_factor=section["target_peak_factor"],
        precision=section["precision"],
    )


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig(n_scales=cfg["train"]["n_scales"],
                         base_channels=cfg["train"]["base_channels"])


def train_settings(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(iterations=t["iterations"],
                       batch_size=t["batch_size"], lr0=t["lr0"], seed=seed,
                       val_every=t["val_every"],
                       input_size=t["input_size"], precision=t["precision"])


def pose_from_config(cfg: dict, grid: Grid2D) -> NeedlePose:
    p = cfg["pose"]
    gauge = cfg["dataset"]["gauge"]
    entry_x = p["entry_x"]
    if entry_x is None:
        # place the tip at the lateral centre of the grid
        a = np.deg2rad(p["angle_deg"])
        entry_x = 0.5 * grid.extent_x - p["depth"] * np.cos(a) / np.sin(a)
    return NeedlePose(entry_x=float(entry_x), angle_deg=p["angle_deg"],
                      depth=p["depth"], diameter=GAUGE_DIAMETERS[gauge],
                      gauge=gauge)


def manifest_geometry(man: DatasetManifest
                      ) -> tuple[Grid2D, TransducerArray, MediumConfig]:
    if not man.config:
        raise ValueError("manifest carries no config record; regenerate the "
                         "dataset with this build")
    g, a, m = man.config["grid"], man.config["array"], man.config["medium"]
    return (Grid2D(nx=g["nx"], nz=g["nz"], dx=g["dx"]),
            TransducerArray(**a),
            MediumConfig(sound_speed=m["sound_speed"], density=m["density"]))


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def _clip_to_frame(p0, p1, shape, row_min: float = 0.0):
    """Clip segment p0-p1 (x, y) to the pixel rectangle; None if outside."""
    h, w = shape
    t0, t1 = 0.0, 1.0
    d = (p1[0] - p0[0], p1[1] - p0[1])
    for axis, lo, hi in ((0, 0.0, w - 1.0), (1, row_min, h - 1.0)):
        if abs(d[axis]) < 1e-12:
            if p0[axis] < lo or p0[axis] > hi:
                return None
            continue
        ta = (lo - p0[axis]) / d[axis]
        tb = (hi - p0[axis]) / d[axis]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if not t0 < t1:
        return None
    a = (p0[0] + t1 * d[0], p0[1] + t1 * d[1])
    b = (p0[0] + t0 * d[0], p0[1] + t0 * d[1])
    if (a[1], a[0]) < (b[1], b[0]):
        a, b = b, a
    return NeedleSegment((float(a[0]), float(a[1])),
                         (float(b[0]), float(b[1])))


def truth_segment(pose_rec: dict, grid: Grid2D, array: TransducerArray,
                  medium: MediumConfig, shape=(512, 512),
                  row_min: float = 0.0) -> NeedleSegment | None:
    """Reference shaft segment in standard-image pixels, clipped to the
    frame. Poses are stored in grid coordinates; the standard mapping wants
    lateral offsets from the array centre. row_min additionally clips away
    the shallow end (used by sweeps to score only acquirable depths)."""
    pose = pose_from_record(pose_rec)
    half = grid.extent_x / 2.0
    r0, c0 = physical_to_standard(pose.entry_x - half, 0.0, array, medium)
    tip_x, tip_z = pose.tip
    r1, c1 = physical_to_standard(tip_x - half, tip_z, array, medium)
    return _clip_to_frame((float(c0), float(r0)), (float(c1), float(r1)),
                          shape, row_min=row_min)


def visible_row_min(array: TransducerArray, medium: MediumConfig,
                    margin: int = 4) -> float:
    """First standard-image row below the blanked early samples."""
    z_blank = DEFAULT_ZERO_SAMPLES * medium.sound_speed / array.sample_rate
    row, _ = physical_to_standard(0.0, z_blank, array, medium)
    return max(0.0, float(row) + margin)


def _mask_points(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.stack([cols, rows], axis=1)


def _segment_record(seg: NeedleSegment | None):
    if seg is None:
        return None
    return {"endpoint_a": [seg.endpoint_a[0], seg.endpoint_a[1]],
            "endpoint_b": [seg.endpoint_b[0], seg.endpoint_b[1]]}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def enhance_to_frame(weights, values: np.ndarray, size: int) -> np.ndarray:
    """Run the network at its inference resolution and resample the output
    back onto the input frame (bicubic undershoot clamped at zero)."""
    out = infer(weights, PixelImage(np.asarray(values, dtype=np.float64),
                                    pixel_size=STANDARD_PIXEL), size=size)
    up = resize_bicubic(out.values, np.asarray(values).shape)
    return np.maximum(up, 0.0)


def _try_snr(image, segment):
    try:
        return float(snr(image, segment).snr)
    except ValueError:
        # constant background rectangle: suppression is total, SNR has no
        # finite value; recorded as null and skipped by the aggregates
        return None


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    arr = np.asarray(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def evaluate_entries(man: DatasetManifest, preds: dict[int, np.ndarray],
                     alpha: float = 0.2, n_peaks: int = 1,
                     min_votes: int = 1) -> dict:
    """Score predicted enhancements against the manifest ground truth.

    preds maps entry index -> enhanced image (any resolution; resampled to
    the stored frame). Four routes are scored per frame: the conventional
    reconstruction, the raw network output, the post-processed segment fit,
    and a standard Hough-transform baseline on the conventional image. MHD
    is measured against the rasterized reference shaft, SNR along it.
    """
    grid, array, medium = manifest_geometry(man)
    by_index = {e["index"]: e for e in man.entries}
    missing = sorted(set(preds) - set(by_index))
    if missing:
        raise ValueError(f"predictions reference unknown entry indices "
                         f"{missing}")
    if not preds:
        raise ValueError("no predictions to evaluate")

    frames = []
    for index in sorted(preds):
        entry = by_index[index]
        _, conv32 = read_container(man.path(entry["image"]))
        conv = np.asarray(conv32, dtype=np.float64)
        shape = conv.shape
        gt_seg = truth_segment(entry["pose"], grid, array, medium, shape)
        if gt_seg is None:
            raise ValueError(f"entry {index}: reference shaft lies outside "
                             f"the standard frame")
        gt_pts = segment_to_pointset(gt_seg, bounds=shape)

        enhanced = np.asarray(preds[index], dtype=np.float64)
        if enhanced.shape != shape:
            enhanced = np.maximum(resize_bicubic(enhanced, shape), 0.0)

        conv_mask = binarize(conv, alpha=alpha)
        unet_mask = binarize(enhanced, alpha=alpha)
        post_mask = max_contour_select(unet_mask)
        post_threshold = float(alpha * enhanced.max()) if enhanced.max() > 0 \
            else None
        try:
            post_seg = fit_segment(post_mask)
        except ValueError:
            post_seg = None

        sht_line = None
        sht_seg = None
        if conv_mask.any():
            lines = hough_peaks(hough_accumulate(conv_mask), n_peaks,
                                min_votes=min_votes)
            if lines:
                sht_line = lines[0]
                sht_seg = line_to_segment(sht_line, shape)

        def col_mhd(pts):
            return float(mhd(pts, gt_pts)) if len(pts) else None

        mhd_conv = col_mhd(_mask_points(conv_mask))
        mhd_unet = col_mhd(_mask_points(unet_mask))
        if post_seg is not None:
            mhd_post = col_mhd(segment_to_pointset(post_seg, bounds=shape))
        else:
            mhd_post = col_mhd(_mask_points(post_mask))
        mhd_sht = None
        if sht_seg is not None:
            mhd_sht = col_mhd(segment_to_pointset(sht_seg, bounds=shape))

        ordered = (None not in (mhd_conv, mhd_unet, mhd_post)
                   and mhd_conv > mhd_unet > mhd_post)
        frames.append({
            "index": index,
            "split": entry["split"],
            "snr_conventional": _try_snr(conv, gt_seg),
            "snr_unet": _try_snr(enhanced, gt_seg),
            "mhd_conventional": mhd_conv,
            "mhd_unet": mhd_unet,
            "mhd_unet_post": mhd_post,
            "mhd_sht": mhd_sht,
            "detected": bool(post_mask.any()),
            "ordered": bool(ordered),
            "post_threshold": post_threshold,
            "post_segment": _segment_record(post_seg),
            "sht_line": None if sht_line is None else
                {"r": sht_line.r, "theta": sht_line.theta,
                 "votes": sht_line.votes},
            "sht_segment": _segment_record(sht_seg),
        })

    snr_conv = _mean_std([f["snr_conventional"] for f in frames])
    snr_unet = _mean_std([f["snr_unet"] for f in frames])
    ratio = None
    if snr_conv and snr_unet and snr_conv["mean"] > 0:
        ratio = snr_unet["mean"] / snr_conv["mean"]
    return {
        "schema_version": SCHEMA_VERSION,
        "alpha": alpha,
        "hough": {"n_peaks": n_peaks, "min_votes": min_votes},
        "columns": list(COLUMNS),
        "snr": {
            COL_CONV: snr_conv,
            COL_UNET: snr_unet,
            COL_POST: None,
            COL_SHT: None,
        },
        "mhd": {
            COL_CONV: _mean_std([f["mhd_conventional"] for f in frames]),
            COL_UNET: _mean_std([f["mhd_unet"] for f in frames]),
            COL_POST: _mean_std([f["mhd_unet_post"] for f in frames]),
            COL_SHT: _mean_std([f["mhd_sht"] for f in frames]),
        },
        "snr_ratio_unet_vs_conventional": ratio,
        "mhd_ordering_fraction": sum(f["ordered"] for f in frames)
            / len(frames),
        "detected_fraction": sum(f["detected"] for f in frames)
            / len(frames),
        "frames": frames,
    }


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def run_pipeline(config: dict | None, out_dir, seed: int | None = None,
                 jobs: int | None = None, log=None) -> dict:
    """gen-dataset -> train -> infer on the test split -> detect -> eval.

    Writes under out_dir: dataset/, weights.padf, history.json, pred/,
    detections.json, metrics.json, overlays/, summary.json (all
    deterministic for a fixed seed) plus timings.json (wall clock, the one
    rerun-variant file). Returns the summary dict.
    """
    cfg = validate_config(config)
    problems = _size_problems(cfg)
    if cfg["dataset"]["count"] < 10:
        problems.append("dataset.count: must be at least 10 so the val and "
                        "test splits are nonempty")
    if problems:
        raise ConfigError(problems)
    seed = cfg["seed"] if seed is None else int(seed)
    jobs = cfg["jobs"] if jobs is None else int(jobs)
    log = log or LOG.info

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    timings = {}
    t_all = time.monotonic()

    log(f"dataset: {cfg['dataset']['count']} entries")
    t0 = time.monotonic()
    ds_cfg = dataset_config(cfg["dataset"])
    man = gen_dataset(ds_cfg, os.path.join(out_dir, "dataset"), seed=seed,
                      jobs=jobs, log=log)
    timings["gen_dataset_s"] = round(time.monotonic() - t0, 3)

    log(f"train: {cfg['train']['iterations']} iterations at "
        f"{cfg['train']['input_size']}x{cfg['train']['input_size']}")
    t0 = time.monotonic()
    weights, history = neural.train(man, network_config(cfg),
                                    train_settings(cfg, seed), log=log)
    timings["train_s"] = round(time.monotonic() - t0, 3)
    neural.save_weights(os.path.join(out_dir, "weights.padf"), weights)
    _write_json(os.path.join(out_dir, "history.json"), {
        "schema_version": SCHEMA_VERSION,
        "train_loss": history["train_loss"],
        "val_loss": history["val_loss"],
    })

    det = cfg["detect"]
    pred_dir = os.path.join(out_dir, "pred")
    os.makedirs(pred_dir, exist_ok=True)
    preds = {}
    t0 = time.monotonic()
    for entry in man.split("test"):
        hdr, img32 = read_container(man.path(entry["image"]))
        image = PixelImage(np.asarray(img32, dtype=np.float64),
                           pixel_size=hdr.get("pixel_size_m",
                                              STANDARD_PIXEL))
        enhanced = infer(weights, image, size=det["infer_size"])
        index = entry["index"]
        write_container(os.path.join(pred_dir, f"pred_{index:05d}.padf"),
                        enhanced.values, role="enhanced_image",
                        pixel_size_m=enhanced.pixel_size,
                        extra={"index": index,
                               "schema_version": SCHEMA_VERSION})
        # evaluate exactly what the container holds so a later `eval` on
        # the written predictions reproduces metrics.json byte for byte
        preds[index] = np.asarray(enhanced.values, dtype=np.float32)
    timings["infer_s"] = round(time.monotonic() - t0, 3)
    log(f"inference: {len(preds)} held-out frames")

    t0 = time.monotonic()
    report = evaluate_entries(man, preds, alpha=det["alpha"],
                              n_peaks=det["n_peaks"],
                              min_votes=det["min_votes"])
    timings["eval_s"] = round(time.monotonic() - t0, 3)
    _write_json(os.path.join(out_dir, "metrics.json"), report)
    _write_json(os.path.join(out_dir, "detections.json"), {
        "schema_version": SCHEMA_VERSION,
        "alpha": det["alpha"],
        "frames": [{"index": f["index"],
                    "post_threshold": f["post_threshold"],
                    "post_segment": f["post_segment"],
                    "sht_line": f["sht_line"],
                    "sht_segment": f["sht_segment"]}
                   for f in report["frames"]],
    })

    overlay_dir = os.path.join(out_dir, "overlays")
    os.makedirs(overlay_dir, exist_ok=True)
    by_index = {e["index"]: e for e in man.entries}
    for frame in report["frames"]:
        _, conv32 = read_container(man.path(by_index[frame["index"]]["image"]))
        seg = frame["post_segment"]
        detection = None if seg is None else NeedleSegment(
            tuple(seg["endpoint_a"]), tuple(seg["endpoint_b"]))
        png = render_overlay(np.asarray(conv32, dtype=np.float64), detection)
        with open(os.path.join(overlay_dir,
                               f"frame_{frame['index']:05d}.png"),
                  "wb") as f:
            f.write(png)

    counts = {name: len(man.split(name)) for name in ("train", "val",
                                                      "test")}
    best_val = min(history["val_loss"], key=lambda p: p[1])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config_hash": man.config_hash,
        "counts": counts,
        "columns": list(COLUMNS),
        "snr": report["snr"],
        "mhd": report["mhd"],
        "snr_ratio_unet_vs_conventional":
            report["snr_ratio_unet_vs_conventional"],
        "mhd_ordering_fraction": report["mhd_ordering_fraction"],
        "detected_fraction": report["detected_fraction"],
        "train": {
            "iterations": cfg["train"]["iterations"],
            "final_train_loss": history["train_loss"][-1],
            "best_val_iteration": best_val[0],
            "best_val_mse": best_val[1],
        },
        "artifacts": {
            "manifest": "dataset/manifest.json",
            "weights": "weights.padf",
            "history": "history.json",
            "predictions": "pred",
            "detections": "detections.json",
            "metrics": "metrics.json",
            "overlays": "overlays",
        },
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    timings["total_s"] = round(time.monotonic() - t_all, 3)
    _write_json(os.path.join(out_dir, "timings.json"),
                {"schema_version": SCHEMA_VERSION, **timings})
    log(f"summary written to {os.path.join(out_dir, 'summary.json')}")
    return summary


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _derive(seed: int, *tags: int) -> int:
    ss = np.random.SeedSequence([int(seed), *map(int, tags)])
    return int(ss.generate_state(1, np.uint64)[0])


def _scene(ds: DatasetConfig, seed: int, rep: int, vessel_free: bool):
    """One needle pose composited onto one procedural background.

    vessel_free scenes drop both the vessels and the static acquisition
    noise so an injected per-frame noise term is the only corruption;
    that isolates the effect under study in the frame-averaging sweep.
    """
    table = pose_table(ds, seed)
    pose, mu_a = table[rep % len(table)]
    _, needle = simulate_needle(ds, pose, mu_a,
                                _derive(seed, _TAG_SWEEP_MC, rep))
    bg_cfg = replace(ds.background,
                     n_vessels=(0, 0) if vessel_free
                     else ds.background.n_vessels,
                     noise_std=0.0 if vessel_free
                     else ds.background.noise_std,
                     rng_seed=_derive(seed, _TAG_SWEEP_BG, rep))
    bg = gen_background_rf(bg_cfg, ds.grid, ds.medium, ds.array)
    p99 = float(np.percentile(np.abs(bg.samples), 99))
    target = ds.target_peak_factor * p99 if p99 > 0 else 1.0
    comp = composite_rf(needle, bg, target)
    gt = truth_segment({"entry_x": pose.entry_x,
                        "angle_deg": pose.angle_deg, "depth": pose.depth,
                        "diameter": pose.diameter, "gauge": pose.gauge},
                       ds.grid, ds.array, ds.medium,
                       row_min=visible_row_min(ds.array, ds.medium))
    if gt is None:
        raise RuntimeError(f"sweep scene {rep}: needle sits entirely above "
                           f"the acquirable depth band")
    return comp, gt, pose


def _sweep_averaging(cfg, seed, jobs, log):
    sw = cfg["sweep"]
    counts = [int(c) for c in sw["counts"]]
    repeats = sw["repeats"]
    ds = dataset_config(cfg["dataset"])

    def one_repeat(rep: int):
        comp, gt_seg, _ = _scene(ds, seed, rep, vessel_free=True)
        sigma = sw["noise_std"] * float(np.abs(comp.samples).max())
        rng = np.random.default_rng(_derive(seed, _TAG_SWEEP_NOISE, rep))
        noisy = [RfFrame(comp.samples
                         + rng.normal(0.0, sigma, comp.samples.shape),
                         ds.array) for _ in range(max(counts))]
        values = {}
        for n in counts:
            img = to_standard_image(
                fk_reconstruct(average_frames(noisy[:n]), ds.medium))
            values[n] = float(snr(img.values, gt_seg).snr)
        log(f"averaging sweep: scene {rep + 1}/{repeats} done")
        return values

    per_rep = _map_jobs(one_repeat, range(repeats), jobs)
    rows = []
    for n in counts:
        vals = [r[n] for r in per_rep]
        stats = _mean_std(vals)
        rows.append({"count": n, "snr_mean": stats["mean"],
                     "snr_std": stats["std"], "repeats": repeats})
    plot = {"x": [r["count"] for r in rows],
            "y": [r["snr_mean"] for r in rows],
            "s": [r["snr_std"] for r in rows],
            "xlabel": "averaged frames", "ylabel": "SNR",
            "title": "SNR vs frame averaging"}
    fields = ["count", "snr_mean", "snr_std", "repeats"]
    return rows, fields, plot


def _sweep_diameter(cfg, seed, jobs, log):
    sw = cfg["sweep"]
    gauges = list(sw["gauges"])
    repeats = sw["repeats"]
    det = cfg["detect"]

    def one(job):
        gauge, rep = job
        ds = replace(dataset_config(cfg["dataset"]), gauge=gauge)
        comp, gt_seg, _ = _scene(ds, seed, rep, vessel_free=False)
        img = to_standard_image(fk_reconstruct(comp, ds.medium)).values
        mask = binarize(img, alpha=det["alpha"])
        log(f"diameter sweep: {gauge} scene {rep + 1}/{repeats}")
        return (gauge, rep, float(snr(img, gt_seg).snr),
                float(mhd(_mask_points(mask),
                          segment_to_pointset(gt_seg, bounds=img.shape))))

    jobs_list = [(g, r) for g in gauges for r in range(repeats)]
    results = _map_jobs(one, jobs_list, jobs)
    rows = []
    for gauge in gauges:
        snrs = [s for g, _, s, _ in results if g == gauge]
        mhds = [m for g, _, _, m in results if g == gauge]
        s_stats, m_stats = _mean_std(snrs), _mean_std(mhds)
        rows.append({"gauge": gauge,
                     "diameter_m": GAUGE_DIAMETERS[gauge],
                     "snr_mean": s_stats["mean"], "snr_std": s_stats["std"],
                     "mhd_mean": m_stats["mean"], "mhd_std": m_stats["std"],
                     "repeats": repeats})
    plot = {"x": [r["diameter_m"] * 1e3 for r in rows],
            "y": [r["snr_mean"] for r in rows],
            "s": [r["snr_std"] for r in rows],
            "xlabel": "needle diameter (mm)", "ylabel": "SNR",
            "title": "SNR vs needle diameter"}
    fields = ["gauge", "diameter_m", "snr_mean", "snr_std", "mhd_mean",
              "mhd_std", "repeats"]
    return rows, fields, plot


def _test_mse(man, weights, size):
    entries = man.split("test")
    if not entries:
        raise ValueError("test split is empty")
    err = 0.0
    total = 0
    for e in entries:
        img, gt = load_pair(man, e)
        x = resize_bicubic(img, (size, size))
        top = x.max()
        if top > 0:
            x = x / top
        y = resize_bicubic(gt, (size, size))
        d = neural.forward(weights, x) - y
        err += float(np.sum(d * d))
        total += d.size
    return err / total


def _trained_point(man, cfg, seed, net_cfg, tcfg, infer_size, log):
    t0 = time.monotonic()
    weights, history = neural.train(man, net_cfg, tcfg, log=log)
    train_s = time.monotonic() - t0

    test_entries = man.split("test")
    preds = {}
    t0 = time.monotonic()
    for e in test_entries:
        hdr, img32 = read_container(man.path(e["image"]))
        image = PixelImage(np.asarray(img32, dtype=np.float64),
                           pixel_size=hdr.get("pixel_size_m",
                                              STANDARD_PIXEL))
        preds[e["index"]] = infer(weights, image, size=infer_size).values
    infer_s = (time.monotonic() - t0) / len(test_entries)

    det = cfg["detect"]
    report = evaluate_entries(man, preds, alpha=det["alpha"],
                              n_peaks=det["n_peaks"],
                              min_votes=det["min_votes"])
    snr_unet = report["snr"][COL_UNET]
    mhd_post = report["mhd"][COL_POST]
    return {
        "param_count": weights.param_count,
        "train_seconds": round(train_s, 3),
        "final_train_loss": history["train_loss"][-1],
        "test_mse": _test_mse(man, weights, tcfg.input_size),
        "infer_seconds_per_frame": round(infer_s, 4),
        "snr_mean": None if snr_unet is None else snr_unet["mean"],
        "mhd_mean": None if mhd_post is None else mhd_post["mean"],
    }


def _sweep_capacity(cfg, seed, jobs, log, out_dir):
    sw = cfg["sweep"]
    scales = [int(s) for s in sw["scales"]]
    size = cfg["train"]["input_size"]
    infer_size = cfg["detect"]["infer_size"]
    problems = []
    for s in scales:
        div = 2 ** (s - 1)
        if size % div:
            problems.append(f"sweep.scales: train.input_size {size} is not "
                            f"divisible by {div} ({s}-scale network)")
        if infer_size % div:
            problems.append(f"sweep.scales: detect.infer_size {infer_size} "
                            f"is not divisible by {div} ({s}-scale network)")
    if problems:
        raise ConfigError(problems)

    man = gen_dataset(dataset_config(cfg["dataset"]),
                      os.path.join(out_dir, "dataset"), seed=seed,
                      jobs=jobs, log=log)
    iters = sw["iterations"] or cfg["train"]["iterations"]
    rows = []
    for s in scales:
        log(f"capacity sweep: training {s}-scale model")
        net_cfg = NetworkConfig(n_scales=s,
                                base_channels=cfg["train"]["base_channels"])
        tcfg = replace(train_settings(cfg, seed), iterations=iters)
        point = _trained_point(man, cfg, seed, net_cfg, tcfg, infer_size,
                               log)
        rows.append({"n_scales": s, **point})
    plot = {"x": [r["n_scales"] for r in rows],
            "y": [r["test_mse"] for r in rows], "s": None,
            "xlabel": "encoder-decoder scales", "ylabel": "test MSE",
            "title": "capacity sweep"}
    fields = ["n_scales", "param_count", "train_seconds",
              "final_train_loss", "test_mse", "infer_seconds_per_frame",
              "snr_mean", "mhd_mean"]
    return rows, fields, plot


def _sweep_input_size(cfg, seed, jobs, log, out_dir):
    sw = cfg["sweep"]
    sizes = [int(s) for s in sw["input_sizes"]]
    n_scales = cfg["train"]["n_scales"]
    div = 2 ** (n_scales - 1)
    problems = [f"sweep.input_sizes: {s} is not divisible by {div} "
                f"({n_scales}-scale network)" for s in sizes if s % div]
    if problems:
        raise ConfigError(problems)

    man = gen_dataset(dataset_config(cfg["dataset"]),
                      os.path.join(out_dir, "dataset"), seed=seed,
                      jobs=jobs, log=log)
    iters = sw["iterations"] or cfg["train"]["iterations"]
    rows = []
    for size in sizes:
        log(f"input-size sweep: training at {size}x{size}")
        tcfg = replace(train_settings(cfg, seed), iterations=iters,
                       input_size=size)
        point = _trained_point(man, cfg, seed, network_config(cfg), tcfg,
                               size, log)
        rows.append({"input_size": size, **point})
    plot = {"x": [r["input_size"] for r in rows],
            "y": [r["test_mse"] for r in rows], "s": None,
            "xlabel": "input size (px)", "ylabel": "test MSE",
            "title": "input-size sweep"}
    fields = ["input_size", "param_count", "train_seconds",
              "final_train_loss", "test_mse", "infer_seconds_per_frame",
              "snr_mean", "mhd_mean"]
    return rows, fields, plot


def _map_jobs(fn, items, jobs):
    items = list(items)
    if jobs and jobs > 1 and len(items) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _write_csv(path, rows, fields) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(["" if row[k] is None else row[k]
                             for k in fields])


def _plot_rows(path, plot) -> None:
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    x = np.asarray(plot["x"], dtype=np.float64)
    y = np.asarray(plot["y"], dtype=np.float64)
    order = np.argsort(x)
    x, y = x[order], y[order]
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    ax.plot(x, y, marker="o", color="tab:blue")
    if plot["s"] is not None:
        s = np.asarray(plot["s"], dtype=np.float64)[order]
        ax.fill_between(x, y - s, y + s, color="tab:blue", alpha=0.25,
                        linewidth=0)
    ax.set_xlabel(plot["xlabel"])
    ax.set_ylabel(plot["ylabel"])
    ax.set_title(plot["title"])
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def sweep(kind: str, config: dict | None, out_dir, seed: int | None = None,
          jobs: int | None = None, log=None) -> list[dict]:
    """Run one parameter sweep; writes <kind>.csv, <kind>.json and
    <kind>.png under out_dir and returns the metric rows."""
    if kind not in SWEEP_KINDS:
        raise ConfigError([f"sweep kind: unknown kind {kind!r}; expected "
                           f"one of {', '.join(SWEEP_KINDS)}"])
    cfg = validate_config(config)
    seed = cfg["seed"] if seed is None else int(seed)
    jobs = cfg["jobs"] if jobs is None else int(jobs)
    log = log or LOG.info
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    if kind == "averaging":
        rows, fields, plot = _sweep_averaging(cfg, seed, jobs, log)
    elif kind == "diameter":
        rows, fields, plot = _sweep_diameter(cfg, seed, jobs, log)
    elif kind == "capacity":
        rows, fields, plot = _sweep_capacity(cfg, seed, jobs, log, out_dir)
    else:
        rows, fields, plot = _sweep_input_size(cfg, seed, jobs, log,
                                               out_dir)

    _write_csv(os.path.join(out_dir, f"{kind}.csv"), rows, fields)
    _write_json(os.path.join(out_dir, f"{kind}.json"), {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "seed": seed,
        "fields": fields,
        "rows": rows,
    })
    _plot_rows(os.path.join(out_dir, f"{kind}.png"), plot)
    log(f"{kind} sweep: {len(rows)} rows written to {out_dir}")
    return rows


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

def render_overlay(image, detection) -> bytes:
    """PNG bytes of the image in grayscale with the detection in green.

    detection may be None (base image passes through untouched), a
    NeedleSegment, a HoughLine (clipped to the frame first), or an iterable
    of either. Identical inputs produce identical bytes.
    """
    values = image.values if isinstance(image, PixelImage) \
        else np.asarray(image, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("overlay base must be a 2D image")
    peak = float(np.abs(values).max())
    gray = np.zeros(values.shape, dtype=np.uint8) if peak == 0 else \
        np.clip(np.abs(values) / peak * 255.0, 0.0, 255.0).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)

    if detection is None:
        items = []
    elif isinstance(detection, (NeedleSegment, HoughLine)):
        items = [detection]
    else:
        items = list(detection)
    for item in items:
        seg = line_to_segment(item, values.shape) \
            if isinstance(item, HoughLine) else item
        if seg is None:
            continue
        pts = segment_to_pointset(seg, bounds=values.shape)
        rgb[pts[:, 1], pts[:, 0]] = (0, 255, 0)

    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()
