"""Training-pair synthesis: needle simulations composited onto procedural
vascular backgrounds.

Each dataset entry is a needle acquisition (Monte Carlo light transport,
wave propagation, band-limiting) summed with an independently generated
background frame, reconstructed to the standard display grid, and paired
with the needle-only initial pressure map as the learning target. Needle
physics runs once per pose and is shared across entries; backgrounds are
fresh per entry. All randomness derives from (global seed, purpose tag,
index) so regeneration is byte-identical.

The backgrounds stand in for recorded in vivo frames, which need hardware
to acquire: random disk absorbers, some with a bright rim and dim lumen to
mimic larger arteries, plus white receiver noise, with the early samples
blanked the same way the rest of the pipeline blanks them. The generator
never sees the needle pose, so no ground truth can leak into it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from panvis.acoustics import (
    MediumConfig,
    SolverConfig,
    forward_chain,
    make_solver_config,
)
from panvis.core import (
    Grid2D,
    PixelImage,
    RfFrame,
    ScalarField,
    TransducerArray,
    read_container,
    write_container,
)
from panvis.optics import (
    BeamConfig,
    GAUGE_DIAMETERS,
    McConfig,
    NeedlePose,
    OpticalProperties,
    build_p0,
    mc_fluence,
    rasterize_needle,
)
from panvis.recon import (
    STANDARD_SIZE,
    STANDARD_PIXEL,
    fk_reconstruct,
    standard_to_physical,
    to_standard_image,
    zero_early_samples,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# purpose tags for per-item seed derivation
_SEED_POSE = 0
_SEED_MC = 1
_SEED_BACKGROUND = 2
_SEED_SPLIT = 3


@dataclass(frozen=True)
class BackgroundConfig:
    """Procedural vessel field: disk absorbers, optional two-layer rims."""

    n_vessels: tuple[int, int] = (2, 6)
    radius_range: tuple[float, float] = (0.5e-3, 2.0e-3)
    depth_range: tuple[float, float] = (5.0e-3, 30.0e-3)
    two_layer_prob: float = 0.35
    noise_std: float = 0.002
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_vessels[0] < 0 or self.n_vessels[1] < self.n_vessels[0]:
            raise ValueError("n_vessels must be a nondecreasing count range")
        for name in ("radius_range", "depth_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive nonempty range")
        if not 0.0 <= self.two_layer_prob <= 1.0:
            raise ValueError("two_layer_prob must be in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


@dataclass(frozen=True)
class DatasetConfig:
    """Everything gen_dataset needs; defaults follow the reference setup.

    The reference tissue absorption values (1.0, 1.5, 2.0 per mm) attenuate
    the beam to nothing within a few millimetres, which is fine for fluence
    maps but starves deep needle poses of photons. desk_config() switches
    to a water-bath regime where the full pose grid is reachable.
    """

    grid: Grid2D = field(default_factory=Grid2D)
    medium: MediumConfig = field(default_factory=MediumConfig)
    array: TransducerArray = field(default_factory=TransducerArray)
    beam: BeamConfig = field(default_factory=BeamConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    depths: tuple = (5e-3, 10e-3, 15e-3, 20e-3, 25e-3)
    angles_deg: tuple = (20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0,
                         60.0, 65.0)
    mu_a_values: tuple = (1000.0, 1500.0, 2000.0)
    mu_s: float = 10000.0
    anisotropy: float = 0.9
    gauge: str = "18G"
    n_photons: int = 100_000
    count: int = 2000
    # needle tips land in this central band (fractions of the lateral extent)
    tip_band: tuple[float, float] = (0.35, 0.65)
    target_peak_factor: float = 1.5
    precision: str = "float32"

    def __post_init__(self):
        if self.gauge not in GAUGE_DIAMETERS:
            raise ValueError(f"unknown gauge {self.gauge!r}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if not 0.0 <= self.tip_band[0] < self.tip_band[1] <= 1.0:
            raise ValueError("tip_band must be an increasing pair in [0, 1]")
        if self.target_peak_factor <= 0:
            raise ValueError("target_peak_factor must be positive")


def desk_config(count: int = 200) -> DatasetConfig:
    """Scaled-down configuration that runs end to end on one CPU core."""
    return DatasetConfig(
        grid=Grid2D(nx=200, nz=200, dx=0.2e-3),
        depths=(5e-3, 10e-3, 15e-3, 20e-3, 25e-3),
        angles_deg=(20.0, 35.0, 50.0, 65.0),
        mu_a_values=(1.0, 1.5, 2.0),
        mu_s=1000.0,
        n_photons=50_000,
        count=count,
    )


def _seed_for(seed: int, tag: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(tag), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def pose_table(cfg: DatasetConfig, seed: int) -> list[tuple[NeedlePose, float]]:
    """Enumerate the pose grid (depth x angle x mu_a) with seeded tip
    placement inside the central lateral band."""
    table = []
    k = 0
    for depth in cfg.depths:
        for angle in cfg.angles_deg:
            for mu_a in cfg.mu_a_values:
                rng = np.random.default_rng(_seed_for(seed, _SEED_POSE, k))
                lo, hi = cfg.tip_band
                tip_x = (lo + rng.random() * (hi - lo)) * cfg.grid.extent_x
                a = np.deg2rad(angle)
                entry_x = tip_x - depth * np.cos(a) / np.sin(a)
                pose = NeedlePose(entry_x=float(entry_x),
                                  angle_deg=float(angle), depth=float(depth),
                                  diameter=GAUGE_DIAMETERS[cfg.gauge],
                                  gauge=cfg.gauge)
                table.append((pose, float(mu_a)))
                k += 1
    return table


# ---------------------------------------------------------------------------
# per-entry pieces
# ---------------------------------------------------------------------------

def gen_background_rf(cfg: BackgroundConfig, grid: Grid2D,
                      medium: MediumConfig, array: TransducerArray,
                      solver: SolverConfig | None = None) -> RfFrame:
    """One synthetic background acquisition, deterministic per rng_seed."""
    rng = np.random.default_rng(cfg.rng_seed)
    n = int(rng.integers(cfg.n_vessels[0], cfg.n_vessels[1] + 1))

    p0 = np.zeros((grid.nz, grid.nx))
    xs = grid.x_coords()[None, :]
    zs = grid.z_coords()[:, None]
    for _ in range(n):
        cx = rng.uniform(0.05, 0.95) * grid.extent_x
        cz = rng.uniform(*cfg.depth_range)
        r = rng.uniform(*cfg.radius_range)
        amp = rng.uniform(0.5, 1.0)
        two_layer = rng.random() < cfg.two_layer_prob
        d2 = (xs - cx) ** 2 + (zs - cz) ** 2
        if two_layer:
            # bright wall around a dim lumen
            rim = (d2 <= r * r) & (d2 >= (0.7 * r) ** 2)
            lumen = d2 < (0.7 * r) ** 2
            p0[rim] = np.maximum(p0[rim], 1.6 * amp)
            p0[lumen] = np.maximum(p0[lumen], 0.35 * amp)
        else:
            disk = d2 <= r * r
            p0[disk] = np.maximum(p0[disk], amp)

    if not np.any(p0) and cfg.noise_std == 0.0:
        return RfFrame(np.zeros((array.n_samples, array.n_elements)), array)

    if solver is None:
        solver = make_solver_config(grid, medium, array, precision="float32")
    rf = forward_chain(ScalarField(grid, p0, role="initial_pressure"),
                       medium, array, solver)
    samples = rf.samples
    if cfg.noise_std > 0:
        samples = samples + rng.normal(0.0, cfg.noise_std, samples.shape)
    return zero_early_samples(RfFrame(samples, array))


def composite_rf(needle_rf: RfFrame, background_rf: RfFrame,
                 target_peak: float) -> RfFrame:
    """Scale the needle frame to a fixed peak amplitude and sum."""
    if needle_rf.samples.shape != background_rf.samples.shape:
        raise ValueError(
            f"frame shape {needle_rf.samples.shape} does not match "
            f"{background_rf.samples.shape}")
    if target_peak <= 0:
        raise ValueError("target_peak must be positive")
    peak = np.abs(needle_rf.samples).max()
    if peak == 0.0:
        raise ValueError("needle RF is identically zero; nothing to scale")
    scaled = needle_rf.samples * (target_peak / peak)
    return RfFrame(scaled + background_rf.samples, needle_rf.array)


def make_ground_truth(p0: ScalarField, array: TransducerArray,
                      medium: MediumConfig | None = None) -> PixelImage:
    """Resample a needle-only initial pressure map onto the standard
    display grid and normalize its peak to 1.

    Uses the same standard-grid mapping as to_standard_image, so target and
    reconstructed input are spatially registered by construction. Pixels
    whose physical position falls outside the simulation grid are zero.
    """
    if not np.any(p0.values):
        raise ValueError("initial pressure map is identically zero")
    grid = p0.grid
    idx = np.arange(STANDARD_SIZE, dtype=np.float64)
    x_rel, _ = standard_to_physical(np.zeros(1), idx, array, medium)
    _, z = standard_to_physical(idx, np.zeros(1), array, medium)

    # fractional grid coordinates of each standard pixel centre
    gz = z / grid.dx
    gx = (x_rel + grid.extent_x / 2.0) / grid.dx

    def axis_weights(pos, n):
        i0 = np.floor(pos).astype(np.int64)
        t = pos - i0
        inside = (pos >= 0.0) & (pos <= n - 1)
        i0c = np.clip(i0, 0, n - 2)
        return i0c, t, inside

    iz, tz, okz = axis_weights(gz, grid.nz)
    ix, tx, okx = axis_weights(gx, grid.nx)
    v = p0.values
    rows = (v[iz] * (1.0 - tz)[:, None] + v[iz + 1] * tz[:, None])
    out = (rows[:, ix] * (1.0 - tx)[None, :] + rows[:, ix + 1] * tx[None, :])
    out *= okz[:, None] * okx[None, :]

    top = out.max()
    if top == 0.0:
        raise ValueError("needle is not visible inside the standard frame")
    return PixelImage(out / top, pixel_size=STANDARD_PIXEL)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Index of one generated dataset; paths are relative to its directory."""

    seed: int
    config_hash: str
    entries: list
    base_dir: str = "."
    # geometry and generation settings as stored in manifest.json, kept so
    # downstream stages can rebuild Grid2D / TransducerArray / MediumConfig
    config: dict | None = None

    def split(self, name: str) -> list:
        return [e for e in self.entries if e["split"] == name]

    def path(self, rel: str) -> str:
        import os
        return os.path.join(self.base_dir, rel)


def _config_record(cfg: DatasetConfig) -> dict:
    g, a, b, bg = cfg.grid, cfg.array, cfg.beam, cfg.background
    return {
        "grid": {"nx": g.nx, "nz": g.nz, "dx": g.dx},
        "medium": {"sound_speed": cfg.medium.sound_speed,
                   "density": cfg.medium.density},
        "array": {"n_elements": a.n_elements, "pitch": a.pitch,
                  "center_frequency": a.center_frequency,
                  "fractional_bandwidth": a.fractional_bandwidth,
                  "sample_rate": a.sample_rate, "n_samples": a.n_samples,
                  "sound_speed": a.sound_speed},
        "beam": {"width": b.width, "center_x": b.center_x},
        "background": {"n_vessels": list(bg.n_vessels),
                       "radius_range": list(bg.radius_range),
                       "depth_range": list(bg.depth_range),
                       "two_layer_prob": bg.two_layer_prob,
                       "noise_std": bg.noise_std},
        "depths": list(cfg.depths),
        "angles_deg": list(cfg.angles_deg),
        "mu_a_values": list(cfg.mu_a_values),
        "mu_s": cfg.mu_s,
        "anisotropy": cfg.anisotropy,
        "gauge": cfg.gauge,
        "n_photons": cfg.n_photons,
        "count": cfg.count,
        "tip_band": list(cfg.tip_band),
        "target_peak_factor": cfg.target_peak_factor,
        "precision": cfg.precision,
    }


def config_hash(cfg: DatasetConfig) -> str:
    blob = json.dumps(_config_record(cfg), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _manifest_dict(man: DatasetManifest, cfg: DatasetConfig) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "seed": man.seed,
        "config_hash": man.config_hash,
        "config": _config_record(cfg),
        "flags": {"procedural_backgrounds": True},
        "entries": man.entries,
    }


def save_manifest(man: DatasetManifest, cfg: DatasetConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_manifest_dict(man, cfg), f, sort_keys=True, indent=1)
        f.write("\n")


def load_manifest(path) -> DatasetManifest:
    import os
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')}")
    man = DatasetManifest(seed=doc["seed"], config_hash=doc["config_hash"],
                          entries=doc["entries"],
                          base_dir=os.path.dirname(os.path.abspath(path)),
                          config=doc.get("config"))
    counts = {"train": 0, "val": 0, "test": 0}
    for e in man.entries:
        if e["split"] not in counts:
            raise ValueError(f"unknown split {e['split']!r}")
        counts[e["split"]] += 1
        for key in ("needle_rf", "background_rf", "image", "truth"):
            if not os.path.exists(man.path(e[key])):
                raise FileNotFoundError(f"manifest references missing file "
                                        f"{e[key]}")
    n = len(man.entries)
    hold = n // 10
    if n >= 10 and (abs(counts["test"] - hold) > 1
                    or abs(counts["val"] - hold) > 1):
        raise ValueError(f"split sizes {counts} stray from 8:1:1")
    return man


def assign_splits(count: int, seed: int) -> list[str]:
    """Seeded 8:1:1 partition; hold-out sizes are count // 10 each."""
    order = np.random.default_rng(
        _seed_for(seed, _SEED_SPLIT, 0)).permutation(count)
    hold = count // 10
    labels = np.empty(count, dtype=object)
    labels[order[:hold]] = "test"
    labels[order[hold:2 * hold]] = "val"
    labels[order[2 * hold:]] = "train"
    return list(labels)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _pose_record(pose: NeedlePose) -> dict:
    return {"entry_x": pose.entry_x, "angle_deg": pose.angle_deg,
            "depth": pose.depth, "diameter": pose.diameter,
            "gauge": pose.gauge}


def pose_from_record(rec: dict) -> NeedlePose:
    return NeedlePose(entry_x=rec["entry_x"], angle_deg=rec["angle_deg"],
                      depth=rec["depth"], diameter=rec["diameter"],
                      gauge=rec.get("gauge"))


def simulate_needle(cfg: DatasetConfig, pose: NeedlePose, mu_a: float,
                    mc_seed: int,
                    solver: SolverConfig | None = None
                    ) -> tuple[ScalarField, RfFrame]:
    """Light transport + acoustics for one pose; returns (p0, zeroed RF)."""
    tissue = OpticalProperties(mu_a=mu_a, mu_s=cfg.mu_s,
                               anisotropy=cfg.anisotropy)
    mask, _ = rasterize_needle(pose, cfg.grid)
    mc = mc_fluence(cfg.grid, tissue, cfg.beam,
                    McConfig(n_photons=cfg.n_photons, seed=mc_seed),
                    needle_mask=mask)
    p0 = build_p0(mc, mask)
    if solver is None:
        solver = make_solver_config(cfg.grid, cfg.medium, cfg.array,
                                    precision=cfg.precision)
    rf = zero_early_samples(forward_chain(p0, cfg.medium, cfg.array, solver))
    return p0, rf


def gen_dataset(cfg: DatasetConfig, out_dir, seed: int = 0,
                count: int | None = None, jobs: int = 1,
                log=None) -> DatasetManifest:
    """Generate `count` composite entries plus manifest under out_dir.

    Needle simulations run once per pose and are shared by every entry that
    reuses the pose (entry i draws pose i mod n_poses). Background draws,
    MC seeds, and the split shuffle all derive from the global seed, so a
    rerun reproduces every byte.
    """
    import os

    count = cfg.count if count is None else count
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("needle", "background", "image", "truth"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    table = pose_table(cfg, seed)
    solver = make_solver_config(cfg.grid, cfg.medium, cfg.array,
                                precision=cfg.precision)
    used_poses = sorted({i % len(table) for i in range(count)})

    needle_cache: dict[int, RfFrame] = {}
    for k in used_poses:
        pose, mu_a = table[k]
        if log:
            log(f"needle sim {k + 1}/{len(table)}: depth "
                f"{pose.depth * 1e3:.0f} mm, {pose.angle_deg:.0f} deg, "
                f"mu_a {mu_a:g}")
        p0, rf = simulate_needle(cfg, pose, mu_a,
                                 _seed_for(seed, _SEED_MC, k), solver)
        # everything downstream works from container (float32) precision so
        # the stored artifacts regenerate bit-exactly from each other
        needle_cache[k] = RfFrame(
            rf.samples.astype(np.float32).astype(np.float64), cfg.array)
        rel_rf = f"needle/pose_{k:04d}.padf"
        rel_gt = f"truth/gt_{k:04d}.padf"
        write_container(os.path.join(out_dir, rel_rf), rf.samples,
                        role="rf_frame",
                        sample_rate_hz=cfg.array.sample_rate,
                        extra={"pose": _pose_record(pose), "mu_a": mu_a,
                               "pose_index": k})
        gt = make_ground_truth(p0, cfg.array, cfg.medium)
        write_container(os.path.join(out_dir, rel_gt), gt.values,
                        role="ground_truth", pixel_size_m=gt.pixel_size,
                        extra={"pose_index": k})

    def build_entry(i: int) -> dict:
        k = i % len(table)
        pose, mu_a = table[k]
        needle_rf = needle_cache[k]
        bg_cfg = replace(cfg.background,
                         rng_seed=_seed_for(seed, _SEED_BACKGROUND, i))
        bg = gen_background_rf(bg_cfg, cfg.grid, cfg.medium, cfg.array,
                               solver)
        bg = RfFrame(bg.samples.astype(np.float32).astype(np.float64),
                     cfg.array)
        p99 = float(np.percentile(np.abs(bg.samples), 99))
        target = cfg.target_peak_factor * p99 if p99 > 0 else 1.0
        comp = composite_rf(needle_rf, bg, target)
        img = to_standard_image(fk_reconstruct(comp, cfg.medium))

        rel_bg = f"background/bg_{i:05d}.padf"
        rel_img = f"image/img_{i:05d}.padf"
        write_container(os.path.join(out_dir, rel_bg), bg.samples,
                        role="rf_frame",
                        sample_rate_hz=cfg.array.sample_rate,
                        extra={"background_seed": bg_cfg.rng_seed})
        write_container(os.path.join(out_dir, rel_img), img.values,
                        role="recon_image", pixel_size_m=img.pixel_size,
                        extra={"target_peak": target})
        return {"index": i, "pose_index": k, "pose": _pose_record(pose),
                "mu_a": mu_a, "target_peak": target,
                "needle_rf": f"needle/pose_{k:04d}.padf",
                "background_rf": rel_bg, "image": rel_img,
                "truth": f"truth/gt_{k:04d}.padf"}

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(build_entry, range(count)))
    else:
        entries = []
        for i in range(count):
            if log and (i % 20 == 0):
                log(f"entry {i + 1}/{count}")
            entries.append(build_entry(i))

    splits = assign_splits(count, seed)
    for e, s in zip(entries, splits):
        e["split"] = s

    man = DatasetManifest(seed=seed, config_hash=config_hash(cfg),
                          entries=entries, base_dir=str(out_dir),
                          config=_config_record(cfg))
    save_manifest(man, cfg, os.path.join(out_dir, MANIFEST_NAME))
    return man


def load_pair(man: DatasetManifest, entry: dict) -> tuple[np.ndarray, np.ndarray]:
    """(input image, ground truth) arrays for one manifest entry."""
    _, img = read_container(man.path(entry["image"]))
    _, gt = read_container(man.path(entry["truth"]))
    return np.asarray(img, dtype=np.float64), np.asarray(gt, dtype=np.float64)
