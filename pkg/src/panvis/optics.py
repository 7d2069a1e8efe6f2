"""2D Monte Carlo light transport and needle geometry.

Photon packets are launched straight down from the illuminated strip of the
surface and random walk through homogeneous tissue with weight dropping:
at each interaction a packet deposits w * mu_a / mu_t in its cell, keeps the
rest, and scatters into a new direction drawn from the 2D analogue of the
Henyey-Greenstein phase function (a wrapped Cauchy in the deflection angle,
mean cosine g, sampled by the tan-half-angle inverse CDF). Low weight packets
enter Russian roulette. The needle is a perfect absorber: a packet whose
interaction point falls on a needle cell deposits its entire remaining weight
there and terminates. Those needle deposits are what the acoustic stage uses
as the initial pressure source.

Bookkeeping is exact: launched weight equals tissue deposits plus needle
deposits plus escaped weight plus the net roulette imbalance (killed minus
boosted), to float64 rounding. Tests hold the residual to 1e-9 relative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from panvis.core import Grid2D, ScalarField

# hypodermic needle outer diameters (metres) by gauge
GAUGE_DIAMETERS = {
    "16G": 1.65e-3,
    "18G": 1.27e-3,
    "20G": 0.91e-3,
    "25G": 0.52e-3,
    "30G": 0.31e-3,
}


@dataclass(frozen=True)
class OpticalProperties:
    """Homogeneous tissue optics in SI units (1/m)."""

    mu_a: float = 1500.0
    mu_s: float = 10000.0
    anisotropy: float = 0.9
    refractive_index: float = 1.4

    def __post_init__(self):
        if self.mu_a <= 0:
            raise ValueError("mu_a must be positive")
        if self.mu_s < 0:
            raise ValueError("mu_s must be non-negative")
        if not -1.0 < self.anisotropy < 1.0:
            raise ValueError("anisotropy must lie in (-1, 1)")
        if self.refractive_index < 1.0:
            raise ValueError("refractive index must be >= 1")

    @property
    def mu_t(self) -> float:
        return self.mu_a + self.mu_s


@dataclass(frozen=True)
class NeedlePose:
    """Straight needle inserted at the surface, angle measured from the surface.

    The shaft runs from (entry_x, 0) down to the tip at
    (entry_x + depth / tan(angle), depth); steeper angles give shorter
    lateral runs. Lengths in metres, angle in degrees.
    """

    entry_x: float
    angle_deg: float
    depth: float
    diameter: float = GAUGE_DIAMETERS["20G"]
    gauge: str | None = None

    def __post_init__(self):
        if not 0.0 < self.angle_deg <= 90.0:
            raise ValueError(f"insertion angle must be in (0, 90], got {self.angle_deg}")
        if self.depth <= 0:
            raise ValueError("tip depth must be positive")
        if self.diameter <= 0:
            raise ValueError("needle diameter must be positive")

    @classmethod
    def from_gauge(cls, entry_x: float, angle_deg: float, depth: float,
                   gauge: str) -> "NeedlePose":
        if gauge not in GAUGE_DIAMETERS:
            raise ValueError(f"unknown gauge {gauge!r}, "
                             f"expected one of {sorted(GAUGE_DIAMETERS)}")
        return cls(entry_x, angle_deg, depth, GAUGE_DIAMETERS[gauge], gauge)

    @property
    def tip(self) -> tuple[float, float]:
        a = np.deg2rad(self.angle_deg)
        run = self.depth * np.cos(a) / np.sin(a)
        return (self.entry_x + run, self.depth)


@dataclass(frozen=True)
class BeamConfig:
    """Uniform surface illumination strip; center_x None means grid centre."""

    width: float = 38.4e-3
    center_x: float | None = None

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("beam width must be positive")


@dataclass(frozen=True)
class McConfig:
    n_photons: int = 100_000
    seed: int = 0
    roulette_threshold: float = 1.0e-4
    roulette_survival: float = 0.1
    batch_size: int = 65_536
    max_iterations: int = 100_000

    def __post_init__(self):
        if self.n_photons < 1:
            raise ValueError("need at least one photon")
        if not 0.0 < self.roulette_survival < 1.0:
            raise ValueError("roulette survival must be in (0, 1)")
        if self.roulette_threshold <= 0:
            raise ValueError("roulette threshold must be positive")


@dataclass
class McResult:
    """Fluence plus the raw per-cell energy ledgers and the weight audit."""

    fluence: ScalarField
    tissue_energy: np.ndarray
    needle_energy: np.ndarray
    stats: dict


def rasterize_needle(pose: NeedlePose, grid: Grid2D) -> tuple[np.ndarray, tuple[float, float]]:
    """Boolean needle mask on the grid plus the exact tip position.

    A cell belongs to the needle when its centre lies within diameter / 2 of
    the entry-to-tip segment. Raises if the tip leaves the grid, reporting the
    overhang in each offending direction.
    """
    tip_x, tip_z = pose.tip
    # the entry point may sit outside the imaged region (clinically the
    # puncture site is often beyond the probe footprint); only the tip has
    # to land inside the grid
    problems = []
    if tip_x < 0.0:
        problems.append(f"tip overhangs left edge by {-tip_x * 1e3:.2f} mm")
    if tip_x > grid.extent_x:
        problems.append(f"tip overhangs right edge by {(tip_x - grid.extent_x) * 1e3:.2f} mm")
    if tip_z > grid.extent_z:
        problems.append(f"tip overhangs bottom edge by {(tip_z - grid.extent_z) * 1e3:.2f} mm")
    if problems:
        raise ValueError("needle does not fit the grid: " + "; ".join(problems))

    x = grid.x_coords()[None, :]
    z = grid.z_coords()[:, None]
    ex, ez = pose.entry_x, 0.0
    vx, vz = tip_x - ex, tip_z - ez
    seg_len2 = vx * vx + vz * vz
    # parametric foot of the perpendicular, clamped to the segment
    t = ((x - ex) * vx + (z - ez) * vz) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    dist2 = (x - (ex + t * vx)) ** 2 + (z - (ez + t * vz)) ** 2
    mask = dist2 <= (pose.diameter / 2.0) ** 2
    return mask, (tip_x, tip_z)


def _sample_deflection(g: float, u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the 2D Henyey-Greenstein analogue, angles in (-pi, pi]."""
    if g == 0.0:
        return np.pi * (2.0 * u - 1.0)
    return 2.0 * np.arctan((1.0 - g) / (1.0 + g) * np.tan(np.pi * (u - 0.5)))


def mc_fluence(grid: Grid2D, tissue: OpticalProperties, beam: BeamConfig,
               cfg: McConfig, needle_mask: np.ndarray | None = None) -> McResult:
    """Run the photon random walk and return fluence plus energy ledgers.

    The returned fluence holds phi = E_dep / (mu_a * dx^2) per launched photon
    on tissue cells. Needle cells are perfect absorbers with no finite mu_a,
    so there the map holds the areal deposit density E_dep / dx^2 per photon,
    which is the quantity the initial pressure source needs. Identical seed
    and config give a bitwise identical result.
    """
    if needle_mask is not None:
        needle_mask = np.asarray(needle_mask, dtype=bool)
        if needle_mask.shape != (grid.nz, grid.nx):
            raise ValueError("needle mask shape does not match grid")
        mask_flat = needle_mask.ravel()
    else:
        mask_flat = None

    mu_a, mu_s, mu_t = tissue.mu_a, tissue.mu_s, tissue.mu_t
    albedo = mu_s / mu_t
    center = beam.center_x if beam.center_x is not None else grid.extent_x / 2.0
    x_lo = center - beam.width / 2.0

    n_cells = grid.nz * grid.nx
    tissue_energy = np.zeros(n_cells, dtype=np.float64)
    needle_energy = np.zeros(n_cells, dtype=np.float64)
    escaped = 0.0
    roulette_net = 0.0  # killed weight minus weight added by survivor boosts
    capped = 0.0

    n_left = cfg.n_photons
    batch_idx = 0
    while n_left > 0:
        n = min(cfg.batch_size, n_left)
        n_left -= n
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(batch_idx,))))
        batch_idx += 1

        px = x_lo + beam.width * rng.random(n)
        pz = np.zeros(n)
        dx_ = np.zeros(n)
        dz_ = np.ones(n)
        w = np.ones(n)

        for _ in range(cfg.max_iterations):
            if px.size == 0:
                break
            step = -np.log1p(-rng.random(px.size)) / mu_t
            px = px + step * dx_
            pz = pz + step * dz_

            i = np.floor(pz / grid.dx + 0.5).astype(np.int64)
            j = np.floor(px / grid.dx + 0.5).astype(np.int64)
            inside = (pz >= 0.0) & (i >= 0) & (i < grid.nz) & (j >= 0) & (j < grid.nx)
            escaped += float(np.sum(w[~inside]))

            px, pz, dx_, dz_, w = (a[inside] for a in (px, pz, dx_, dz_, w))
            cell = i[inside] * grid.nx + j[inside]

            if mask_flat is not None:
                on_needle = mask_flat[cell]
                if np.any(on_needle):
                    needle_energy += np.bincount(cell[on_needle],
                                                 weights=w[on_needle],
                                                 minlength=n_cells)
                    keep = ~on_needle
                    px, pz, dx_, dz_, w, cell = (a[keep] for a in
                                                 (px, pz, dx_, dz_, w, cell))

            w_dep = w * (mu_a / mu_t)
            tissue_energy += np.bincount(cell, weights=w_dep, minlength=n_cells)
            w = w - w_dep  # exact ledger: deposit + remainder == old weight

            theta = _sample_deflection(tissue.anisotropy, rng.random(w.size))
            ct, st = np.cos(theta), np.sin(theta)
            dx_, dz_ = dx_ * ct - dz_ * st, dx_ * st + dz_ * ct

            small = w < cfg.roulette_threshold
            if np.any(small):
                u = rng.random(int(np.sum(small)))
                survive = u < cfg.roulette_survival
                w_small = w[small]
                roulette_net += float(np.sum(w_small[~survive]))
                boosted = w_small[survive] / cfg.roulette_survival
                roulette_net -= float(np.sum(boosted - w_small[survive]))
                w_new = w_small.copy()
                w_new[survive] = boosted
                w_new[~survive] = 0.0
                w[small] = w_new
            live = w > 0.0
            px, pz, dx_, dz_, w = (a[live] for a in (px, pz, dx_, dz_, w))
        else:
            capped += float(np.sum(w))

    tissue_energy = tissue_energy.reshape(grid.nz, grid.nx)
    needle_energy = needle_energy.reshape(grid.nz, grid.nx)

    area = grid.dx * grid.dx
    n_ph = float(cfg.n_photons)
    phi = tissue_energy / (mu_a * area * n_ph)
    phi = phi + needle_energy / (area * n_ph)

    stats = {
        "launched": n_ph,
        "tissue_deposited": float(tissue_energy.sum()),
        "needle_deposited": float(needle_energy.sum()),
        "escaped": escaped,
        "roulette_net": roulette_net,
        "capped": capped,
    }
    stats["audit_residual"] = (stats["launched"] - stats["tissue_deposited"]
                               - stats["needle_deposited"] - stats["escaped"]
                               - stats["roulette_net"] - stats["capped"])

    fluence = ScalarField(grid, phi, role="fluence")
    return McResult(fluence, tissue_energy, needle_energy, stats)


def build_p0(mc: McResult, needle_mask: np.ndarray) -> ScalarField:
    """Initial pressure source: optical energy absorbed by the needle.

    The Grueneisen factor and the per-photon pulse energy only rescale the
    whole map, so they are folded into an arbitrary unit of 1. Cells off the
    needle mask are exactly zero. Raises if nothing was absorbed (needle
    outside the illuminated region).
    """
    needle_mask = np.asarray(needle_mask, dtype=bool)
    grid = mc.fluence.grid
    if needle_mask.shape != (grid.nz, grid.nx):
        raise ValueError("needle mask shape does not match grid")
    p0 = np.where(needle_mask, mc.needle_energy, 0.0)
    if not np.any(p0 > 0):
        raise ValueError("no optical energy reached the needle; "
                         "check beam placement and pose")
    return ScalarField(grid, p0, role="initial_pressure")
