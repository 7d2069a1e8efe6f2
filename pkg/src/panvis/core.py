"""Shared geometry, signal and image types for the photoacoustic needle pipeline.

Coordinate convention used throughout: x is lateral (along the probe face),
z is depth, increasing away from the probe. Cell (i, j) of a Grid2D has its
centre at (x, z) = (j * dx, i * dx), so row 0 lies in the transducer plane
and the linear array elements sit on that row. All lengths are in metres,
times in seconds, frequencies in Hz.

The on-disk container is a minimal binary format: a 4-byte magic, a version
byte, a little-endian uint32 header length, a UTF-8 JSON header and a
row-major float32 little-endian payload. It exists so every intermediate
product (fluence maps, RF frames, reconstructions, network weights) round
trips bit exactly between pipeline stages without pulling in HDF5.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PADF"
CONTAINER_VERSION = 1

FIELD_ROLES = ("fluence", "initial_pressure", "recon_image", "network_output")

DEFAULT_SOUND_SPEED = 1540.0  # m/s, soft tissue average


class ContainerError(Exception):
    """Base class for container read failures."""


class BadMagicError(ContainerError):
    """File does not start with the expected magic bytes."""


class HeaderMismatchError(ContainerError):
    """Header is malformed or inconsistent with the payload dimensions."""


class TruncatedPayloadError(ContainerError):
    """Payload is shorter than rows * cols float32 values."""


@dataclass(frozen=True)
class Grid2D:
    """Isotropic 2D simulation grid, nx lateral cells by nz depth cells."""

    nx: int = 400
    nz: int = 400
    dx: float = 0.1e-3

    def __post_init__(self):
        if self.nx < 2 or self.nz < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nz}x{self.nx}")
        if self.dx <= 0:
            raise ValueError(f"grid spacing must be positive, got {self.dx}")

    @property
    def extent_x(self) -> float:
        return self.nx * self.dx

    @property
    def extent_z(self) -> float:
        return self.nz * self.dx

    def x_coords(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    def z_coords(self) -> np.ndarray:
        return np.arange(self.nz) * self.dx


@dataclass(frozen=True)
class TransducerArray:
    """Linear receive array centred on the top edge of the simulation grid."""

    n_elements: int = 128
    pitch: float = 0.3e-3
    center_frequency: float = 7.0e6
    fractional_bandwidth: float = 0.809
    sample_rate: float = 40.0e6
    n_samples: int = 1024
    sound_speed: float = DEFAULT_SOUND_SPEED

    def __post_init__(self):
        if self.n_elements < 2:
            raise ValueError("array needs at least 2 elements")
        for name in ("pitch", "center_frequency", "fractional_bandwidth",
                     "sample_rate", "sound_speed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")

    @property
    def aperture(self) -> float:
        """Full aperture width, element count times pitch."""
        return self.n_elements * self.pitch

    @property
    def depth_range(self) -> float:
        """Depth swept by one full acquisition at c."""
        return self.n_samples / self.sample_rate * self.sound_speed

    def element_x(self, center_x: float = 0.0) -> np.ndarray:
        """Lateral element centre positions for an array centred at center_x."""
        idx = np.arange(self.n_elements) - (self.n_elements - 1) / 2.0
        return center_x + idx * self.pitch


@dataclass
class RfFrame:
    """One acquisition: samples has shape (n_samples, n_elements)."""

    samples: np.ndarray
    array: TransducerArray = field(default_factory=TransducerArray)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        expect = (self.array.n_samples, self.array.n_elements)
        if self.samples.shape != expect:
            raise ValueError(
                f"RF frame shape {self.samples.shape} does not match array "
                f"geometry {expect}")


@dataclass
class ScalarField:
    """A scalar quantity sampled on a Grid2D; values has shape (nz, nx)."""

    grid: Grid2D
    values: np.ndarray
    role: str = "fluence"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.nz, self.grid.nx):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid "
                f"({self.grid.nz}, {self.grid.nx})")
        if self.role not in FIELD_ROLES:
            raise ValueError(f"unknown field role {self.role!r}, "
                             f"expected one of {FIELD_ROLES}")
        if self.role in ("fluence", "initial_pressure") and np.any(self.values < 0):
            raise ValueError(f"{self.role} field must be non-negative")


@dataclass
class PixelImage:
    """Display-space image with square pixels (row 0 at the probe surface)."""

    values: np.ndarray
    pixel_size: float = 70.0e-6

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("image must be 2D")
        if self.pixel_size <= 0:
            raise ValueError("pixel size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def write_container(path, values: np.ndarray, role: str, *,
                    sample_rate_hz: float | None = None,
                    pixel_size_m: float | None = None,
                    extra: dict | None = None) -> None:
    """Write a 2D float array with its JSON header to `path`.

    The payload is cast to little-endian float32, row major. The header keeps
    whichever of sample_rate_hz / pixel_size_m applies to the role plus a
    free-form `extra` dict for provenance (seeds, config hashes, spacings).
    """
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("container payload must be 2D")
    header = {"role": str(role), "rows": int(values.shape[0]),
              "cols": int(values.shape[1])}
    if sample_rate_hz is not None:
        header["sample_rate_hz"] = float(sample_rate_hz)
    if pixel_size_m is not None:
        header["pixel_size_m"] = float(pixel_size_m)
    header["extra"] = extra if extra is not None else {}
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", CONTAINER_VERSION))
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(values.tobytes(order="C"))


def read_container(path) -> tuple[dict, np.ndarray]:
    """Read a container; returns (header dict, float32 array of shape rows x cols)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a {MAGIC.decode()} container")
    version = blob[4]
    if version != CONTAINER_VERSION:
        raise HeaderMismatchError(f"{path}: unsupported version {version}")
    (hdr_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hdr_len:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(blob[9:9 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderMismatchError(f"{path}: bad JSON header: {e}") from e
    for key in ("role", "rows", "cols"):
        if key not in header:
            raise HeaderMismatchError(f"{path}: header missing key {key!r}")
    rows, cols = int(header["rows"]), int(header["cols"])
    if rows <= 0 or cols <= 0:
        raise HeaderMismatchError(f"{path}: bad payload dims {rows}x{cols}")
    need = rows * cols * 4
    got = len(blob) - 9 - hdr_len
    if got < need:
        raise TruncatedPayloadError(
            f"{path}: payload has {got} bytes, need {need} for {rows}x{cols}")
    if got > need:
        raise HeaderMismatchError(
            f"{path}: payload has {got} bytes, header promises {need}")
    values = np.frombuffer(blob[9 + hdr_len:], dtype="<f4").reshape(rows, cols)
    return header, values


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _catmull_rom_weights(f: np.ndarray) -> np.ndarray:
    """Keys cubic (a = -0.5) tap weights for fractional offsets f in [0, 1).

    Returns shape (4, len(f)); taps are at offsets (-1, 0, 1, 2) - f from the
    sample point. Weights sum to 1 and reproduce linear ramps exactly.
    """
    a = -0.5
    x = np.stack([f + 1.0, f, 1.0 - f, 2.0 - f])
    ax = np.abs(x)
    w_near = (a + 2.0) * ax ** 3 - (a + 3.0) * ax ** 2 + 1.0
    w_far = a * (ax ** 3 - 5.0 * ax ** 2 + 8.0 * ax - 4.0)
    return np.where(ax <= 1.0, w_near, np.where(ax < 2.0, w_far, 0.0))


def _resample_axis0(values: np.ndarray, n_out: int) -> np.ndarray:
    n_in = values.shape[0]
    # pixel-centre alignment: output pixel k samples source coordinate
    # (k + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    w = _catmull_rom_weights(f)
    out = np.zeros((n_out,) + values.shape[1:], dtype=np.float64)
    for tap, off in enumerate((-1, 0, 1, 2)):
        idx = np.clip(i0 + off, 0, n_in - 1)  # clamp-to-edge padding
        out += w[tap][(...,) + (None,) * (values.ndim - 1)] * values[idx]
    return out


def resize_bicubic(values: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Separable bicubic resize with the Catmull-Rom kernel, edge clamped.

    Both target dimensions must be at least 4; below that the 4-tap stencil
    degenerates and results stop being meaningful.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("resize_bicubic expects a 2D array")
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if out_h < 4 or out_w < 4:
        raise ValueError(f"target dimensions must be >= 4, got {out_h}x{out_w}")
    out = _resample_axis0(values, out_h)
    out = _resample_axis0(out.T, out_w).T
    return out


def save_pgm(path, values: np.ndarray) -> None:
    """8-bit PGM export, max-normalised; a lossy sidecar for quick viewing."""
    v = np.asarray(values, dtype=np.float64)
    peak = np.max(np.abs(v))
    if peak > 0:
        v = v / peak
    img = np.clip(v * 255.0, 0.0, 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())
