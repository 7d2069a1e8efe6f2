"""RF preprocessing and Fourier-domain image formation.

The imaging geometry is one-way: a source at depth z rings the top-edge
array at t = z / c, so the raw frame already is a distorted depth map. The
migration step undoes the distortion in the wavenumber domain. A 2D FFT
turns the frame into D(f, kx); each propagating image component (kx, kz)
contributes at the temporal frequency f = c * sqrt(kx^2 + kz^2), so the
image spectrum is D resampled along f at that dispersion curve, scaled by
the mapping Jacobian c * kz / sqrt(kx^2 + kz^2). Only kz >= 0 is built
explicitly; the real-valued inverse transform supplies the conjugate half,
which is what the even-in-kz Jacobian of the full derivation produces.
Components above the temporal Nyquist (and the evanescent region
f < c |kx|, which the curve never reaches) are zero.

Both FFT axes are zero-padded to the next power of two at or above twice
the data extent; without the doubling the transform is circular and
shallow arrivals wrap into the deepest rows. Interpolation along the
dispersion curve is linear; on axis (kx = 0) the curve passes exactly
through the FFT bins, so the axial response is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from scipy.signal import hilbert

from panvis.acoustics import MediumConfig
from panvis.core import PixelImage, RfFrame, TransducerArray

# standard display grid: 70 um pixels, resampled then cropped. Row removal
# comes entirely off the top (shallow samples are zeroed anyway); column
# removal splits evenly between left and right.
STANDARD_SIZE = 512
STANDARD_PIXEL = 70.0e-6
PRE_CROP_ROWS = 565
PRE_CROP_COLS = 578
CROP_TOP = PRE_CROP_ROWS - STANDARD_SIZE
CROP_LEFT = (PRE_CROP_COLS - STANDARD_SIZE) // 2

DEFAULT_ZERO_SAMPLES = 150


@dataclass
class ReconImage:
    """Migrated image on the acquisition grid: rows c/fs apart, columns
    one element pitch apart, row 0 at the array surface."""

    values: np.ndarray
    dz: float
    dx: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("recon image must be 2D")
        if self.dz <= 0 or self.dx <= 0:
            raise ValueError("pixel spacings must be positive")


def zero_early_samples(frame: RfFrame,
                       n_zero: int = DEFAULT_ZERO_SAMPLES) -> RfFrame:
    """Blank the first n_zero samples of every channel (returns a copy).

    The shallow samples carry source ringdown and surface clutter; blanking
    them costs the first c * n_zero / fs of depth, which the standard-grid
    crop discards anyway.
    """
    n = frame.samples.shape[0]
    if not 0 <= n_zero < n:
        raise ValueError(f"n_zero must be in [0, {n}), got {n_zero}")
    out = frame.samples.copy()
    out[:n_zero] = 0.0
    return RfFrame(out, frame.array)


def average_frames(frames: list[RfFrame]) -> RfFrame:
    """Element-wise mean of repeated acquisitions (uncorrelated noise
    drops by sqrt of the frame count)."""
    if not frames:
        raise ValueError("cannot average an empty frame list")
    shape = frames[0].samples.shape
    for f in frames[1:]:
        if f.samples.shape != shape:
            raise ValueError(f"frame shape {f.samples.shape} does not match "
                             f"{shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for f in frames:
        acc += f.samples
    return RfFrame(acc / len(frames), frames[0].array)


def _next_pow2(n: int) -> int:
    return 1 << int(np.ceil(np.log2(n)))


def fk_migrate(frame: RfFrame, medium: MediumConfig) -> ReconImage:
    """Wavenumber-domain migration; returns the signed (pre-envelope) image.

    Linear in the RF data. Depth rows are spaced c / fs so an n-sample
    delay moves features exactly n rows deeper.
    """
    rf = frame.samples
    arr = frame.array
    c = medium.sound_speed
    nt, nx = rf.shape
    dz = c / arr.sample_rate

    # doubling before rounding up keeps the transform acyclic
    nt_pad = _next_pow2(2 * nt)
    nx_pad = _next_pow2(2 * nx)
    spec = sfft.fft(sfft.rfft(rf, n=nt_pad, axis=0), n=nx_pad, axis=1)
    n_f = spec.shape[0]

    u = sfft.fftfreq(nx_pad, arr.pitch)[None, :]        # lateral, cycles/m
    w = sfft.rfftfreq(nt_pad, dz)[:, None]              # depth, cycles/m
    kmag = np.hypot(u, w)
    f_target = c * kmag                                  # Hz
    df = arr.sample_rate / nt_pad

    pos = f_target / df
    i0 = np.floor(pos).astype(np.int64)
    valid = i0 <= n_f - 2
    i0c = np.minimum(i0, n_f - 2)
    frac = pos - i0c
    cols = np.arange(nx_pad)[None, :]
    gathered = spec[i0c, cols] * (1.0 - frac) + spec[i0c + 1, cols] * frac

    with np.errstate(invalid="ignore", divide="ignore"):
        jac = np.where(kmag > 0.0, c * w / np.maximum(kmag, 1e-300), 0.0)
    half = np.where(valid, gathered * jac, 0.0)

    img = sfft.irfft(sfft.ifft(half, axis=1), n=nt_pad, axis=0)
    return ReconImage(img[:nt, :nx], dz=dz, dx=arr.pitch)


def fk_reconstruct(frame: RfFrame, medium: MediumConfig) -> ReconImage:
    """Migrate and envelope-detect: nonnegative amplitude image."""
    mig = fk_migrate(frame, medium)
    if not np.any(mig.values):
        return ReconImage(np.zeros_like(mig.values), dz=mig.dz, dx=mig.dx)
    # zero-pad the analytic-signal FFT too, or shallow energy rings into
    # the deepest rows through its circular transform
    n = mig.values.shape[0]
    env = np.abs(hilbert(mig.values, N=_next_pow2(2 * n), axis=0)[:n])
    return ReconImage(env, dz=mig.dz, dx=mig.dx)


# ---------------------------------------------------------------------------
# standard display grid
# ---------------------------------------------------------------------------

def _axis_resample_linear(values: np.ndarray, n_out: int) -> np.ndarray:
    """Linear resampling along axis 0, pixel-centre convention, edge clamp."""
    n_in = values.shape[0]
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i0 = np.clip(i0, 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    t = np.where(src < 0, 0.0, np.where(src > n_in - 1, 1.0, t))
    return (values[i0].T * (1.0 - t) + values[i1].T * t).T


def resize_bilinear(values: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize to out_shape = (rows, cols)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a 2D array")
    out = _axis_resample_linear(values, out_shape[0])
    return _axis_resample_linear(out.T, out_shape[1]).T


def to_standard_image(recon: ReconImage) -> PixelImage:
    """Resample the acquisition-grid image onto the 512 x 512 / 70 um
    display grid: bilinear to 565 x 578, drop the top 53 rows and 33
    columns from each side."""
    pre = resize_bilinear(recon.values, (PRE_CROP_ROWS, PRE_CROP_COLS))
    out = pre[CROP_TOP:, CROP_LEFT:CROP_LEFT + STANDARD_SIZE]
    return PixelImage(out.copy(), pixel_size=STANDARD_PIXEL)


def physical_to_standard(x, z, array: TransducerArray,
                         medium: MediumConfig | None = None):
    """Map array-relative physical coordinates (x lateral from the array
    centre, z depth; metres) to fractional standard-image (row, col)."""
    c = medium.sound_speed if medium is not None else array.sound_speed
    dz = c / array.sample_rate
    src_row = np.asarray(z, dtype=np.float64) / dz
    src_col = np.asarray(x, dtype=np.float64) / array.pitch \
        + (array.n_elements - 1) / 2.0
    row = (src_row + 0.5) * (PRE_CROP_ROWS / array.n_samples) - 0.5 - CROP_TOP
    col = (src_col + 0.5) * (PRE_CROP_COLS / array.n_elements) - 0.5 - CROP_LEFT
    return row, col


def standard_to_physical(row, col, array: TransducerArray,
                         medium: MediumConfig | None = None):
    """Inverse of physical_to_standard."""
    c = medium.sound_speed if medium is not None else array.sound_speed
    dz = c / array.sample_rate
    row = np.asarray(row, dtype=np.float64) + CROP_TOP
    col = np.asarray(col, dtype=np.float64) + CROP_LEFT
    src_row = (row + 0.5) * (array.n_samples / PRE_CROP_ROWS) - 0.5
    src_col = (col + 0.5) * (array.n_elements / PRE_CROP_COLS) - 0.5
    z = src_row * dz
    x = (src_col - (array.n_elements - 1) / 2.0) * array.pitch
    return x, z
