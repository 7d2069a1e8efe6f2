"""Evaluation metrics: needle SNR, modified Hausdorff distance, and
per-sequence detection statistics.

Point sets are (N, 2) float arrays of (x, y) pixel coordinates. The
distance goes through a k-d tree for speed but is defined (and tested) as
exactly the brute-force double loop: directed d(A,B) = mean over a of the
nearest-neighbor distance, and the reported value is the larger of the two
directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .detect import NeedleSegment


def _as_points(p, name: str) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"point set {name} must have shape (N, 2)")
    if a.shape[0] == 0:
        raise ValueError(f"point set {name} is empty")
    return a


def mhd(a, b) -> float:
    """max(mean nearest-neighbor distance A->B, same B->A), in pixels."""
    pa = _as_points(a, "A")
    pb = _as_points(b, "B")
    d_ab = float(np.mean(cKDTree(pb).query(pa)[0]))
    d_ba = float(np.mean(cKDTree(pa).query(pb)[0]))
    return max(d_ab, d_ba)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def segment_to_pointset(segment: NeedleSegment,
                        bounds: tuple | None = None) -> np.ndarray:
    """Bresenham pixels of the segment as an (N, 2) int array of (x, y);
    with bounds = (rows, cols) points outside the frame are dropped."""
    x0 = int(round(segment.endpoint_b[0]))
    y0 = int(round(segment.endpoint_b[1]))
    x1 = int(round(segment.endpoint_a[0]))
    y1 = int(round(segment.endpoint_a[1]))
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        pts.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    out = np.array(pts, dtype=np.int64)
    if bounds is not None:
        rows, cols = bounds
        keep = ((out[:, 0] >= 0) & (out[:, 0] < cols)
                & (out[:, 1] >= 0) & (out[:, 1] < rows))
        out = out[keep]
    return out


# ---------------------------------------------------------------------------
# SNR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SnrReport:
    """s = mean amplitude on the shaft, sigma = std of the chosen flank
    rectangle (half-open (row0, row1, col0, col1))."""

    s: float
    sigma: float
    snr: float
    background_rect: tuple


def snr(image, segment: NeedleSegment, dilation: int = 3) -> SnrReport:
    """Shaft mean over the rasterized segment divided by the standard
    deviation of the largest rectangle flanking the dilated segment
    bounding box (candidates: full-width strips above and below, full
    height strips left and right; ties prefer that order)."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    for x, y in (segment.endpoint_a, segment.endpoint_b):
        if not (0 <= round(x) <= w - 1 and 0 <= round(y) <= h - 1):
            raise ValueError("segment endpoints must lie inside the image")
    pts = segment_to_pointset(segment)
    s = float(np.mean(img[pts[:, 1], pts[:, 0]]))

    r0 = max(0, int(pts[:, 1].min()) - dilation)
    r1 = min(h, int(pts[:, 1].max()) + dilation + 1)
    c0 = max(0, int(pts[:, 0].min()) - dilation)
    c1 = min(w, int(pts[:, 0].max()) + dilation + 1)
    flanks = (
        (0, r0, 0, w),       # above
        (r1, h, 0, w),       # below
        (0, h, 0, c0),       # left
        (0, h, c1, w),       # right
    )
    rect = max(flanks, key=lambda f: (f[1] - f[0]) * (f[3] - f[2]))
    region = img[rect[0]:rect[1], rect[2]:rect[3]]
    sigma = float(region.std()) if region.size else 0.0
    if sigma == 0.0:
        raise ValueError("undefined SNR: background rectangle is constant")
    return SnrReport(s=s, sigma=sigma, snr=s / sigma, background_rect=rect)


# ---------------------------------------------------------------------------
# sequence statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceStats:
    frames_with_needle: int
    frames_without: int
    missed: int
    true_positives: int
    false_positives: int
    tpr: float
    fpr: float


def sequence_stats(detections, labels) -> SequenceStats:
    """Frame-level counting: a truthy detection on a needle frame is a true
    positive, on a needle-free frame a false positive. Rates divide by the
    matching frame count (0.0 when that count is zero)."""
    if len(detections) != len(labels):
        raise ValueError(f"length mismatch: {len(detections)} detections "
                         f"vs {len(labels)} labels")
    tp = fp = missed = with_needle = 0
    for det, lab in zip(detections, labels):
        has = det is not None and bool(det)
        if lab:
            with_needle += 1
            if has:
                tp += 1
            else:
                missed += 1
        elif has:
            fp += 1
    without = len(labels) - with_needle
    return SequenceStats(
        frames_with_needle=with_needle,
        frames_without=without,
        missed=missed,
        true_positives=tp,
        false_positives=fp,
        tpr=tp / with_needle if with_needle else 0.0,
        fpr=fp / without if without else 0.0,
    )
