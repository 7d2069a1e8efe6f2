"""Needle extraction from enhanced images.

Two routes produce a line hypothesis from a nonnegative image: threshold +
maximum-contour selection + total-least-squares segment fitting, and a
standard line-space voting (Hough) baseline. The normal form used for
voting is r = x*sin(theta) + y*cos(theta) with the origin at the top-left
pixel, x running laterally (columns) and y with depth (rows); theta is in
degrees within [0, 180). That exact sin/cos assignment is load-bearing:
tests encode it and the axis-aligned examples only hold under it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HoughLine:
    """One voted line in normal form; r in pixels, theta in degrees."""

    r: float
    theta: float
    votes: int


@dataclass(frozen=True)
class NeedleSegment:
    """Fitted shaft segment; endpoint_a is the deep end (the tip side),
    endpoint_b the shallow end. Coordinates are (x, y) pixels."""

    endpoint_a: tuple
    endpoint_b: tuple

    def __post_init__(self):
        if tuple(self.endpoint_a) == tuple(self.endpoint_b):
            raise ValueError("segment endpoints must be distinct")


# ---------------------------------------------------------------------------
# thresholding
# ---------------------------------------------------------------------------

def _otsu_threshold(img: np.ndarray) -> float:
    flat = img.ravel()
    lo, hi = float(flat.min()), float(flat.max())
    hist, edges = np.histogram(flat, bins=256, range=(lo, hi))
    p = hist.astype(np.float64) / flat.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centers)
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (m0[-1] * w0 - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    # threshold sits just above the last bin of the dark class
    return float(edges[int(np.argmax(between)) + 1])


def binarize(image, method: str = "fraction_of_max", *,
             alpha: float = 0.2) -> np.ndarray:
    """Boolean mask of pixels at or above a threshold.

    fraction_of_max thresholds at alpha * max (an all-zero image gives an
    empty mask, not an error); otsu maximizes the between-class variance
    over a 256-bin histogram.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0:
        raise ValueError("image must be nonnegative")
    if method == "fraction_of_max":
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        top = img.max()
        if top == 0.0:
            return np.zeros(img.shape, dtype=bool)
        return img >= alpha * top
    if method == "otsu":
        if img.min() == img.max():
            return np.zeros(img.shape, dtype=bool)
        return img >= _otsu_threshold(img)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# maximum-contour post-processing
# ---------------------------------------------------------------------------

def _label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling by breadth-first flood, labels assigned in
    row-major discovery order (so smaller label = earlier top-left pixel)."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for i0 in range(h):
        row = mask[i0]
        for j0 in range(w):
            if not row[j0] or labels[i0, j0]:
                continue
            current += 1
            queue = deque([(i0, j0)])
            labels[i0, j0] = current
            while queue:
                i, j = queue.popleft()
                for di in (-1, 0, 1):
                    ii = i + di
                    if ii < 0 or ii >= h:
                        continue
                    for dj in (-1, 0, 1):
                        jj = j + dj
                        if jj < 0 or jj >= w:
                            continue
                        if mask[ii, jj] and not labels[ii, jj]:
                            labels[ii, jj] = current
                            queue.append((ii, jj))
    return labels, current


def max_contour_select(mask) -> np.ndarray:
    """Keep only the component with the most boundary pixels.

    A pixel is boundary when any 4-neighbor lies outside its component
    (other components, background, and the image border all count as
    outside). Ties keep the component whose top-left-most pixel comes
    first; an empty mask passes through as the no-contour result.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = _label_components(mask)
    if n == 0:
        return np.zeros(mask.shape, dtype=bool)
    padded = np.pad(labels, 1)
    core = padded[1:-1, 1:-1]
    boundary = (core > 0) & (
        (padded[:-2, 1:-1] != core) | (padded[2:, 1:-1] != core)
        | (padded[1:-1, :-2] != core) | (padded[1:-1, 2:] != core))
    counts = np.bincount(labels[boundary], minlength=n + 1)
    winner = int(np.argmax(counts[1:])) + 1  # first max = earliest label
    return labels == winner


# ---------------------------------------------------------------------------
# segment fitting
# ---------------------------------------------------------------------------

def fit_segment(mask) -> NeedleSegment:
    """Total-least-squares line through the mask pixel centers; the
    endpoints are the extreme projections of mask pixels onto that line."""
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if xs.size == 0:
        raise ValueError("empty mask has no segment")
    if xs.size == 1:
        raise ValueError("single-pixel mask is degenerate")
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    center = pts.mean(axis=0)
    dev = pts - center
    cov = dev.T @ dev / pts.shape[0]
    _, vecs = np.linalg.eigh(cov)
    direction = vecs[:, -1]
    t = dev @ direction
    if t.max() == t.min():
        raise ValueError("mask is degenerate along the fitted line")
    pa = center + t.max() * direction
    pb = center + t.min() * direction
    if (pa[1], pa[0]) < (pb[1], pb[0]):
        pa, pb = pb, pa
    return NeedleSegment((float(pa[0]), float(pa[1])),
                         (float(pb[0]), float(pb[1])))


# ---------------------------------------------------------------------------
# line-space voting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HoughAccumulator:
    """votes[i, j] counts hits for r_values[i], theta_values_deg[j]."""

    votes: np.ndarray
    r_values: np.ndarray
    theta_values_deg: np.ndarray
    r_res: float
    theta_res: float

    def r_index(self, r: float) -> int:
        return int(round((r - float(self.r_values[0])) / self.r_res))

    def theta_index(self, deg: float) -> int:
        return int(round(deg / self.theta_res))


def hough_accumulate(mask, r_res: float = 1.0,
                     theta_res: float = 1.0) -> HoughAccumulator:
    """Vote every set pixel into every theta bin at its rounded r bin."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    diag = int(np.ceil(np.hypot(h - 1, w - 1)))
    n_r = int(round(2 * diag / r_res)) + 1
    r_values = -diag + r_res * np.arange(n_r)
    thetas = np.arange(0.0, 180.0, theta_res)
    rad = np.deg2rad(thetas)
    ys, xs = np.nonzero(mask)
    votes = np.zeros((n_r, thetas.size), dtype=np.int64)
    if xs.size:
        r = xs[:, None] * np.sin(rad)[None, :] \
            + ys[:, None] * np.cos(rad)[None, :]
        idx = np.rint((r + diag) / r_res).astype(np.int64)
        flat = idx * thetas.size + np.arange(thetas.size)[None, :]
        votes = np.bincount(flat.ravel(), minlength=n_r * thetas.size)
        votes = votes.reshape(n_r, thetas.size)
    return HoughAccumulator(votes=votes, r_values=r_values,
                            theta_values_deg=thetas, r_res=float(r_res),
                            theta_res=float(theta_res))


def hough_peaks(acc: HoughAccumulator, n_peaks: int,
                min_votes: int = 1) -> list[HoughLine]:
    """Greedy maxima with 3x3 neighborhood suppression, strongest first;
    stops early once the remaining maximum drops below min_votes."""
    if n_peaks < 1:
        raise ValueError("n_peaks must be at least 1")
    work = acc.votes.copy()
    out = []
    for _ in range(n_peaks):
        k = int(np.argmax(work))
        val = int(work.flat[k])
        if val < min_votes:
            break
        ir, it = divmod(k, work.shape[1])
        out.append(HoughLine(r=float(acc.r_values[ir]),
                             theta=float(acc.theta_values_deg[it]),
                             votes=val))
        work[max(0, ir - 1):ir + 2, max(0, it - 1):it + 2] = 0
    return out


def line_to_segment(line: HoughLine, shape) -> NeedleSegment | None:
    """Clip the infinite line to the image rectangle; None when the line
    misses the frame (or only grazes a single point)."""
    h, w = shape
    th = np.deg2rad(line.theta)
    s, c = np.sin(th), np.cos(th)
    px, py = line.r * s, line.r * c    # foot of the normal
    dx, dy = c, -s                     # direction along the line
    t0, t1 = -np.inf, np.inf
    for p, d, hi in ((px, dx, w - 1.0), (py, dy, h - 1.0)):
        if abs(d) < 1e-12:
            if p < 0.0 or p > hi:
                return None
            continue
        ta, tb = (0.0 - p) / d, (hi - p) / d
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if not t0 < t1:
        return None
    a = (float(px + t1 * dx), float(py + t1 * dy))
    b = (float(px + t0 * dx), float(py + t0 * dy))
    if (a[1], a[0]) < (b[1], b[0]):
        a, b = b, a
    return NeedleSegment(a, b)
