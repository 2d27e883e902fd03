"""Closed cubic splines with optional corners, and even-odd polygon filling."""
from __future__ import annotations

import logging

import numpy as np
from scipy.interpolate import CubicSpline

log = logging.getLogger(__name__)


def _dedupe(points: np.ndarray, corners: list[int]) -> tuple[np.ndarray, list[int]]:
    keep = [0]
    remap = {0: 0}
    for i in range(1, len(points)):
        if np.array_equal(points[i], points[keep[-1]]):
            remap[i] = len(keep) - 1
            continue
        remap[i] = len(keep)
        keep.append(i)
    if len(keep) > 1 and np.array_equal(points[keep[-1]], points[keep[0]]):
        remap = {k: (0 if v == len(keep) - 1 else v) for k, v in remap.items()}
        keep.pop()
    if len(keep) != len(points):
        log.warning("closed_cubic_spline: dropped %d duplicate consecutive point(s)",
                    len(points) - len(keep))
    return points[keep], sorted({remap[c] for c in corners})


def _chord_params(pts: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _sample(spline, t: np.ndarray, per_segment: int) -> np.ndarray:
    """Evaluate on ``per_segment`` points per knot interval, excluding the last knot."""
    u = np.linspace(0.0, 1.0, per_segment, endpoint=False)
    ts = (t[:-1, None] + (t[1:] - t[:-1])[:, None] * u[None, :]).ravel()
    return spline(ts)


def closed_cubic_spline(points, corner_indices=(), samples_per_segment: int = 8) -> np.ndarray:
    """Dense closed polyline through ``points`` (first vertex repeated at the end).

    Without corners this is a periodic cubic spline in chord-length parameter.
    Corners split the loop into independent pieces, each a cubic spline clamped
    to the chord direction of its first and last interval; a two-point piece is
    therefore a straight segment.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be [n, 2], got {pts.shape}")
    n0 = len(pts)
    corners = [int(c) for c in corner_indices]
    if any(c < 0 or c >= n0 for c in corners):
        raise ValueError(f"corner indices {corners} out of range for {n0} points")
    pts, corners = _dedupe(pts, corners)
    n = len(pts)
    if n < 3:
        raise ValueError(f"need at least 3 distinct points, got {n}")
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")

    if not corners:
        loop = np.vstack([pts, pts[:1]])
        t = _chord_params(loop)
        dense = _sample(CubicSpline(t, loop, bc_type="periodic"), t, samples_per_segment)
        return np.vstack([dense, dense[:1]])

    pieces = []
    ring = corners + [corners[0] + n]
    for a, b in zip(ring[:-1], ring[1:]):
        idx = [i % n for i in range(a, b + 1)]
        piece = pts[idx]
        t = _chord_params(piece)
        if len(piece) == 2:
            u = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
            pieces.append(piece[0] + u * (piece[1] - piece[0]))
            continue
        d0 = (piece[1] - piece[0]) / (t[1] - t[0])
        d1 = (piece[-1] - piece[-2]) / (t[-1] - t[-2])
        spline = CubicSpline(t, piece, bc_type=((1, d0), (1, d1)))
        pieces.append(_sample(spline, t, samples_per_segment))
    dense = np.vstack(pieces)
    return np.vstack([dense, dense[:1]])


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def fill_polygon(poly, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres; returns a bool ``[height, width]``."""
    poly = np.asarray(poly, dtype=np.float64)
    if not np.array_equal(poly[0], poly[-1]):
        poly = np.vstack([poly, poly[:1]])
    x0, y0 = poly[:-1, 0], poly[:-1, 1]
    x1, y1 = poly[1:, 0], poly[1:, 1]
    out = np.zeros((height, width), dtype=bool)
    xc = np.arange(width) + 0.5
    lo = max(int(np.floor(poly[:, 1].min())), 0)
    hi = min(int(np.ceil(poly[:, 1].max())), height)
    for row in range(lo, hi):
        yc = row + 0.5
        cross = (y0 <= yc) != (y1 <= yc)
        if not cross.any():
            continue
        xs = x0[cross] + (yc - y0[cross]) * (x1[cross] - x0[cross]) / (y1[cross] - y0[cross])
        xs.sort()
        # crossings strictly to the right of each pixel centre
        right = xs.size - np.searchsorted(xs, xc, side="right")
        out[row] = (right % 2) == 1
    return out
