"""ROI metrics and mask <-> spline-contour conversion.

Coordinates: a contour handle is ``(x, y) = (column, row)`` with pixel
centres at integer positions, so pixel ``(r, c)`` covers
``[c - 0.5, c + 0.5) x [r - 0.5, r + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from shapely.geometry import LinearRing

from .errors import DegenerateRegion, EmptyInputError, ShapeError, TopologyError

SUPERSAMPLE = 8


@dataclass
class BinaryMask:
    mask: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    slice_thickness: float = 1.0

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or 0 in self.mask.shape:
            raise ShapeError("mask must be a non-empty 2D raster")


def _array(m) -> np.ndarray:
    return m.mask if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)


# --- overlap metrics ----------------------------------------------------------


def dsc(a, b) -> float:
    """Dice similarity ``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def global_dsc(per_roi: Iterable[tuple[float, float]]) -> float:
    """Mean of per-ROI scores weighted by refined voxel count."""
    pairs = [(float(d), float(n)) for d, n in per_roi]
    if any(n < 0 for _, n in pairs):
        raise ValueError("voxel counts must be non-negative")
    total = sum(n for _, n in pairs)
    if total == 0:
        raise EmptyInputError("all ROI voxel counts are zero")
    return sum(d * n for d, n in pairs) / total


def per_roi_dsc(auto: np.ndarray, refined: np.ndarray, slices: Iterable[int], n_classes: int):
    """``(dsc, refined_count)`` for every foreground class on every listed slice."""
    out = []
    for s in slices:
        a_s, r_s = auto[s], refined[s]
        for c in range(1, n_classes):
            r = r_s == c
            out.append((dsc(a_s == c, r), int(r.sum())))
    return out


def labelmap_dsc(auto: np.ndarray, refined: np.ndarray, slices: Iterable[int], n_classes: int) -> float:
    return global_dsc(per_roi_dsc(auto, refined, slices, n_classes))


# --- voxel statistics ---------------------------------------------------------


@dataclass(frozen=True)
class RoiStats:
    voxel_count: int
    mean_intensity: float
    volume: float

    @property
    def mean_defined(self) -> bool:
        return self.voxel_count > 0


def roi_statistics(mask, intensities, pixel_spacing=None, slice_thickness=None) -> RoiStats:
    m = _array(mask)
    img = np.asarray(intensities)
    if m.shape != img.shape:
        raise ShapeError(f"mask {m.shape} does not match image {img.shape}")
    if isinstance(mask, BinaryMask):
        pixel_spacing = pixel_spacing or mask.pixel_spacing
        slice_thickness = slice_thickness or mask.slice_thickness
    sy, sx = pixel_spacing or (1.0, 1.0)
    dz = 1.0 if slice_thickness is None else slice_thickness
    n = int(m.sum())
    mean = float(img[m].astype(np.float64).mean()) if n else math.nan
    return RoiStats(n, mean, n * sy * sx * dz)


# --- spline contours -----------------------------------------------------------


@dataclass
class SplineContour:
    """Closed uniform Catmull-Rom spline through ``handles`` (``[n, 2]`` x/y)."""

    handles: np.ndarray
    fit_dsc: float | None = None

    def __post_init__(self) -> None:
        self.handles = np.asarray(self.handles, dtype=np.float64).reshape(-1, 2)
        if len(self.handles) < 3:
            raise DegenerateRegion("a closed contour needs at least 3 handles")

    def sample(self, spacing: float = 0.05) -> np.ndarray:
        """Dense closed polyline, consecutive points at most ``spacing`` px apart."""
        return _sample_catmull_rom(self.handles, spacing)


def _sample_catmull_rom(p: np.ndarray, spacing: float) -> np.ndarray:
    n = len(p)
    p0, p1 = np.roll(p, 1, axis=0), p
    p2 = np.roll(p, -1, axis=0)
    p3 = np.roll(p, -2, axis=0)
    # the Bezier hodograph's control points bound the curve speed, so
    # 3 * (longest control leg) * dt bounds the gap between samples
    b1 = p1 + (p2 - p0) / 6.0
    b2 = p2 - (p3 - p1) / 6.0
    legs = np.stack(
        [np.linalg.norm(b1 - p1, axis=1), np.linalg.norm(b2 - b1, axis=1), np.linalg.norm(p2 - b2, axis=1)]
    )
    speed = 3.0 * legs.max(axis=0)
    pieces = []
    for i in range(n):
        k = max(2, int(math.ceil(speed[i] / spacing)))
        t = np.linspace(0.0, 1.0, k, endpoint=False)[:, None]
        a, b, c, d = p0[i], p1[i], p2[i], p3[i]
        pieces.append(
            0.5
            * (
                2 * b
                + (c - a) * t
                + (2 * a - 5 * b + 4 * c - d) * t**2
                + (3 * b - a - 3 * c + d) * t**3
            )
        )
    return np.concatenate(pieces)


def _is_simple(poly: np.ndarray) -> bool:
    return LinearRing(poly).is_simple


def contour_to_mask(contour: SplineContour, dims: tuple[int, int], pixel_spacing=(1.0, 1.0), *, check_topology: bool = True) -> BinaryMask:
    """Rasterise the closed spline and connectivity-fill its interior.

    The curve is drawn on an 8x supersampled grid (8-connected trace), the
    enclosed 4-connected regions are filled, and a pixel is set when the
    subcell containing its centre is inside or on the curve.
    """
    h, w = dims
    pts = contour.sample(spacing=0.5 / SUPERSAMPLE)
    if check_topology and not _is_simple(pts):
        raise TopologyError("contour self-intersects")
    sub = np.floor((pts + 0.5) * SUPERSAMPLE).astype(np.int64)  # (x, y) subcell indices
    x0, y0 = sub.min(axis=0) - 2
    x1, y1 = sub.max(axis=0) + 3
    canvas = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    canvas[sub[:, 1] - y0, sub[:, 0] - x0] = True
    filled = ndimage.binary_fill_holes(canvas)
    out = np.zeros((h, w), dtype=bool)
    rows = np.arange(h) * SUPERSAMPLE + SUPERSAMPLE // 2 - y0
    cols = np.arange(w) * SUPERSAMPLE + SUPERSAMPLE // 2 - x0
    rv = (rows >= 0) & (rows < canvas.shape[0])
    cv = (cols >= 0) & (cols < canvas.shape[1])
    if rv.any() and cv.any():
        out[np.ix_(rv, cv)] = filled[np.ix_(rows[rv], cols[cv])]
    return BinaryMask(out, tuple(pixel_spacing))


def trace_boundary(mask: np.ndarray) -> list[tuple[int, int]]:
    """Moore-neighbour trace of the first (raster-order) foreground component."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    rows, cols = np.nonzero(m)
    if len(rows) == 0:
        return []
    start = (int(rows[0]), int(cols[0]))
    ring = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
    cur, back = start, 0  # entered from the west
    seen = {(cur, back)}
    path = [cur]
    while True:
        for k in range(1, 9):
            d = (back + k) % 8
            nb = (cur[0] + ring[d][0], cur[1] + ring[d][1])
            if m[nb]:
                prev = ring[(back + k - 1) % 8]
                prev = (cur[0] + prev[0] - nb[0], cur[1] + prev[1] - nb[1])
                cur, back = nb, ring.index(prev)
                break
        else:
            break  # isolated pixel
        if (cur, back) in seen:
            break
        seen.add((cur, back))
        path.append(cur)
    if len(path) > 1 and path[-1] == start:
        path.pop()
    return [(r - 1, c - 1) for r, c in path]


def _seed_handles(boundary: Sequence[tuple[int, int]], n: int) -> np.ndarray:
    pts = np.array([(c, r) for r, c in boundary], dtype=np.float64)
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(n) * arc[-1] / n
    x = np.interp(targets, arc, closed[:, 0])
    y = np.interp(targets, arc, closed[:, 1])
    return np.stack([x, y], axis=1)


def mask_to_contour(mask, n_handles: int = 16, tol: float = 1.0, max_iter: int = 100) -> SplineContour:
    """Fit a closed spline whose rendering reproduces ``mask``.

    Handles start equally spaced along the traced boundary; coordinate descent
    then moves one handle coordinate at a time by the current step (1 px, then
    0.5 px) while that lowers the symmetric difference to the mask. A sweep
    that gains less than ``tol`` pixels halves the step; after the 0.5 px
    step stalls, no single +-0.5 px move improves the rendering.
    """
    m = _array(mask)
    lab, ncomp = ndimage.label(m)
    if ncomp != 1 or m.sum() < 5:
        raise DegenerateRegion(f"need one 4-connected region of >= 5 px (got {ncomp} components, {int(m.sum())} px)")
    if n_handles < 3:
        raise ValueError("n_handles must be >= 3")
    handles = _seed_handles(trace_boundary(m), n_handles)

    def cost(hs: np.ndarray) -> float:
        try:
            r = contour_to_mask(SplineContour(hs), m.shape).mask
        except TopologyError:
            return math.inf
        return float(np.count_nonzero(r ^ m))

    best = cost(handles)
    step = 1.0
    for _ in range(max_iter):
        gained = 0.0
        for i in range(n_handles):
            for axis in (0, 1):
                for sign in (1.0, -1.0):
                    trial = handles.copy()
                    trial[i, axis] += sign * step
                    c = cost(trial)
                    if c < best:
                        gained += best - c
                        handles, best = trial, c
                        break
        if gained < tol:
            if step <= 0.5:
                break
            step /= 2
    fitted = contour_to_mask(SplineContour(handles), m.shape, check_topology=False).mask
    return SplineContour(handles, fit_dsc=dsc(fitted, m))
