"""Dense label/mask primitives and geometric reductions on the pixel grid.

Coordinates follow the image convention: a pixel at row ``y`` and column ``x``
has its center at the point ``(x, y)``.  Polygons are arrays of ``(x, y)``
vertices in that frame.  Binary masks are plain ``bool`` arrays of shape
``(height, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, EmptyMaskError

__all__ = [
    "InstanceMap",
    "RotatedRect",
    "connected_components",
    "bounding_box",
    "convex_hull",
    "min_area_rect",
    "rasterize_polygon",
    "polygon_area",
    "point_in_polygon",
]

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass
class InstanceMap:
    """Per-pixel instance ids (0 = background) plus an id -> class table."""

    labels: np.ndarray
    classes: dict[int, int]
    depth_order: Optional[dict[int, int]] = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ContractError(f"labels must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ContractError(f"labels must be integer, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ContractError("labels must be non-negative")
        self.labels = labels.astype(np.int32, copy=False)
        self.classes = {int(k): int(v) for k, v in self.classes.items()}
        missing = set(self.instance_ids()) - set(self.classes)
        if missing:
            raise ContractError(f"instance ids without class entry: {sorted(missing)}")
        if any(c < 1 for c in self.classes.values()):
            raise ContractError("class ids must be >= 1")
        if self.depth_order is not None:
            self.depth_order = {int(k): int(v) for k, v in self.depth_order.items()}

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def instance_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]

    def mask(self, instance_id: int) -> np.ndarray:
        return self.labels == instance_id

    def masks(self) -> Iterator[tuple[int, np.ndarray]]:
        for i in self.instance_ids():
            yield i, self.labels == i

    def foreground(self) -> np.ndarray:
        return self.labels != 0


@dataclass(frozen=True)
class RotatedRect:
    center: tuple[float, float]
    extents: tuple[float, float]  # (long side, short side)
    angle: float  # direction of the long side, radians in [0, pi)

    @property
    def aspect_ratio(self) -> float:
        return self.extents[0] / max(self.extents[1], 1.0)

    @property
    def area(self) -> float:
        return self.extents[0] * self.extents[1]

    def corners(self) -> np.ndarray:
        cx, cy = self.center
        u = np.array([math.cos(self.angle), math.sin(self.angle)])
        v = np.array([-u[1], u[0]])
        hl, hs = self.extents[0] / 2, self.extents[1] / 2
        c = np.array([cx, cy])
        return np.array([c - hl * u - hs * v, c + hl * u - hs * v,
                         c + hl * u + hs * v, c - hl * u + hs * v])


def _as_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def _points(mask: np.ndarray) -> np.ndarray:
    """Set-pixel centers as float (x, y) rows, row-major order."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyMaskError("operation requires at least one set pixel")
    return np.column_stack([xs, ys]).astype(np.float64)


def connected_components(mask, connectivity: int = 8) -> list[np.ndarray]:
    """Split a mask into connected pieces.

    Components are ordered by their first pixel in row-major order.
    """
    mask = _as_mask(mask)
    if connectivity not in _STRUCTURE:
        raise ContractError("connectivity must be 4 or 8")
    labeled, n = ndimage.label(mask, structure=_STRUCTURE[connectivity])
    if n == 0:
        return []
    # ndimage.label numbers components in raster-scan order already
    return [labeled == k for k in range(1, n + 1)]


def count_components(mask, connectivity: int = 8) -> int:
    mask = _as_mask(mask)
    return int(ndimage.label(mask, structure=_STRUCTURE[connectivity])[1])


def bounding_box(mask) -> tuple[int, int, int, int]:
    """Inclusive ``(x0, y0, x1, y1)`` box around the set pixels."""
    mask = _as_mask(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("bounding_box of an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_of_points(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counterclockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return np.array(hull, dtype=np.float64)


def convex_hull(mask) -> np.ndarray:
    """Convex hull of the set-pixel centers as a CCW ``(k, 2)`` array of (x, y).

    Collinear inputs give 2 vertices, a single pixel gives 1; both have area 0.
    """
    mask = _as_mask(mask)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyMaskError("convex_hull of an empty mask")
    # only the extreme pixels of each row can be hull vertices
    rows = np.unique(ys)
    first = np.searchsorted(ys, rows, side="left")
    last = np.searchsorted(ys, rows, side="right") - 1
    cand = np.concatenate([np.column_stack([xs[first], rows]),
                           np.column_stack([xs[last], rows])])
    return hull_of_points(cand)


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _rect_for_direction(hull: np.ndarray, theta: float):
    u = np.array([math.cos(theta), math.sin(theta)])
    v = np.array([-u[1], u[0]])
    pu, pv = hull @ u, hull @ v
    a, b = pu.max() - pu.min(), pv.max() - pv.min()
    mid_u, mid_v = (pu.max() + pu.min()) / 2, (pv.max() + pv.min()) / 2
    center = mid_u * u + mid_v * v
    return a, b, center


def min_area_rect(mask) -> RotatedRect:
    """Minimum-area enclosing rectangle of the set pixels (rotating calipers).

    The search runs over the hull of pixel centers with one side flush against
    a hull edge.  Both extents are then padded by the same footprint ``t`` in
    ``[0, 1]`` chosen so the rectangle area matches the pixel count: an
    axis-aligned 20x4 bar gets ``t = 1`` and extents (20, 4), while a rotated
    bar, whose outer pixel centers already sit near the true edges, gets less.
    """
    mask = _as_mask(mask)
    hull = convex_hull(mask)
    return _min_rect_of_hull(hull, int(np.count_nonzero(mask)))


def _footprint(a: float, b: float, n_pixels: int) -> float:
    # smallest t >= 0 with (a + t) * (b + t) >= n_pixels, capped at one pixel
    if n_pixels <= a * b:
        return 0.0
    s = a + b
    t = (-s + math.sqrt(s * s - 4.0 * (a * b - n_pixels))) / 2.0
    return min(max(t, 0.0), 1.0)


def _min_rect_of_hull(hull: np.ndarray, n_pixels: int | None = None) -> RotatedRect:
    if len(hull) == 1:
        return RotatedRect((float(hull[0, 0]), float(hull[0, 1])), (1.0, 1.0), 0.0)
    if len(hull) == 2:
        d = hull[1] - hull[0]
        theta = math.atan2(d[1], d[0]) % math.pi
        c = hull.mean(axis=0)
        return RotatedRect((float(c[0]), float(c[1])),
                           (float(np.hypot(*d)) + 1.0, 1.0), theta)
    best = None
    edges = np.roll(hull, -1, axis=0) - hull
    for dx, dy in edges:
        theta = math.atan2(dy, dx)
        a, b, center = _rect_for_direction(hull, theta)
        if best is None or a * b < best[0] - 1e-12:
            best = (a * b, a, b, theta, center)
    _, a, b, theta, center = best
    if b > a:
        a, b = b, a
        theta += math.pi / 2
    t = 1.0 if n_pixels is None else _footprint(a, b, n_pixels)
    return RotatedRect((float(center[0]), float(center[1])),
                       (float(a) + t, float(b) + t), theta % math.pi)


def caliper_area(mask) -> float:
    """Area of the minimum rectangle around the pixel-center hull (no footprint)."""
    hull = convex_hull(mask)
    if len(hull) < 3:
        return 0.0
    r = _min_rect_of_hull(hull, None)
    return (r.extents[0] - 1.0) * (r.extents[1] - 1.0)


def point_in_polygon(poly, xs, ys, eps: float = 1e-9) -> np.ndarray:
    """Even-odd test for points ``(xs, ys)``; points on an edge count as inside."""
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    on_edge = np.zeros_like(inside)
    n = len(poly)
    if n == 0:
        return inside
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        # boundary: within eps of the closed segment
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        if seg2 == 0:
            on_edge |= (np.abs(xs - x0) <= eps) & (np.abs(ys - y0) <= eps)
            continue
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg2, 0.0, 1.0)
        px, py = x0 + t * dx - xs, y0 + t * dy - ys
        on_edge |= px * px + py * py <= eps * eps
        # crossing number with half-open rule on y
        crosses = (y0 > ys) != (y1 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (ys - y0) * dx / dy if dy != 0 else np.full_like(xs, np.inf)
        inside ^= crosses & (xs < x_at)
    return inside | on_edge


def rasterize_polygon(poly, width: int, height: int) -> np.ndarray:
    """Set every pixel whose center lies inside (or on the edge of) ``poly``."""
    out = np.zeros((height, width), dtype=bool)
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(poly) == 0:
        return out
    if not np.isfinite(poly).all():
        raise ContractError("polygon vertices must be finite")
    x0 = max(int(math.floor(poly[:, 0].min())), 0)
    x1 = min(int(math.ceil(poly[:, 0].max())), width - 1)
    y0 = max(int(math.floor(poly[:, 1].min())), 0)
    y1 = min(int(math.ceil(poly[:, 1].max())), height - 1)
    if x0 > x1 or y0 > y1:
        return out
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    out[y0:y1 + 1, x0:x1 + 1] = point_in_polygon(poly, xs, ys)
    return out
