"""Affinity kernel construction.

An affinity kernel is an ordered set of integer ``(dy, dx)`` offsets; channel
``i`` of an affinity map holds the affinity between a pixel and the pixel at
``offsets[i]`` from it.  The asymmetric kernels built here keep only one member
of every ``+/-`` pair, namely the one in the half-plane
``{dy > 0} U {dy = 0, dx > 0}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import minimum_spanning_tree

from .errors import ContractError, ParameterError
from .raster import InstanceMap, connected_components

__all__ = [
    "AffinityKernel",
    "DatasetGapStats",
    "generate_asis_kernel",
    "generate_symmetric_kernel",
    "deduplicate_symmetric",
    "gmis_kernel",
    "measure_gap_stats",
    "adapt_kernel_params",
    "in_half_plane",
]

CORE_RADIUS = 2


def in_half_plane(dy: int, dx: int) -> bool:
    return dy > 0 or (dy == 0 and dx > 0)


@dataclass(frozen=True)
class AffinityKernel:
    offsets: tuple[tuple[int, int], ...]
    radius: int
    gap: int
    symmetric: bool = False

    def __post_init__(self):
        offs = tuple((int(dy), int(dx)) for dy, dx in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if (0, 0) in offs:
            raise ContractError("kernel may not contain the zero offset")
        if list(offs) != sorted(set(offs)):
            raise ContractError("kernel offsets must be unique and sorted by (dy, dx)")
        limit = self.radius + 0.5
        if any(math.hypot(dy, dx) > limit + 1e-9 for dy, dx in offs):
            raise ContractError(f"offset outside radius {self.radius}")
        s = set(offs)
        if self.symmetric:
            if any((-dy, -dx) not in s for dy, dx in offs):
                raise ContractError("symmetric kernel must be closed under negation")
        elif not all(in_half_plane(dy, dx) for dy, dx in offs):
            raise ContractError("asymmetric kernel offsets must lie in the half-plane")

    def __len__(self) -> int:
        return len(self.offsets)

    def as_array(self) -> np.ndarray:
        return np.array(self.offsets, dtype=np.int64).reshape(-1, 2)


def _check_params(r_k, g):
    if not float(r_k).is_integer() or not float(g).is_integer():
        raise ParameterError("r_k and g must be integers")
    if r_k < 1 or g < 1:
        raise ParameterError(f"r_k and g must be >= 1 (got r_k={r_k}, g={g})")
    return int(r_k), int(g)


def _canonical(dy: int, dx: int) -> tuple[int, int]:
    return (dy, dx) if in_half_plane(dy, dx) else (-dy, -dx)


def _snap(y: float, x: float, limit: float) -> tuple[int, int]:
    """Nearest lattice point to (y, x) whose norm stays within ``limit``."""
    cands = [(cy, cx) for cy in (math.floor(y), math.ceil(y))
             for cx in (math.floor(x), math.ceil(x))]
    cands.sort(key=lambda p: ((p[0] - y) ** 2 + (p[1] - x) ** 2, p))
    for cy, cx in cands:
        if math.hypot(cy, cx) <= limit:
            return int(cy), int(cx)
    # truncation toward zero always satisfies the limit
    return int(y), int(x)


def _half_plane_offsets(r_k: int, g: int) -> set[tuple[int, int]]:
    core = min(CORE_RADIUS, r_k)
    out = set()
    for dy in range(0, r_k + 1):
        for dx in range(-r_k, r_k + 1):
            if not in_half_plane(dy, dx):
                continue
            n = math.hypot(dy, dx)
            # g == 1 is the dense limit: unit lattice spacing keeps every point
            if n <= core or (g == 1 and n <= r_k):
                out.add((dy, dx))
    if g == 1:
        return out
    # rings are anchored at the outer radius so the full reach r_k is always
    # sampled, then step inward by g while they stay outside the core
    r = r_k
    while r > CORE_RADIUS:
        step = g / r
        n_angles = math.ceil(math.pi / step - 1e-12)
        for k in range(n_angles):
            theta = k * step
            p = _snap(r * math.sin(theta), r * math.cos(theta), r + 0.5)
            if p != (0, 0):
                out.add(_canonical(*p))
        r -= g
    return out


def generate_asis_kernel(r_k: int, g: int) -> AffinityKernel:
    """Half-plane kernel: a dense core of radius 2 plus sampled outer rings.

    Rings sit at radii ``r_k, r_k - g, r_k - 2g, ...`` down to just outside
    the core; each ring holds the lattice points nearest to angles
    ``0, g/r, 2g/r, ...`` in ``[0, pi)``, so neighbors are roughly ``g``
    pixels apart along the ring.  With ``g = 1``
    every half-plane lattice point within ``r_k`` is kept.
    """
    r_k, g = _check_params(r_k, g)
    offsets = tuple(sorted(_half_plane_offsets(r_k, g)))
    return AffinityKernel(offsets, r_k, g, symmetric=False)


def generate_symmetric_kernel(r_k: int, g: int) -> AffinityKernel:
    """Centrally symmetric counterpart of :func:`generate_asis_kernel`."""
    r_k, g = _check_params(r_k, g)
    half = _half_plane_offsets(r_k, g)
    full = half | {(-dy, -dx) for dy, dx in half}
    return AffinityKernel(tuple(sorted(full)), r_k, g, symmetric=True)


def gmis_kernel(dilations: Sequence[int] = (1, 2, 4, 8, 16, 32, 64)) -> AffinityKernel:
    """Symmetric 8-direction kernel repeated at each dilation.

    The default seven dilations give the 56-neighbor symmetric configuration.
    """
    if not dilations or min(dilations) < 1:
        raise ParameterError("dilations must be positive")
    offs = set()
    for d in dilations:
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    offs.add((dy * d, dx * d))
    radius = math.ceil(max(math.hypot(*o) for o in offs))
    return AffinityKernel(tuple(sorted(offs)), radius, int(min(dilations)), symmetric=True)


def deduplicate_symmetric(kernel: AffinityKernel) -> AffinityKernel:
    """Keep the half-plane member of every ``+/-`` offset pair."""
    if not kernel.symmetric:
        raise ContractError("deduplicate_symmetric needs a symmetric kernel")
    kept = tuple(o for o in kernel.offsets if in_half_plane(*o))
    if 2 * len(kept) != len(kernel.offsets):
        raise ContractError("kernel is not closed under negation")
    return AffinityKernel(kept, kernel.radius, kernel.gap, symmetric=False)


def restrict(kernel: AffinityKernel, keep: Iterable[int]) -> AffinityKernel:
    """Sub-kernel made of the channels listed in ``keep`` (order preserved)."""
    idx = sorted(set(int(i) for i in keep))
    return AffinityKernel(tuple(kernel.offsets[i] for i in idx), kernel.radius,
                          kernel.gap, kernel.symmetric)


# -- dataset-driven parameter choice -------------------------------------------------


@dataclass
class DatasetGapStats:
    gaps: list[float]
    thicknesses: list[float]

    def __post_init__(self):
        if any(v <= 0 for v in self.gaps) or any(v <= 0 for v in self.thicknesses):
            raise ContractError("gap and thickness values must be positive")

    def merged(self, other: "DatasetGapStats") -> "DatasetGapStats":
        return DatasetGapStats(self.gaps + other.gaps, self.thicknesses + other.thicknesses)


def component_distance_matrix(components: list[np.ndarray], cap: float = np.inf) -> np.ndarray:
    """Pairwise minimum pixel-center distances between disjoint components.

    Distances above ``cap`` are reported as ``inf``; the cap bounds the window
    in which each distance transform is evaluated.
    """
    m = len(components)
    dist = np.zeros((m, m))
    if m < 2:
        return dist
    h, w = components[0].shape
    lab = np.zeros((h, w), dtype=np.int32)
    for k, c in enumerate(components):
        lab[c] = k + 1
    slices = ndimage.find_objects(lab)
    pad = int(np.ceil(cap)) + 1 if np.isfinite(cap) else max(h, w)
    for i in range(m - 1):
        sy, sx = slices[i]
        y0, x0 = max(sy.start - pad, 0), max(sx.start - pad, 0)
        y1, x1 = min(sy.stop + pad, h), min(sx.stop + pad, w)
        crop = lab[y0:y1, x0:x1]
        edt = ndimage.distance_transform_edt(crop != i + 1)
        # one pass: nearest distance from component i to every label in the window
        best = np.full(m + 1, np.inf)
        others = crop > i + 1
        np.minimum.at(best, crop[others], edt[others])
        row = best[i + 2:]
        row[row > cap] = np.inf
        dist[i, i + 1:] = row
        dist[i + 1:, i] = row
    return dist


def bridging_gap(mask: np.ndarray, connectivity: int = 8, cap: float = 128.0) -> float:
    """Largest hop needed to link all components of ``mask`` (0 if connected).

    This is the bottleneck edge of the minimum spanning tree over
    component-to-component distances; for two components it is simply their
    distance.  Gaps larger than ``cap`` are reported as ``cap``.
    """
    comps = connected_components(mask, connectivity)
    if len(comps) < 2:
        return 0.0
    # widen the search window until the links found connect every component;
    # the spanning tree then only needs links no longer than the window
    window = min(16.0, cap)
    while True:
        dist = component_distance_matrix(comps, window)
        finite = np.where(np.isfinite(dist), dist, 0.0)
        mst = minimum_spanning_tree(finite)
        if mst.nnz == len(comps) - 1:
            return float(min(mst.data.max(), cap))
        if window >= cap:
            return float(cap)
        window = min(2 * window, cap)


def stroke_thickness(mask: np.ndarray) -> float:
    """Twice the median distance-to-background along the medial axis."""
    from skimage.morphology import skeletonize

    padded = np.pad(mask, 1)
    edt = ndimage.distance_transform_edt(padded)
    skel = skeletonize(padded)
    vals = edt[skel] if skel.any() else edt[padded]
    return 2.0 * float(np.median(vals))


def measure_gap_stats(maps: Sequence[InstanceMap], sample_limit: int | None = None,
                      connectivity: int = 8) -> DatasetGapStats:
    """Collect per-instance bridging gaps and stroke thicknesses.

    ``sample_limit`` caps how many maps are inspected (the first ones).
    """
    if not maps:
        raise ParameterError("measure_gap_stats needs at least one map")
    gaps: list[float] = []
    thick: list[float] = []
    for m in list(maps)[:sample_limit]:
        for _, mask in m.masks():
            g = bridging_gap(mask, connectivity)
            if g > 0:
                gaps.append(g)
            thick.append(stroke_thickness(mask))
    return DatasetGapStats(gaps, thick)


def adapt_kernel_params(stats: DatasetGapStats, coverage_q: float = 0.95,
                        neighbor_budget: int = 64, r_max: int = 64) -> tuple[int, int]:
    """Pick ``(r_k, g)``: radius covering most gaps, then the densest ring spacing in budget."""
    if not stats.gaps and not stats.thicknesses:
        raise ParameterError("empty gap statistics")
    if not 0 < coverage_q <= 1:
        raise ParameterError("coverage_q must be in (0, 1]")
    if r_max < 2:
        raise ParameterError("r_max must be >= 2")
    if stats.gaps:
        r = math.ceil(float(np.quantile(stats.gaps, coverage_q)) - 1e-9)
    else:
        r = math.ceil(2 * float(np.median(stats.thicknesses)) - 1e-9)
    r_k = int(min(max(r, 2), r_max))
    g = 1
    while len(_half_plane_offsets(r_k, g)) > neighbor_budget:
        g += 1
        if g > r_k:
            # only the core remains; it cannot shrink further
            break
    return r_k, g
