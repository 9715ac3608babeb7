"""Pixel graph construction, greedy supernode merging and class assignment.

Foreground pixels become graph nodes and every valid affinity slot between two
foreground pixels becomes an undirected edge scored ``2 * affinity - 1``.
Merging is agglomerative: the supernode pair with the highest mean edge score
is merged while that mean exceeds the threshold.  Aggregated edges keep a
running ``(sum, count)``; stale heap entries are skipped when popped.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numba
import numpy as np

from .affinity import AffinityMap, shift_slices
from .errors import ContractError
from .raster import InstanceMap

__all__ = [
    "PixelGraph",
    "SegmentationResult",
    "build_graph",
    "graph_merge",
    "merge_partition",
    "class_assign",
    "segment",
]

DEFAULT_MERGE_THRESHOLD = 0.0
DEFAULT_MIN_INSTANCE_PX = 16


@dataclass
class PixelGraph:
    """Undirected graph over foreground pixels; each edge is stored once with ``u < v``."""

    height: int
    width: int
    node_pixels: np.ndarray  # flat (row-major) pixel index of each node
    u: np.ndarray
    v: np.ndarray
    score: np.ndarray
    _csr: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return int(self.node_pixels.size)

    @property
    def n_edges(self) -> int:
        return int(self.u.size)

    def neighbors(self, node: int) -> list[tuple[int, float]]:
        """Edges incident to ``node`` as ``(other, score)`` pairs, from either end."""
        if self._csr is None:
            both_a = np.concatenate([self.u, self.v])
            both_b = np.concatenate([self.v, self.u])
            both_s = np.concatenate([self.score, self.score])
            order = np.lexsort((both_b, both_a))
            indptr = np.searchsorted(both_a[order], np.arange(self.n_nodes + 1))
            self._csr = (indptr, both_b[order], both_s[order])
        indptr, nbr, sc = self._csr
        lo, hi = indptr[node], indptr[node + 1]
        return [(int(a), float(b)) for a, b in zip(nbr[lo:hi], sc[lo:hi])]


@dataclass
class SegmentationResult:
    instance_map: InstanceMap
    confidences: dict[int, float]
    classed: bool = False

    def __post_init__(self):
        ids = self.instance_map.instance_ids()
        if ids != list(range(1, len(ids) + 1)):
            raise ContractError("instance ids must be contiguous from 1")
        if set(ids) != set(self.confidences):
            raise ContractError("every instance needs a confidence")


def build_graph(aff: AffinityMap, foreground) -> PixelGraph:
    foreground = np.asarray(foreground, dtype=bool)
    h, w = foreground.shape
    if (aff.height, aff.width) != (h, w):
        raise ContractError(
            f"foreground {foreground.shape} does not match affinity map {(aff.height, aff.width)}")
    node_of = np.full(h * w, -1, dtype=np.int64)
    node_pixels = np.flatnonzero(foreground)
    node_of[node_pixels] = np.arange(node_pixels.size)
    node_of = node_of.reshape(h, w)
    us, vs, ss = [], [], []
    for i, (dy, dx) in enumerate(aff.kernel.offsets):
        src, dst = shift_slices(dy, dx, h, w)
        keep = foreground[src] & foreground[dst] & aff.validity[i][src]
        a = node_of[src][keep]
        b = node_of[dst][keep]
        s = 2.0 * aff.values[i][src][keep].astype(np.float64) - 1.0
        us.append(np.minimum(a, b))
        vs.append(np.maximum(a, b))
        ss.append(s)
    if us:
        u, v, s = np.concatenate(us), np.concatenate(vs), np.concatenate(ss)
    else:
        u = v = np.zeros(0, dtype=np.int64)
        s = np.zeros(0)
    n = max(node_pixels.size, 1)
    key = u * n + v
    order = np.argsort(key, kind="stable")
    key, u, v, s = key[order], u[order], v[order], s[order]
    if aff.kernel.symmetric and key.size:
        # a +/- offset pair reaches the same pixel pair twice; keep one edge
        uniq, start, counts = np.unique(key, return_index=True, return_counts=True)
        s = np.add.reduceat(s, start) / counts
        u, v = u[start], v[start]
    return PixelGraph(h, w, node_pixels, u.astype(np.int64), v.astype(np.int64),
                      s.astype(np.float64))


_EMPTY = -1
_TOMB = -2


@numba.njit(cache=True, inline="always")
def _slot(key, mask):
    return ((key * 0x9E3779B97F4A7C15) >> 17) & mask


@numba.njit(cache=True)
def _h_find(keys, key, mask):
    i = _slot(key, mask)
    while True:
        k = keys[i]
        if k == key:
            return i
        if k == _EMPTY:
            return -1
        i = (i + 1) & mask


@numba.njit(cache=True)
def _h_insert(keys, vals, key, val, mask):
    i = _slot(key, mask)
    while keys[i] >= 0:
        i = (i + 1) & mask
    if keys[i] == _EMPTY:
        used = 1
    else:
        used = 0
    keys[i] = key
    vals[i] = val
    return used


@numba.njit(cache=True, nogil=True)
def _merge_kernel(n, eu, ev, es, order, threshold):
    """Greedy mean-score merging over an edge list sorted by ``order``.

    Supernode adjacency is a linked list of half-edge slots (slot ``2e`` and
    ``2e + 1`` for edge ``e``) that is spliced in O(1) on merge; slots of dead
    edges stay in the lists and are skipped.  A hash on the endpoint pair finds
    the live edge between two supernodes.
    """
    m = eu.size
    ea = eu.copy()
    eb = ev.copy()
    esum = es.copy()
    ecnt = np.ones(m, dtype=np.int64)
    stamp = np.zeros(m, dtype=np.int64)
    dead = np.zeros(m, dtype=np.bool_)
    parent = np.arange(n)
    isum = np.zeros(n)
    icnt = np.zeros(n, dtype=np.int64)
    head = np.full(n, -1, dtype=np.int64)
    tail = np.full(n, -1, dtype=np.int64)
    nxt = np.full(2 * m, -1, dtype=np.int64)
    weight = np.zeros(n, dtype=np.int64)
    for e in range(m):
        for side in range(2):
            node = ea[e] if side == 0 else eb[e]
            s = 2 * e + side
            if head[node] < 0:
                head[node] = s
            else:
                nxt[tail[node]] = s
            tail[node] = s
            weight[node] += 1
    cap = 16
    while cap < 3 * m + 16:
        cap *= 2
    mask = cap - 1
    keys = np.full(cap, _EMPTY, dtype=np.int64)
    vals = np.zeros(cap, dtype=np.int64)
    used = 0
    for e in range(m):
        used += _h_insert(keys, vals, ea[e] * n + eb[e], e, mask)

    heap = [(0.0, np.int64(0), np.int64(0), np.int64(0), np.int64(0))]
    heap.pop()
    cursor = 0
    while True:
        # next candidate: static sorted list vs heap of updated edges
        take_static = False
        if cursor < m:
            e = order[cursor]
            if len(heap) == 0:
                take_static = True
            else:
                top = heap[0]
                cand = (-es[e], eu[e], ev[e])
                if cand < (top[0], top[1], top[2]):
                    take_static = True
        if take_static:
            e = order[cursor]
            cursor += 1
            if dead[e] or stamp[e] != 0:
                continue
            mean = esum[e]
        elif len(heap) > 0:
            neg, a, b, e, st = heapq.heappop(heap)
            if dead[e] or stamp[e] != st:
                continue
            mean = -neg
        else:
            break
        if mean <= threshold:
            break
        a = ea[e]
        b = eb[e]
        # heavier supernode (more half-edge slots) keeps its id; ties keep the smaller id
        if weight[b] > weight[a]:
            keep, drop = b, a
        else:
            keep, drop = a, b
        isum[keep] += isum[drop] + esum[e]
        icnt[keep] += icnt[drop] + ecnt[e]
        dead[e] = True
        i = _h_find(keys, ea[e] * n + eb[e], mask)
        keys[i] = _TOMB
        s = head[drop]
        while s >= 0:
            e2 = s >> 1
            s = nxt[s]
            if dead[e2]:
                continue
            if ea[e2] == drop:
                w = eb[e2]
            else:
                w = ea[e2]
            i = _h_find(keys, min(drop, w) * n + max(drop, w), mask)
            keys[i] = _TOMB
            lo = min(keep, w)
            hi = max(keep, w)
            i = _h_find(keys, lo * n + hi, mask)
            if i >= 0:
                e3 = vals[i]
                esum[e3] += esum[e2]
                ecnt[e3] += ecnt[e2]
                stamp[e3] += 1
                dead[e2] = True
                tgt = e3
            else:
                ea[e2] = lo
                eb[e2] = hi
                stamp[e2] += 1
                used += _h_insert(keys, vals, lo * n + hi, e2, mask)
                tgt = e2
            heapq.heappush(heap, (-(esum[tgt] / ecnt[tgt]), lo, hi, tgt, stamp[tgt]))
        if head[drop] >= 0:
            nxt[tail[keep]] = head[drop]
            tail[keep] = tail[drop]
        head[drop] = -1
        weight[keep] += weight[drop]
        parent[drop] = keep
        if used > (cap * 7) // 10:
            # rehash live keys to shed tombstones
            old_k = keys.copy()
            old_v = vals.copy()
            keys[:] = _EMPTY
            used = 0
            for j in range(cap):
                if old_k[j] >= 0:
                    used += _h_insert(keys, vals, old_k[j], old_v[j], mask)
    for i in range(n):
        r = i
        while parent[r] != r:
            r = parent[r]
        j = i
        while parent[j] != r:
            k = parent[j]
            parent[j] = r
            j = k
    return parent, isum, icnt


def merge_partition(graph: PixelGraph, merge_threshold: float = DEFAULT_MERGE_THRESHOLD):
    """Run the greedy merge; returns ``(root_of_node, internal_sum, internal_count)``."""
    n = graph.n_nodes
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64)
    order = np.lexsort((graph.v, graph.u, -graph.score)).astype(np.int64)
    return _merge_kernel(np.int64(n), graph.u, graph.v, graph.score, order,
                         float(merge_threshold))


def _result_from_roots(graph: PixelGraph, roots: np.ndarray, isum: np.ndarray,
                       icnt: np.ndarray, min_instance_px: int) -> SegmentationResult:
    h, w = graph.height, graph.width
    labels = np.zeros(h * w, dtype=np.int32)
    confidences: dict[int, float] = {}
    if roots.size:
        sizes = np.bincount(roots, minlength=roots.size)
        keep_node = sizes[roots] >= max(min_instance_px, 1)
        # number instances by their first pixel in row-major order
        uniq, first = np.unique(roots[keep_node], return_index=True)
        order = np.argsort(first, kind="stable")
        new_id = np.zeros(roots.size, dtype=np.int32)
        new_id[uniq[order]] = np.arange(1, uniq.size + 1, dtype=np.int32)
        labels[graph.node_pixels[keep_node]] = new_id[roots[keep_node]]
        for k, r in enumerate(uniq[order], start=1):
            if icnt[r] > 0:
                conf = (isum[r] / icnt[r] + 1.0) / 2.0
            elif min_instance_px > 0:
                conf = min(sizes[r] / min_instance_px, 1.0)
            else:
                conf = 1.0
            confidences[k] = float(min(max(conf, 0.0), 1.0))
    labels = labels.reshape(h, w)
    ids = range(1, len(confidences) + 1)
    imap = InstanceMap(labels, {i: 1 for i in ids})
    return SegmentationResult(imap, confidences, classed=False)


def graph_merge(graph: PixelGraph, merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
                min_instance_px: int = DEFAULT_MIN_INSTANCE_PX) -> SegmentationResult:
    """Greedy mean-score agglomeration into class-agnostic instances.

    Ties between equal mean scores go to the smallest ``(u, v)`` supernode id
    pair.  When two supernodes merge, the one with more neighbors keeps its id.
    Supernodes smaller than ``min_instance_px`` become background.  Confidence
    is the mean affinity over all edges absorbed inside an instance.
    """
    roots, isum, icnt = merge_partition(graph, merge_threshold)
    return _result_from_roots(graph, roots, isum, icnt, min_instance_px)


def class_assign(seg: SegmentationResult, semantic: np.ndarray) -> SegmentationResult:
    """Attach classes from mean semantic probabilities; background-majority instances are dropped."""
    semantic = np.asarray(semantic)
    labels = seg.instance_map.labels
    if semantic.ndim != 3 or semantic.shape[1:] != labels.shape:
        raise ContractError(
            f"semantic map {semantic.shape} does not match instance map {labels.shape}")
    c = semantic.shape[0]
    n = len(seg.confidences)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1).astype(np.float64)
    mean = np.stack([np.bincount(flat, weights=semantic[k].ravel(), minlength=n + 1)
                     for k in range(c)], axis=1)
    mean[1:] /= np.maximum(counts[1:, None], 1.0)
    new_labels = np.zeros_like(labels)
    lut = np.zeros(n + 1, dtype=labels.dtype)
    classes: dict[int, int] = {}
    confidences: dict[int, float] = {}
    nxt = 1
    for i in range(1, n + 1):
        row = mean[i]
        if int(np.argmax(row)) == 0:
            continue
        k = 1 + int(np.argmax(row[1:]))
        lut[i] = nxt
        classes[nxt] = k
        confidences[nxt] = float(seg.confidences[i] * row[k])
        nxt += 1
    new_labels = lut[labels]
    imap = InstanceMap(new_labels, classes)
    return SegmentationResult(imap, confidences, classed=True)


def segment(aff: AffinityMap, semantic: np.ndarray,
            merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
            min_instance_px: int = DEFAULT_MIN_INSTANCE_PX) -> SegmentationResult:
    """build_graph -> graph_merge -> class_assign, foreground from the semantic argmax."""
    semantic = np.asarray(semantic)
    if semantic.ndim != 3 or semantic.shape[1:] != (aff.height, aff.width):
        raise ContractError("semantic map does not match affinity map")
    foreground = np.argmax(semantic, axis=0) != 0
    graph = build_graph(aff, foreground)
    seg = graph_merge(graph, merge_threshold, min_instance_px)
    return class_assign(seg, semantic)
