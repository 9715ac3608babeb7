"""Ground-truth affinity maps and seeded stand-ins for network predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .kernel import AffinityKernel
from .raster import InstanceMap

__all__ = [
    "AffinityMap",
    "gt_affinity",
    "corrupt_affinity",
    "semantic_from_instances",
    "shift_slices",
]

# fixed stream identifiers so flips and jitter never share random numbers
_FLIP_STREAM = 0
_JITTER_STREAM = 1
_SEMANTIC_STREAM = 2


@dataclass
class AffinityMap:
    kernel: AffinityKernel
    values: np.ndarray  # (N, H, W) float32 in [0, 1]
    validity: np.ndarray  # (N, H, W) bool

    def __post_init__(self):
        n = len(self.kernel)
        if self.values.ndim != 3 or self.values.shape[0] != n:
            raise ContractError(f"values must have shape ({n}, H, W), got {self.values.shape}")
        if self.validity.shape != self.values.shape:
            raise ContractError("validity and values shapes differ")

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def shift_slices(dy: int, dx: int, h: int, w: int):
    """Slices ``(src, dst)`` so that ``a[dst]`` is the neighbor of ``a[src]`` at ``(dy, dx)``."""
    sy = slice(max(0, -dy), min(h, h - dy))
    sx = slice(max(0, -dx), min(w, w - dx))
    ty = slice(max(0, dy), min(h, h + dy))
    tx = slice(max(0, dx), min(w, w + dx))
    return (sy, sx), (ty, tx)


def validity_mask(kernel: AffinityKernel, h: int, w: int) -> np.ndarray:
    valid = np.zeros((len(kernel), h, w), dtype=bool)
    for i, (dy, dx) in enumerate(kernel.offsets):
        src, _ = shift_slices(dy, dx, h, w)
        valid[i][src] = True
    return valid


def gt_affinity(instance_map: InstanceMap, kernel: AffinityKernel) -> AffinityMap:
    """1 where a foreground pixel and its kernel neighbor share an instance, else 0."""
    labels = instance_map.labels
    h, w = labels.shape
    values = np.zeros((len(kernel), h, w), dtype=np.float32)
    for i, (dy, dx) in enumerate(kernel.offsets):
        src, dst = shift_slices(dy, dx, h, w)
        a = labels[src]
        values[i][src] = (a != 0) & (a == labels[dst])
    return AffinityMap(kernel, values, validity_mask(kernel, h, w))


def _stream(seed: int, stream: int) -> np.random.Generator:
    # Philox is counter based: slot k of a stream always receives draw k
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), stream]))


def corrupt_affinity(aff: AffinityMap, flip_rate: float, jitter_sd: float,
                     seed: int) -> AffinityMap:
    """Flip each valid slot with probability ``flip_rate``, then add clamped Gaussian jitter."""
    if not 0.0 <= flip_rate <= 1.0:
        raise ParameterError(f"flip_rate must be in [0, 1], got {flip_rate}")
    if jitter_sd < 0:
        raise ParameterError(f"jitter_sd must be >= 0, got {jitter_sd}")
    values = aff.values.copy()
    valid = aff.validity
    if flip_rate > 0:
        u = _stream(seed, _FLIP_STREAM).random(values.shape, dtype=np.float64)
        flip = (u < flip_rate) & valid
        values[flip] = 1.0 - values[flip]
    if jitter_sd > 0:
        z = _stream(seed, _JITTER_STREAM).standard_normal(values.shape, dtype=np.float64)
        jittered = np.clip(values + jitter_sd * z, 0.0, 1.0).astype(np.float32)
        values = np.where(valid, jittered, values)
    return AffinityMap(aff.kernel, values, valid.copy())


def semantic_from_instances(instance_map: InstanceMap, correct_prob: float = 1.0,
                            seed: int = 0, n_classes: int | None = None,
                            flip_prob: float = 0.0) -> np.ndarray:
    """Oracle semantic probabilities, shape ``(C, H, W)``; channel 0 is background.

    The true class of each pixel receives ``correct_prob`` and the remainder is
    spread evenly over the other channels.  With ``flip_prob > 0`` a seeded
    fraction of pixels has its true class swapped for a random other class
    before the probabilities are laid out.
    """
    labels = instance_map.labels
    max_class = max(instance_map.classes.values(), default=0)
    c = n_classes if n_classes is not None else max_class + 1
    if c < 2 or c <= max_class:
        raise ParameterError(f"n_classes={c} too small for class ids up to {max_class}")
    if not (1.0 / c < correct_prob <= 1.0):
        raise ParameterError(f"correct_prob must be in (1/{c}, 1], got {correct_prob}")
    if not 0.0 <= flip_prob <= 1.0:
        raise ParameterError("flip_prob must be in [0, 1]")
    lut = np.zeros(labels.max() + 1, dtype=np.int64)
    for i, k in instance_map.classes.items():
        if i < lut.size:
            lut[i] = k
    truth = lut[labels]
    if flip_prob > 0:
        rng = _stream(seed, _SEMANTIC_STREAM)
        flip = rng.random(truth.shape) < flip_prob
        shift = rng.integers(1, c, size=truth.shape)
        truth = np.where(flip, (truth + shift) % c, truth)
    other = (1.0 - correct_prob) / (c - 1)
    probs = np.full((c,) + labels.shape, other, dtype=np.float64)
    np.put_along_axis(probs, truth[None], correct_prob, axis=0)
    return probs
