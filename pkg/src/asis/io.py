"""On-disk formats.

* Instance maps: 16-bit grayscale PNG (pixel = instance id) next to a UTF-8
  sidecar ``<stem>.txt`` with ``key=value`` header lines and one
  ``<id> -> <class>`` line per instance, optionally followed by
  ``depth=<d>`` and ``confidence=<c>`` fields.
* Binary masks: run-length counts, row-major, alternating 0/1 runs starting
  with a (possibly empty) 0-run.
* Kernels: header ``asis-kernel v1 r_k=<int> g=<int> sym=<0|1>`` then one
  ``dy dx`` pair per line.
* Affinity maps: ``AFF1`` binary, little-endian throughout.
"""

from __future__ import annotations

import io
import os
import re
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .affinity import AffinityMap
from .errors import FormatError
from .kernel import AffinityKernel
from .raster import InstanceMap

__all__ = [
    "write_instance_map",
    "read_instance_map",
    "write_result",
    "read_result",
    "rle_encode",
    "rle_decode",
    "rle_to_text",
    "rle_from_text",
    "kernel_to_text",
    "kernel_from_text",
    "write_kernel",
    "read_kernel",
    "affinity_to_bytes",
    "affinity_from_bytes",
    "write_affinity",
    "read_affinity",
    "atomic_write",
]

SIDECAR_HEADER = "# instance-map v1"
_INSTANCE_LINE = re.compile(r"^(\d+)\s*->\s*(\d+)((?:\s+\w+=\S+)*)\s*$")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(png_path) -> Path:
    return Path(png_path).with_suffix(".txt")


def _png_bytes(labels: np.ndarray) -> bytes:
    if labels.max(initial=0) > 65535:
        raise FormatError("instance ids above 65535 do not fit a 16-bit PNG")
    img = Image.fromarray(labels.astype(np.uint16))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _sidecar_text(imap: InstanceMap, confidences: Optional[dict[int, float]] = None,
                  extra: Optional[dict[str, str]] = None) -> str:
    lines = [SIDECAR_HEADER, f"width={imap.width}", f"height={imap.height}"]
    meta = dict(imap.meta)
    meta.update(extra or {})
    for k in sorted(meta):
        lines.append(f"{k}={meta[k]}")
    for i in sorted(imap.classes):
        line = f"{i} -> {imap.classes[i]}"
        if imap.depth_order is not None and i in imap.depth_order:
            line += f" depth={imap.depth_order[i]}"
        if confidences is not None and i in confidences:
            line += f" confidence={confidences[i]:.9f}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_instance_map(path, imap: InstanceMap, confidences=None, extra=None) -> None:
    path = Path(path)
    atomic_write(path, _png_bytes(imap.labels))
    atomic_write(sidecar_path(path),
                 _sidecar_text(imap, confidences, extra).encode("utf-8"))


def _parse_sidecar(text: str, where: str):
    meta: dict[str, str] = {}
    classes: dict[int, int] = {}
    depth: dict[int, int] = {}
    conf: dict[int, float] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _INSTANCE_LINE.match(line)
        if m:
            i, c = int(m.group(1)), int(m.group(2))
            classes[i] = c
            for field in m.group(3).split():
                key, _, val = field.partition("=")
                if key == "depth":
                    depth[i] = int(val)
                elif key == "confidence":
                    conf[i] = float(val)
                else:
                    raise FormatError(f"{where}:{n}: unknown instance field {key!r}")
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"{where}:{n}: cannot parse {raw!r}")
        meta[key.strip()] = val.strip()
    return meta, classes, depth, conf


def _read_map(path):
    path = Path(path)
    with Image.open(path) as img:
        labels = np.array(img).astype(np.int32)
    if labels.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel PNG")
    side = sidecar_path(path)
    meta, classes, depth, conf = _parse_sidecar(side.read_text(encoding="utf-8"), str(side))
    w, h = int(meta.pop("width", labels.shape[1])), int(meta.pop("height", labels.shape[0]))
    if (h, w) != labels.shape:
        raise FormatError(f"{side}: declared {w}x{h} but PNG is {labels.shape[1]}x{labels.shape[0]}")
    imap = InstanceMap(labels, classes, depth_order=depth or None, meta=meta)
    return imap, conf


def read_instance_map(path) -> InstanceMap:
    return _read_map(path)[0]


def write_result(path, result, extra=None) -> None:
    write_instance_map(path, result.instance_map, result.confidences, extra)


def read_result(path):
    from .graphmerge import SegmentationResult

    imap, conf = _read_map(path)
    return SegmentationResult(imap, conf, classed=True)


# -- run-length masks -----------------------------------------------------------------


def rle_encode(mask) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(counts, width: int, height: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise FormatError("run lengths must be non-negative")
    if counts.sum() != width * height:
        raise FormatError(f"runs cover {counts.sum()} pixels, expected {width * height}")
    vals = np.arange(counts.size) % 2 == 1
    return np.repeat(vals, counts).reshape(height, width)


def rle_to_text(mask) -> str:
    mask = np.asarray(mask, dtype=bool)
    return f"{mask.shape[1]} {mask.shape[0]} " + " ".join(map(str, rle_encode(mask)))


def rle_from_text(text: str) -> np.ndarray:
    parts = text.split()
    if len(parts) < 2:
        raise FormatError("RLE text needs width and height")
    w, h = int(parts[0]), int(parts[1])
    return rle_decode([int(p) for p in parts[2:]], w, h)


# -- kernels --------------------------------------------------------------------------

_KERNEL_HEADER = re.compile(r"^asis-kernel v1 r_k=(\d+) g=(\d+) sym=([01])$")


def kernel_to_text(kernel: AffinityKernel) -> str:
    lines = [f"asis-kernel v1 r_k={kernel.radius} g={kernel.gap} sym={int(kernel.symmetric)}"]
    lines += [f"{dy} {dx}" for dy, dx in kernel.offsets]
    return "\n".join(lines) + "\n"


def kernel_from_text(text: str) -> AffinityKernel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty kernel file")
    m = _KERNEL_HEADER.match(lines[0])
    if not m:
        raise FormatError(f"bad kernel header {lines[0]!r}")
    offs = []
    for ln in lines[1:]:
        try:
            dy, dx = (int(t) for t in ln.split())
        except ValueError:
            raise FormatError(f"bad kernel offset line {ln!r}") from None
        offs.append((dy, dx))
    return AffinityKernel(tuple(offs), int(m.group(1)), int(m.group(2)),
                          symmetric=m.group(3) == "1")


def write_kernel(path, kernel: AffinityKernel) -> None:
    atomic_write(path, kernel_to_text(kernel).encode("utf-8"))


def read_kernel(path) -> AffinityKernel:
    return kernel_from_text(Path(path).read_text(encoding="utf-8"))


# -- affinity maps --------------------------------------------------------------------

_MAGIC = b"AFF1"


def affinity_to_bytes(aff: AffinityMap) -> bytes:
    n, h, w = aff.values.shape
    parts = [_MAGIC, struct.pack("<III", n, h, w)]
    parts.append(np.asarray(aff.kernel.offsets, dtype="<i4").reshape(n, 2).tobytes())
    parts.append(np.ascontiguousarray(aff.values, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(aff.validity, dtype=np.uint8).tobytes())
    return b"".join(parts)


def affinity_from_bytes(data: bytes, radius: Optional[int] = None, gap: int = 1) -> AffinityMap:
    """Parse ``AFF1`` bytes.

    The format carries offsets only; the kernel radius defaults to the
    smallest integer covering them and ``gap`` to 1 unless given.
    """
    if data[:4] != _MAGIC:
        raise FormatError("missing AFF1 magic")
    n, h, w = struct.unpack_from("<III", data, 4)
    pos = 16
    offs = np.frombuffer(data, dtype="<i4", count=2 * n, offset=pos).reshape(n, 2)
    pos += 8 * n
    size = n * h * w
    if len(data) != pos + 5 * size:
        raise FormatError(f"AFF1 length {len(data)} does not match header {n}x{h}x{w}")
    values = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(n, h, w)
    pos += 4 * size
    valid = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos).reshape(n, h, w)
    off_t = tuple((int(a), int(b)) for a, b in offs)
    if radius is None:
        norms = np.hypot(offs[:, 0], offs[:, 1]) if n else np.zeros(1)
        radius = int(np.ceil(norms.max() - 0.5)) if n else 1
    symmetric = bool(n) and all((-a, -b) in set(off_t) for a, b in off_t)
    kernel = AffinityKernel(off_t, radius, gap, symmetric=symmetric)
    return AffinityMap(kernel, values.astype(np.float32), valid.astype(bool))


def write_affinity(path, aff: AffinityMap) -> None:
    atomic_write(path, affinity_to_bytes(aff))


def read_affinity(path, radius: Optional[int] = None, gap: int = 1) -> AffinityMap:
    return affinity_from_bytes(Path(path).read_bytes(), radius, gap)
