"""Dataset statistics: overlap of sum, MaxIoU, components per instance, aspect ratio."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .raster import (InstanceMap, convex_hull, count_components,
                     min_area_rect, rasterize_polygon)

__all__ = [
    "DatasetReport",
    "overlap_of_sum",
    "avg_max_iou",
    "ccpi",
    "aspect_ratio_stats",
    "dataset_report",
    "instance_boxes",
    "hull_regions",
    "box_regions",
]

# column names as they appear in the statistics table
TABLE_COLUMNS = ["Dataset", "Images", "Instances", "Instances/image", "OoS bbox",
                 "OoS convex", "Average MaxIoU", "Aspect ratio", "CCPI"]


@dataclass
class DatasetReport:
    images: int
    instances: int
    instances_per_image: float
    oos_bbox: float
    oos_convex: float
    avg_max_iou: float
    mean_aspect_ratio: float
    ccpi: float

    def to_text(self, name: str = "dataset") -> str:
        lines = [f"# dataset={name}",
                 "# aspect_ratio and ccpi are averaged over instances; "
                 "oos and max_iou over images"]
        for k, v in asdict(self).items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"

    def table_row(self, name: str = "dataset") -> list:
        return [name, self.images, self.instances, f"{self.instances_per_image:.2f}",
                f"{self.oos_bbox:.4f}", f"{self.oos_convex:.4f}", f"{self.avg_max_iou:.4f}",
                f"{self.mean_aspect_ratio:.4f}", f"{self.ccpi:.4f}"]


def reports_to_csv(rows: Sequence[tuple[str, DatasetReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for name, rep in rows:
        w.writerow(rep.table_row(name))
    return buf.getvalue()


def overlap_of_sum(regions: Sequence[np.ndarray]) -> float:
    """``1 - |union| / sum |C_i|`` with areas as pixel counts; 0 for no regions."""
    if len(regions) == 0:
        return 0.0
    stack = np.asarray(regions, dtype=bool)
    total = int(stack.sum())
    if total == 0:
        return 0.0
    union = int(np.logical_or.reduce(stack, axis=0).sum())
    return 1.0 - union / total


def instance_boxes(imap: InstanceMap) -> dict[int, tuple[int, int, int, int]]:
    """Inclusive boxes for every instance, computed in one pass."""
    from scipy import ndimage

    ids = imap.instance_ids()
    if not ids:
        return {}
    slices = ndimage.find_objects(imap.labels)
    out = {}
    for i in ids:
        sy, sx = slices[i - 1]
        out[i] = (sx.start, sy.start, sx.stop - 1, sy.stop - 1)
    return out


def box_regions(imap: InstanceMap) -> list[np.ndarray]:
    out = []
    for x0, y0, x1, y1 in instance_boxes(imap).values():
        r = np.zeros(imap.labels.shape, dtype=bool)
        r[y0:y1 + 1, x0:x1 + 1] = True
        out.append(r)
    return out


def hull_regions(imap: InstanceMap) -> list[np.ndarray]:
    return [rasterize_polygon(convex_hull(m), imap.width, imap.height) | m
            for _, m in imap.masks()]


def _box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(ix, 0) * max(iy, 0)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def avg_max_iou(imap: InstanceMap, use_masks: bool = False) -> float:
    """Mean over instances of the best IoU with any other instance.

    Boxes are used by default; ``use_masks`` switches to mask IoU.  A single
    instance scores 0; an empty map scores 0 and emits a warning.
    """
    ids = imap.instance_ids()
    if not ids:
        warnings.warn("avg_max_iou on a map without instances", RuntimeWarning, stacklevel=2)
        return 0.0
    if len(ids) == 1:
        return 0.0
    if use_masks:
        from .evaluate import mask_iou

        masks = [m for _, m in imap.masks()]
        iou = np.array([[mask_iou(a, b) for b in masks] for a in masks])
    else:
        boxes = list(instance_boxes(imap).values())
        iou = np.array([[_box_iou(a, b) for b in boxes] for a in boxes])
    np.fill_diagonal(iou, -np.inf)
    return float(iou.max(axis=1).mean())


def ccpi(imap: InstanceMap, connectivity: int = 8) -> float:
    """Mean number of connected components per instance (0 for an empty map)."""
    counts = [count_components(m, connectivity) for _, m in imap.masks()]
    return float(np.mean(counts)) if counts else 0.0


def instance_aspect_ratios(imap: InstanceMap) -> list[float]:
    return [min_area_rect(m).aspect_ratio for _, m in imap.masks()]


def aspect_ratio_stats(imap: InstanceMap) -> float:
    r = instance_aspect_ratios(imap)
    return float(np.mean(r)) if r else 0.0


def dataset_report(maps: Sequence[InstanceMap]) -> DatasetReport:
    if not maps:
        raise ParameterError("dataset_report needs at least one map")
    n_inst = 0
    oos_b, oos_c, miou = [], [], []
    ratios: list[float] = []
    comps: list[int] = []
    for m in maps:
        ids = m.instance_ids()
        n_inst += len(ids)
        oos_b.append(overlap_of_sum(box_regions(m)))
        oos_c.append(overlap_of_sum(hull_regions(m)))
        if ids:
            miou.append(avg_max_iou(m))
        ratios += instance_aspect_ratios(m)
        comps += [count_components(mask) for _, mask in m.masks()]
    return DatasetReport(
        images=len(maps),
        instances=n_inst,
        instances_per_image=n_inst / len(maps),
        oos_bbox=float(np.mean(oos_b)),
        oos_convex=float(np.mean(oos_c)),
        avg_max_iou=float(np.mean(miou)) if miou else 0.0,
        mean_aspect_ratio=float(np.mean(ratios)) if ratios else 0.0,
        ccpi=float(np.mean(comps)) if comps else 0.0,
    )
