"""Affinity-kernel instance segmentation for irregular shapes, plus dataset statistics,
mask mmAP evaluation and a procedural scene generator."""

__version__ = "0.1.0"

from .affinity import AffinityMap, corrupt_affinity, gt_affinity, semantic_from_instances
from .errors import (AsisError, ContractError, EmptyMaskError, FormatError, GenerationError,
                     ParameterError)
from .evaluate import Detection, EvalConfig, average_precision, evaluate, mask_iou, mmap
from .graphmerge import (PixelGraph, SegmentationResult, build_graph, class_assign,
                         graph_merge, segment)
from .kernel import (AffinityKernel, DatasetGapStats, adapt_kernel_params,
                     deduplicate_symmetric, generate_asis_kernel, generate_symmetric_kernel,
                     measure_gap_stats)
from .metrics import aspect_ratio_stats, avg_max_iou, ccpi, dataset_report, overlap_of_sum
from .raster import (InstanceMap, RotatedRect, bounding_box, connected_components, convex_hull,
                     min_area_rect)
from .synth import SceneSpec, generate_scene, generate_suite
