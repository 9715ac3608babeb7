"""End-to-end acceptance runs.  Each test records one pass/fail line."""

import hashlib
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from asis.affinity import AffinityMap, corrupt_affinity, gt_affinity, semantic_from_instances
from asis.cli import main, read_config
from asis.evaluate import Detection, detections_from_result, evaluate, mask_iou
from asis.evaluate import average_precision
from asis.graphmerge import build_graph, graph_merge, segment
from asis.kernel import (AffinityKernel, adapt_kernel_params, bridging_gap, deduplicate_symmetric,
                         generate_asis_kernel, gmis_kernel, measure_gap_stats)
from asis.metrics import avg_max_iou, box_regions, ccpi, dataset_report, hull_regions, overlap_of_sum
from asis.raster import InstanceMap
from asis.synth import FAMILIES, default_spec, generate_scene, scene_seed
from oracles import (ap_exhaustive, flood_fill_count, max_iou_exhaustive,
                     overlap_of_sum_by_counting, pixel_iou)

ROOT = Path(__file__).resolve().parents[1]
N_CLASSES = len(FAMILIES) + 1
ORACLE_SCENES = 50
STANDARD_SCENES = 10
FLIP_RATES = (0.0, 0.02, 0.05, 0.10)


def family_maps(family, n, base_seed=0):
    return [generate_scene(default_spec(family, seed=scene_seed(base_seed, family, i))).instance_map
            for i in range(n)]


def run_suite(maps, kernel, flip=0.0, threshold=0.0):
    dets = []
    for j, m in enumerate(maps):
        aff = gt_affinity(m, kernel)
        if flip:
            aff = corrupt_affinity(aff, flip, 0.0, j)
        sem = semantic_from_instances(m, 1.0, n_classes=N_CLASSES)
        dets.append(detections_from_result(segment(aff, sem, merge_threshold=threshold)))
    return dets


@pytest.fixture(scope="module")
def oracle_suite():
    """Criterion 1 data: maps, per-family adaptive kernels, per-scene max gaps, timing."""
    t0 = time.process_time()
    out = {}
    for fam in FAMILIES:
        maps = family_maps(fam, ORACLE_SCENES)
        kernel = generate_asis_kernel(*adapt_kernel_params(measure_gap_stats(maps)))
        gaps = [max(bridging_gap(mask) for _, mask in m.masks()) for m in maps]
        dets = run_suite(maps, kernel)
        out[fam] = dict(maps=maps, kernel=kernel, gaps=gaps, dets=dets)
    out["_seconds"] = time.process_time() - t0
    return out


def test_criterion_1_oracle_round_trip(oracle_suite, acceptance_log):
    per_family, sub_dets, sub_maps, bad = {}, [], [], 0
    for fam in FAMILIES:
        s = oracle_suite[fam]
        per_family[fam] = evaluate(s["dets"], s["maps"]).mmap
        for d, m, g in zip(s["dets"], s["maps"], s["gaps"]):
            if g <= s["kernel"].radius:
                sub_dets.append(d)
                sub_maps.append(m)
                bad += abs(evaluate([d], [m]).mmap - 1.0) > 1e-3
    overall = float(np.mean(list(per_family.values())))
    subset = evaluate(sub_dets, sub_maps).mmap
    seconds = oracle_suite["_seconds"]
    ok_overall, ok_subset, ok_time = overall >= 0.95, abs(subset - 1.0) <= 1e-3, seconds <= 600
    fams = " ".join(f"{f}={v:.4f}" for f, v in per_family.items())
    acceptance_log(1, ok_overall and ok_subset and ok_time,
                   f"overall mmAP {overall:.4f} (>=0.95: {ok_overall}); "
                   f"reachable subset mmAP {subset:.4f} over {len(sub_maps)} scenes, "
                   f"{bad} scenes off 1.0 (==1.0: {ok_subset}); "
                   f"cpu {seconds:.0f}s (<=600: {ok_time}); {fams}")
    assert ok_overall, per_family
    assert ok_time
    assert ok_subset, f"subset mmAP {subset:.4f}, {bad} scenes below 1.0"


def random_symmetric_kernel(rng):
    radius = int(rng.integers(2, 20))
    pts = set()
    while not pts:
        for _ in range(int(rng.integers(1, 60))):
            dy, dx = (int(v) for v in rng.integers(-radius, radius + 1, 2))
            if (dy or dx) and dy * dy + dx * dx <= radius * radius:
                pts |= {(dy, dx), (-dy, -dx)}
    return AffinityKernel(tuple(sorted(pts)), radius, 1, symmetric=True)


def test_criterion_2_kernel_accounting(acceptance_log):
    k56 = gmis_kernel()
    ok = len(k56) == 56 and len(deduplicate_symmetric(k56)) == 28
    rng = np.random.default_rng(2)
    halved = 0
    for _ in range(100):
        k = random_symmetric_kernel(rng)
        halved += 2 * len(deduplicate_symmetric(k)) == len(k)
    ok = ok and halved == 100
    acceptance_log(2, ok, f"56 -> {len(deduplicate_symmetric(k56))}; "
                          f"{halved}/100 random symmetric kernels halved exactly")
    assert ok


def twelve_pixel_gap_fixture():
    # a 6px-thick bar whose middle 12 columns are covered by background
    labels = np.zeros((30, 120), np.int32)
    labels[12:18, 10:54] = 1
    labels[12:18, 66:110] = 1
    imap = InstanceMap(labels, {1: 1})
    assert np.isclose(bridging_gap(labels == 1), 13.0)  # 12 blank columns, centers 13 apart
    return imap


def test_criterion_3_reachability(acceptance_log):
    imap = twelve_pixel_gap_fixture()
    fg = imap.foreground()
    counts = {}
    for r_k, g in [(8, 1), (16, 1), (8, 2), (16, 3)]:
        res = graph_merge(build_graph(gt_affinity(imap, generate_asis_kernel(r_k, g)), fg))
        counts[(r_k, g)] = len(res.instance_map.instance_ids())
        if counts[(r_k, g)] == 1:
            assert np.array_equal(res.instance_map.labels, imap.labels)
    ok = counts[(8, 1)] == counts[(8, 2)] == 2 and counts[(16, 1)] == counts[(16, 3)] == 1
    acceptance_log(3, ok, "instances by (r_k, g): "
                   + ", ".join(f"{k}={v}" for k, v in counts.items()))
    assert ok


def random_fixture(rng):
    h, w = (int(v) for v in rng.integers(4, 33, 2))
    labels = np.zeros((h, w), np.int32)
    n = int(rng.integers(1, 6))
    for i in range(1, n + 1):
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        hh, ww = int(rng.integers(1, h - y + 1)), int(rng.integers(1, w - x + 1))
        blob = rng.random((hh, ww)) < 0.7
        labels[y:y + hh, x:x + ww][blob] = i
    ids = [int(i) for i in np.unique(labels) if i]
    return InstanceMap(labels, {i: 1 + i % 2 for i in ids})


def test_criterion_4_metric_oracles(acceptance_log):
    rng = np.random.default_rng(4)
    worst = dict(oos_bbox=0.0, oos_convex=0.0, max_iou=0.0, ccpi=0.0, mask_iou=0.0, ap=0.0)
    used = 0
    while used < 200:
        m = random_fixture(rng)
        if not m.instance_ids():
            continue
        used += 1
        boxes, hulls = box_regions(m), hull_regions(m)
        worst["oos_bbox"] = max(worst["oos_bbox"], abs(overlap_of_sum(boxes)
                                                       - overlap_of_sum_by_counting(boxes)))
        worst["oos_convex"] = max(worst["oos_convex"], abs(overlap_of_sum(hulls)
                                                           - overlap_of_sum_by_counting(hulls)))
        worst["max_iou"] = max(worst["max_iou"], abs(avg_max_iou(m) - max_iou_exhaustive(m.labels)))
        ref_ccpi = np.mean([flood_fill_count(mask, 8) for _, mask in m.masks()])
        worst["ccpi"] = max(worst["ccpi"], abs(ccpi(m) - ref_ccpi))
        gts = [mask for _, mask in m.masks()]
        # detections: noisy copies of GT plus a random blob, random confidences
        dets = []
        for g in gts:
            if rng.random() < 0.8:
                noisy = g ^ (rng.random(g.shape) < 0.1)
                if noisy.any():
                    dets.append(Detection(noisy, 1, float(rng.integers(1, 10)) / 10))
        blob = rng.random(m.labels.shape) < 0.2
        if blob.any():
            dets.append(Detection(blob, 1, float(rng.integers(1, 10)) / 10))
        for d in dets:
            for g in gts:
                worst["mask_iou"] = max(worst["mask_iou"], abs(mask_iou(d.mask, g) - pixel_iou(d.mask, g)))
        flat = InstanceMap(m.labels, {i: 1 for i in m.instance_ids()})
        order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
        ranked = [(dets[k].mask, dets[k].confidence) for k in order]
        for t in (0.5, 0.75):
            worst["ap"] = max(worst["ap"], abs(average_precision(dets, flat, t)
                                               - ap_exhaustive(ranked, gts, t)))
    ok = all(v <= 1e-9 for v in worst.values())
    acceptance_log(4, ok, f"{used} fixtures, max abs deviation "
                   + " ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert ok, worst


def test_criterion_5_dataset_signatures(oracle_suite, acceptance_log):
    reps = {fam: dataset_report(oracle_suite[fam]["maps"]) for fam in FAMILIES}
    in_range = all(0 <= r.oos_bbox < 1 and 0 <= r.oos_convex < 1 for r in reps.values())
    checks = {
        "fence CCPI>=10": reps["fence"].ccpi >= 10,
        "log aspect>=10": reps["log"].mean_aspect_ratio >= 10,
        "wire bbox OoS>=0.5": reps["wire"].oos_bbox >= 0.5,
        "all OoS in [0,1)": in_range,
    }
    ok = all(checks.values())
    acceptance_log(5, ok, f"fence CCPI {reps['fence'].ccpi:.1f}, "
                          f"log aspect {reps['log'].mean_aspect_ratio:.2f}, "
                          f"wire bbox OoS {reps['wire'].oos_bbox:.3f}, "
                          f"OoS range ok {in_range}")
    assert ok, checks


def test_criterion_6_noise_monotonicity(acceptance_log):
    threshold = float(read_config(ROOT / "configs" / "robustness.cfg")["merge_threshold"])
    scores = {f: [] for f in FLIP_RATES}
    for fam in FAMILIES:
        maps = family_maps(fam, STANDARD_SCENES)
        kernel = generate_asis_kernel(*adapt_kernel_params(measure_gap_stats(maps)))
        for f in FLIP_RATES:
            scores[f].append(evaluate(run_suite(maps, kernel, f, threshold), maps).mmap)
    suite = [float(np.mean(scores[f])) for f in FLIP_RATES]
    monotone = all(b <= a + 1e-12 for a, b in zip(suite, suite[1:]))
    at5 = suite[FLIP_RATES.index(0.05)]
    ok = monotone and at5 >= 0.80
    acceptance_log(6, ok, f"merge_threshold {threshold}; suite mmAP by flip rate "
                   + ", ".join(f"{f}: {s:.4f}" for f, s in zip(FLIP_RATES, suite))
                   + f"; non-increasing: {monotone}; at 0.05 >= 0.80: {at5 >= 0.80}")
    assert monotone
    assert at5 >= 0.80, f"mmAP at 5% flips is {at5:.4f}"


def tree_hashes(root: Path) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_pipeline_determinism(tmp_path, capsys, acceptance_log):
    out = tmp_path / "run"
    argv = ["pipeline", "--out", str(out), "--flip-rate", "0", "--seed", "0"]
    assert main(argv) == 0
    first = tree_hashes(out)
    reported = float(capsys.readouterr().out.strip().rsplit("=", 1)[1])
    shutil.rmtree(out)
    assert main(argv) == 0
    second = tree_hashes(out)
    same = first == second
    ok = same and reported >= 0.95
    acceptance_log(7, ok, f"{len(first)} files, identical hashes: {same}; "
                          f"default-suite pipeline mmAP {reported:.4f}")
    assert same
    assert reported >= 0.95


def test_criterion_8_performance(acceptance_log):
    m = generate_scene(default_spec("antenna", canvas=(512, 512), seed=8)).instance_map
    kernel = generate_asis_kernel(10, 2)
    aff = gt_affinity(m, kernel)
    sem = semantic_from_instances(m, 1.0, n_classes=N_CLASSES)
    # a small crop first so compilation is not billed to the measured run
    crop = (slice(None), slice(0, 32), slice(0, 32))
    segment(AffinityMap(kernel, aff.values[crop].copy(), aff.validity[crop].copy()), sem[crop])
    t0 = time.perf_counter()
    res = segment(aff, sem)
    seconds = time.perf_counter() - t0
    ok = seconds < 10.0
    acceptance_log(8, ok, f"512x512 antenna scene, {len(kernel)} neighbors, "
                          f"{int(m.foreground().sum())} fg px, {seconds:.2f}s, "
                          f"{len(res.confidences)} instances")
    assert ok
