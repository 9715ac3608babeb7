"""Seeded procedural scenes of thin, hollow and elongated objects.

Each family draws instances as stroked polylines or filled quadrilaterals on a
2-D canvas.  Instances are painted in a random depth order and the topmost
one owns each pixel, so lower instances break into fragments where others
cross them.  Every instance uses its own counter-based random stream keyed by
``(seed, instance index, attempt)``; its geometry does not depend on the
order in which instances are drawn.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .errors import GenerationError, ParameterError
from .raster import InstanceMap, rasterize_polygon

__all__ = [
    "FAMILIES",
    "FAMILY_CLASS",
    "SceneSpec",
    "Scene",
    "default_spec",
    "generate_scene",
    "generate_suite",
    "scene_seed",
    "stroke_polyline",
]

FAMILIES = ("antenna", "branch", "fence", "hanger", "log", "wire")
FAMILY_CLASS = {name: i + 1 for i, name in enumerate(FAMILIES)}

# per-family defaults at a 256 px reference canvas; lengths scale with the canvas
_DEFAULTS = {
    "antenna": dict(instance_count=(5, 10), stroke_width=(4.5, 7.0),
                    family_params={"length": (90.0, 200.0), "max_bends": 2,
                                   "bend_deg": (8.0, 35.0)}),
    "branch": dict(instance_count=(3, 6), stroke_width=(5.0, 8.0),
                   family_params={"depth": (3, 4), "trunk": (55.0, 90.0),
                                  "spread_deg": (20.0, 45.0), "shrink": 0.72}),
    "fence": dict(instance_count=(2, 4), stroke_width=(3.0, 5.0),
                  family_params={"pitch": (22.0, 40.0), "skew_deg": (60.0, 90.0)}),
    "hanger": dict(instance_count=(6, 14), stroke_width=(3.0, 5.0),
                   family_params={"size": (45.0, 80.0)}),
    "log": dict(instance_count=(10, 24), stroke_width=(5.0, 9.0),
                family_params={"aspect": (14.0, 30.0), "scale": (0.6, 1.6),
                               "spread_deg": 25.0}),
    "wire": dict(instance_count=(5, 9), stroke_width=(4.0, 6.0),
                 family_params={"length": (280.0, 480.0), "waviness": 0.9,
                                "controls": 6}),
}


@dataclass(frozen=True)
class SceneSpec:
    family: str
    canvas: tuple[int, int] = (256, 256)  # (W, H)
    instance_count: tuple[int, int] = (1, 1)
    stroke_width: tuple[float, float] = (3.0, 5.0)
    seed: int = 0
    family_params: dict = field(default_factory=dict, hash=False)
    min_visible: int = 32
    max_retries: int = 8

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        w, h = self.canvas
        if w < 64 or h < 64:
            raise ParameterError("canvas must be at least 64x64")
        lo, hi = self.instance_count
        if lo < 1 or hi < lo:
            raise ParameterError(f"bad instance_count range {self.instance_count}")
        a, b = self.stroke_width
        if a <= 0 or b < a:
            raise ParameterError(f"bad stroke_width range {self.stroke_width}")

    @property
    def scale(self) -> float:
        return min(self.canvas) / 256.0


@dataclass
class Scene:
    instance_map: InstanceMap
    spec: SceneSpec
    image: Optional[np.ndarray] = None


def default_spec(family: str, canvas: tuple[int, int] = (256, 256), seed: int = 0,
                 **overrides) -> SceneSpec:
    if family not in _DEFAULTS:
        raise ParameterError(f"unknown family {family!r}")
    d = _DEFAULTS[family]
    scale = min(canvas) / 256.0
    width = tuple(round(x * scale, 3) for x in d["stroke_width"])
    spec = SceneSpec(family=family, canvas=tuple(canvas), instance_count=d["instance_count"],
                     stroke_width=width, seed=seed, family_params=dict(d["family_params"]))
    return replace(spec, **overrides) if overrides else spec


def scene_seed(base_seed: int, family: str, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), FAMILIES.index(family), int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


def _rng(seed: int, *counter: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), *map(int, counter)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# -- stroke rasterization -------------------------------------------------------------


def stroke_polyline(points, widths, height: int, width: int) -> np.ndarray:
    """Pixels within half-width of a polyline; width may vary linearly per vertex.

    ``points`` are ``(x, y)`` rows; ``widths`` is a scalar or one value per point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    wv = np.broadcast_to(np.asarray(widths, dtype=np.float64), (len(pts),))
    out = np.zeros((height, width), dtype=bool)
    if len(pts) == 1:
        pts = np.vstack([pts, pts])
        wv = np.concatenate([wv, wv])
    for i in range(len(pts) - 1):
        (x0, y0), (x1, y1) = pts[i], pts[i + 1]
        r0, r1 = wv[i] / 2, wv[i + 1] / 2
        rmax = max(r0, r1)
        bx0 = max(int(math.floor(min(x0, x1) - rmax)), 0)
        bx1 = min(int(math.ceil(max(x0, x1) + rmax)), width - 1)
        by0 = max(int(math.floor(min(y0, y1) - rmax)), 0)
        by1 = min(int(math.ceil(max(y0, y1) + rmax)), height - 1)
        if bx0 > bx1 or by0 > by1:
            continue
        ys, xs = np.mgrid[by0:by1 + 1, bx0:bx1 + 1].astype(np.float64)
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        if seg2 > 0:
            t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg2, 0.0, 1.0)
        else:
            t = np.zeros_like(xs)
        px, py = x0 + t * dx - xs, y0 + t * dy - ys
        r = r0 + (r1 - r0) * t
        out[by0:by1 + 1, bx0:bx1 + 1] |= px * px + py * py <= r * r
    return out


def _clip(pts: np.ndarray, w: int, h: int) -> np.ndarray:
    pts = pts.copy()
    pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    return pts


def _uniform(rng, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


# -- family geometry ------------------------------------------------------------------


def _draw_wire(spec: SceneSpec, rng) -> np.ndarray:
    w, h = spec.canvas
    p = spec.family_params
    s = spec.scale
    length = _uniform(rng, p["length"]) * s
    n_ctrl = int(p.get("controls", 6))
    step = length / (n_ctrl - 1)
    pos = np.array([rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)])
    heading = rng.uniform(0, 2 * math.pi)
    ctrl = [pos.copy()]
    for _ in range(n_ctrl - 1):
        heading += rng.normal(0.0, p.get("waviness", 0.9))
        nxt = pos + step * np.array([math.cos(heading), math.sin(heading)])
        # turn back inside the canvas rather than leaving it
        if not (0 <= nxt[0] < w and 0 <= nxt[1] < h):
            heading = math.atan2(h / 2 - pos[1], w / 2 - pos[0]) + rng.normal(0.0, 0.5)
            nxt = pos + step * np.array([math.cos(heading), math.sin(heading)])
        pos = nxt
        ctrl.append(pos.copy())
    ctrl = np.array(ctrl)
    t = np.arange(n_ctrl, dtype=np.float64)
    spline = CubicSpline(t, ctrl, bc_type="natural")
    dense = spline(np.linspace(0, n_ctrl - 1, max(int(length / 2), 8)))
    width = _uniform(rng, spec.stroke_width)
    return stroke_polyline(_clip(dense, w, h), width, h, w)


def _draw_antenna(spec: SceneSpec, rng) -> np.ndarray:
    w, h = spec.canvas
    p = spec.family_params
    s = spec.scale
    length = _uniform(rng, p["length"]) * s
    n_bends = int(rng.integers(0, int(p.get("max_bends", 2)) + 1))
    cuts = np.sort(rng.uniform(0.2, 0.8, n_bends))
    fractions = np.diff(np.concatenate([[0.0], cuts, [1.0]]))
    heading = rng.uniform(0, 2 * math.pi)
    center = np.array([rng.uniform(0.15 * w, 0.85 * w), rng.uniform(0.15 * h, 0.85 * h)])
    pts = [np.zeros(2)]
    for k, f in enumerate(fractions):
        if k > 0:
            heading += math.radians(_uniform(rng, p["bend_deg"])) * rng.choice([-1.0, 1.0])
        pts.append(pts[-1] + f * length * np.array([math.cos(heading), math.sin(heading)]))
    pts = np.array(pts)
    pts += center - pts.mean(axis=0)
    width = _uniform(rng, spec.stroke_width)
    return stroke_polyline(_clip(pts, w, h), width, h, w)


def _hanger_template() -> list[np.ndarray]:
    """Unit-size hanger: a triangle body, a neck and a hook arc (y points down)."""
    body = np.array([[-1.0, 0.55], [1.0, 0.55], [0.0, 0.0], [-1.0, 0.55]])
    neck = np.array([[0.0, 0.0], [0.0, -0.18]])
    arc_t = np.linspace(math.pi / 2, -math.pi * 0.85, 16)
    hook = np.column_stack([0.14 * np.cos(arc_t), -0.32 + 0.14 * np.sin(arc_t)])
    hook = np.vstack([[0.0, -0.18], hook])
    return [body, neck, hook]


def _draw_hanger(spec: SceneSpec, rng) -> np.ndarray:
    w, h = spec.canvas
    size = _uniform(rng, spec.family_params["size"]) * spec.scale / 2
    angle = rng.uniform(0, 2 * math.pi)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    center = np.array([rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)])
    width = _uniform(rng, spec.stroke_width)
    out = np.zeros((h, w), dtype=bool)
    for part in _hanger_template():
        pts = part * size @ rot.T + center
        out |= stroke_polyline(_clip(pts, w, h), width, h, w)
    return out


def _draw_fence(spec: SceneSpec, rng) -> np.ndarray:
    w, h = spec.canvas
    p = spec.family_params
    pitch = _uniform(rng, p["pitch"]) * spec.scale
    a1 = rng.uniform(0, math.pi)
    a2 = a1 + math.radians(_uniform(rng, p["skew_deg"]))
    width = _uniform(rng, spec.stroke_width)
    out = np.zeros((h, w), dtype=bool)
    diag = math.hypot(w, h)
    center = np.array([w / 2, h / 2])
    for ang in (a1, a2):
        d = np.array([math.cos(ang), math.sin(ang)])
        nrm = np.array([-d[1], d[0]])
        phase = rng.uniform(0, pitch)
        k = -diag / 2 + phase
        while k <= diag / 2:
            base = center + k * nrm
            seg = np.array([base - diag * d, base + diag * d])
            out |= stroke_polyline(seg, width, h, w)
            k += pitch
    return out


def _draw_log(spec: SceneSpec, rng, pile_angle: float) -> np.ndarray:
    w, h = spec.canvas
    p = spec.family_params
    scale = _uniform(rng, p["scale"]) * spec.scale
    thick = _uniform(rng, spec.stroke_width) * scale
    length = thick * _uniform(rng, p["aspect"])
    ang = pile_angle + math.radians(rng.normal(0.0, p.get("spread_deg", 25.0)))
    d = np.array([math.cos(ang), math.sin(ang)])
    nrm = np.array([-d[1], d[0]])
    c = np.array([rng.uniform(0.05 * w, 0.95 * w), rng.uniform(0.05 * h, 0.95 * h)])
    taper = rng.uniform(0.75, 1.0)
    a, b = c - d * length / 2, c + d * length / 2
    quad = np.array([a + nrm * thick / 2, b + nrm * thick * taper / 2,
                     b - nrm * thick * taper / 2, a - nrm * thick / 2])
    return rasterize_polygon(quad, w, h)


def _draw_branch(spec: SceneSpec, rng) -> np.ndarray:
    w, h = spec.canvas
    p = spec.family_params
    depth = int(rng.integers(p["depth"][0], p["depth"][1] + 1))
    shrink = float(p.get("shrink", 0.72))
    base = np.array([rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)])
    heading = rng.uniform(0, 2 * math.pi)
    trunk = _uniform(rng, p["trunk"]) * spec.scale
    width = _uniform(rng, spec.stroke_width)
    out = np.zeros((h, w), dtype=bool)
    stack = [(base, heading, trunk, width, depth)]
    while stack:
        start, head, length, wid, level = stack.pop()
        end = start + length * np.array([math.cos(head), math.sin(head)])
        tip_w = max(wid * shrink, 2.0)
        seg = _clip(np.array([start, end]), w, h)
        out |= stroke_polyline(seg, [wid, tip_w], h, w)
        if level > 1:
            for sign in (-1.0, 1.0):
                spread = math.radians(_uniform(rng, p["spread_deg"]))
                stack.append((end, head + sign * spread, length * shrink, tip_w, level - 1))
    return out


def _instance_drawer(spec: SceneSpec) -> Callable[[np.random.Generator], np.ndarray]:
    fam = spec.family
    if fam == "log":
        pile = _rng(spec.seed, 999_999).uniform(0, math.pi)
        return lambda rng: _draw_log(spec, rng, pile)
    return {
        "wire": lambda rng: _draw_wire(spec, rng),
        "antenna": lambda rng: _draw_antenna(spec, rng),
        "hanger": lambda rng: _draw_hanger(spec, rng),
        "fence": lambda rng: _draw_fence(spec, rng),
        "branch": lambda rng: _draw_branch(spec, rng),
    }[fam]


# -- composition ----------------------------------------------------------------------


def _compose(masks: list[np.ndarray], depth: list[int], shape) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int32)
    for idx in sorted(range(len(masks)), key=lambda i: depth[i]):
        labels[masks[idx]] = idx + 1
    return labels


def render_image(instance_map: InstanceMap, seed: int) -> np.ndarray:
    """Flat per-instance gray tone plus Gaussian noise, uint8."""
    rng = _rng(seed, 777_777)
    n = int(instance_map.labels.max())
    tones = np.concatenate([[30.0], rng.uniform(120, 230, n)])
    img = tones[instance_map.labels] + rng.normal(0.0, 6.0, instance_map.labels.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(spec: SceneSpec, with_image: bool = False) -> Scene:
    """Draw one scene; deterministic in ``spec``.

    Instances that end up with fewer than ``spec.min_visible`` pixels are
    re-drawn from a fresh stream, then dropped after ``max_retries`` attempts.
    Dropping below the lower instance count raises :class:`GenerationError`.
    """
    spec.validate()
    w, h = spec.canvas
    draw = _instance_drawer(spec)
    count_rng = _rng(spec.seed, 0)
    k = int(count_rng.integers(spec.instance_count[0], spec.instance_count[1] + 1))
    depth = [int(x) for x in count_rng.permutation(k)]
    attempts = [0] * k
    masks = [_largest_component(draw(_rng(spec.seed, 1, i, 0))) for i in range(k)]
    alive = list(range(k))
    while True:
        labels = _compose([masks[i] for i in alive], [depth[i] for i in alive], (h, w))
        visible = np.bincount(labels.ravel(), minlength=len(alive) + 1)[1:]
        short = [alive[j] for j in range(len(alive)) if visible[j] < spec.min_visible]
        if not short:
            break
        i = short[0]
        attempts[i] += 1
        if attempts[i] <= spec.max_retries:
            masks[i] = _largest_component(draw(_rng(spec.seed, 1, i, attempts[i])))
        else:
            alive.remove(i)
            if len(alive) < spec.instance_count[0]:
                raise GenerationError(
                    f"{spec.family} scene seed={spec.seed}: could not place "
                    f"{spec.instance_count[0]} visible instances on {w}x{h}")
    # renumber survivors 1..K and compact depth to 0..K-1 keeping the order
    rank = {i: r for r, i in enumerate(sorted(alive, key=lambda i: depth[i]))}
    ids = range(1, len(alive) + 1)
    cls = FAMILY_CLASS[spec.family]
    imap = InstanceMap(labels, {i: cls for i in ids},
                       depth_order={j + 1: rank[i] for j, i in enumerate(alive)},
                       meta={"family": spec.family, "seed": str(spec.seed)})
    image = render_image(imap, spec.seed) if with_image else None
    return Scene(imap, spec, image)


# -- suites ---------------------------------------------------------------------------


def generate_suite(families: Sequence[str], scenes_per_family: int, base_seed: int,
                   out_dir, canvas: tuple[int, int] = (256, 256),
                   executor=None) -> list[dict]:
    """Write ``scenes_per_family`` scenes per family plus ``manifest.csv``.

    Scenes land in ``out_dir/<family>/<family>_<index>.png`` with a sidecar.
    Returns the manifest rows.
    """
    from . import io as aio

    out_dir = Path(out_dir)
    jobs = []
    for fam in families:
        if fam not in FAMILIES:
            raise ParameterError(f"unknown family {fam!r}")
        for i in range(scenes_per_family):
            jobs.append((fam, i, scene_seed(base_seed, fam, i)))

    def run(job):
        fam, i, seed = job
        scene = generate_scene(default_spec(fam, canvas=canvas, seed=seed))
        rel = Path(fam) / f"{fam}_{i:04d}.png"
        try:
            aio.write_instance_map(out_dir / rel, scene.instance_map)
        except OSError as exc:
            raise OSError(f"writing {out_dir / rel}: {exc}") from exc
        return {"family": fam, "path": rel.as_posix(), "seed": seed,
                "instance_count": len(scene.instance_map.classes),
                "width": canvas[0], "height": canvas[1]}

    rows = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["family", "path", "seed", "instance_count",
                                             "width", "height"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    aio.atomic_write(out_dir / "manifest.csv", buf.getvalue().encode("utf-8"))
    return rows


def regenerate_from_manifest(row: dict) -> Scene:
    canvas = (int(row["width"]), int(row["height"]))
    return generate_scene(default_spec(row["family"], canvas=canvas, seed=int(row["seed"])))
