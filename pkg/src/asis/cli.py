"""Command-line entry point: ``asis <command> [flags]``.

Every command writes into an output directory and leaves a ``run.meta`` file
there that echoes the full configuration.  Failures print a single line
``error: <kind>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import __version__
from . import io as aio
from .affinity import corrupt_affinity, gt_affinity, semantic_from_instances
from .errors import AsisError, FormatError, ParameterError
from .evaluate import EvalConfig, detections_from_result, evaluate
from .graphmerge import DEFAULT_MERGE_THRESHOLD, DEFAULT_MIN_INSTANCE_PX, segment
from .kernel import (adapt_kernel_params, generate_asis_kernel, generate_symmetric_kernel,
                     measure_gap_stats)
from .metrics import dataset_report, reports_to_csv
from .raster import InstanceMap
from .synth import FAMILIES, generate_suite

# scenes per family in the default suite used by ``synth`` and ``pipeline``
DEFAULT_SCENES = 10
DEFAULT_SIZE = 256
N_CLASSES = len(FAMILIES) + 1


class UsageError(AsisError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single machine-parseable line instead of usage text
        raise UsageError(message)


# -- shared helpers -------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def write_run_meta(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    lines = ["# asis run", f"command={command}", f"version={__version__}"]
    for key in sorted(vars(args)):
        if key in ("func", "config"):
            continue
        val = getattr(args, key)
        if isinstance(val, (list, tuple)):
            val = ",".join(map(str, val))
        lines.append(f"{key}={val}")
    aio.atomic_write(out_dir / "run.meta", ("\n".join(lines) + "\n").encode("utf-8"))


@contextmanager
def _executor(threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex
    else:
        yield None


@contextmanager
def _pool(threads: int):
    with _executor(threads) as ex:
        yield map if ex is None else ex.map


def _families(text: str) -> list[str]:
    fams = [f.strip() for f in text.split(",") if f.strip()]
    if fams == ["all"]:
        return list(FAMILIES)
    bad = [f for f in fams if f not in FAMILIES]
    if bad or not fams:
        raise ParameterError(f"unknown families {bad}; choose from {','.join(FAMILIES)}")
    return fams


def _size(text) -> tuple[int, int]:
    parts = str(text).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise ParameterError(f"bad size {text!r}; use N or WxH") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise ParameterError(f"bad size {text!r}; use N or WxH")
    return dims[0], dims[1]


def _thresholds(text: Optional[str]) -> EvalConfig:
    if not text:
        return EvalConfig()
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise ParameterError(f"bad IoU threshold list {text!r}") from None
    return EvalConfig(iou_thresholds=vals)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ParameterError(f"{what} directory {p} does not exist")
    return p


def _scene_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


class Dataset:
    """Scenes of a directory: ``manifest.csv`` rows if present, else every PNG with a sidecar."""

    def __init__(self, root):
        self.root = _require_dir(root, "dataset")
        man = self.root / "manifest.csv"
        if man.exists():
            with open(man, newline="", encoding="utf-8") as f:
                rows = list(csv.DictReader(f))
            self.entries = [(r["family"], r["path"]) for r in rows]
        else:
            self.entries = []
            for png in sorted(self.root.rglob("*.png")):
                if aio.sidecar_path(png).exists():
                    rel = png.relative_to(self.root).as_posix()
                    fam = png.parent.name if png.parent != self.root else "dataset"
                    self.entries.append((fam, rel))
        if not self.entries:
            raise ParameterError(f"no instance maps found under {self.root}")

    def load(self, index: int) -> InstanceMap:
        return aio.read_instance_map(self.root / self.entries[index][1])

    def families(self) -> list[str]:
        return sorted({f for f, _ in self.entries})

    def indices(self, family: str) -> list[int]:
        return [i for i, (f, _) in enumerate(self.entries) if f == family]


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    fams = _families(args.families)
    if args.scenes < 1:
        raise ParameterError("--scenes must be >= 1")
    with _executor(args.threads) as ex:
        rows = generate_suite(fams, args.scenes, args.seed, out, canvas=_size(args.size),
                              executor=ex)
    write_run_meta(out, "synth", args)
    print(f"wrote {len(rows)} scenes to {out}")
    return 0


def cmd_stats(args) -> int:
    ds = Dataset(args.data)
    out = Path(args.out)
    with _pool(args.threads) as pmap:
        maps = list(pmap(ds.load, range(len(ds.entries))))
    rows = []
    for fam in ds.families():
        rep = dataset_report([maps[i] for i in ds.indices(fam)])
        aio.atomic_write(out / f"stats_{fam}.txt", rep.to_text(fam).encode("utf-8"))
        rows.append((fam, rep))
    if len(rows) > 1:
        rep = dataset_report(maps)
        aio.atomic_write(out / "stats_all.txt", rep.to_text("all").encode("utf-8"))
        rows.append(("all", rep))
    table = reports_to_csv(rows)
    aio.atomic_write(out / "stats.csv", table.encode("utf-8"))
    write_run_meta(out, "stats", args)
    sys.stdout.write(table)
    return 0


def _make_kernel(args, maps: Optional[list[InstanceMap]]):
    build = generate_symmetric_kernel if args.symmetric else generate_asis_kernel
    if maps is None:
        return build(args.radius, args.gap)
    stats = measure_gap_stats(maps, args.sample_limit)
    r_k, g = adapt_kernel_params(stats, args.coverage_q, args.budget, args.r_max)
    return build(r_k, g)


def cmd_kernel(args) -> int:
    out = Path(args.out)
    if args.data is None:
        if args.radius is None or args.gap is None:
            raise ParameterError("give --data for adaptive parameters, or both --radius and --gap")
        kernels = {"kernel": _make_kernel(args, None)}
    else:
        ds = Dataset(args.data)
        maps = [ds.load(i) for i in range(len(ds.entries))]
        if args.per_family:
            kernels = {fam: _make_kernel(args, [maps[i] for i in ds.indices(fam)])
                       for fam in ds.families()}
        else:
            kernels = {"kernel": _make_kernel(args, maps)}
    for name, k in kernels.items():
        aio.write_kernel(out / f"{name}.txt", k)
        print(f"{name}: r_k={k.radius} g={k.gap} neighbors={len(k.offsets)}")
    write_run_meta(out, "kernel", args)
    return 0


def _kernel_for(kdir: Path, family: str):
    for cand in (kdir / f"{family}.txt", kdir / "kernel.txt"):
        if cand.exists():
            return aio.read_kernel(cand)
    raise ParameterError(f"no kernel for family {family!r} in {kdir}")


def _kernel_source(path):
    p = Path(path)
    if p.is_file():
        k = aio.read_kernel(p)
        return lambda fam: k
    kdir = _require_dir(p, "kernel")
    cache: dict[str, object] = {}

    def get(fam):
        if fam not in cache:
            cache[fam] = _kernel_for(kdir, fam)
        return cache[fam]
    return get


def _aff_path(rel: str) -> str:
    return str(Path(rel).with_suffix(".aff").as_posix())


def cmd_affgen(args) -> int:
    ds = Dataset(args.data)
    out = Path(args.out)
    kernel_of = _kernel_source(args.kernel)
    if not 0 <= args.flip_rate <= 1:
        raise ParameterError("--flip-rate must be in [0, 1]")
    # resolve kernels up front so a missing one fails before any work
    kernels = {fam: kernel_of(fam) for fam in ds.families()}

    def job(i):
        fam, rel = ds.entries[i]
        aff = gt_affinity(ds.load(i), kernels[fam])
        if args.flip_rate > 0 or args.jitter_sd > 0:
            aff = corrupt_affinity(aff, args.flip_rate, args.jitter_sd, _scene_seed(args.seed, i))
        aio.write_affinity(out / _aff_path(rel), aff)
        return {"family": fam, "path": rel, "affinity": _aff_path(rel),
                "radius": aff.kernel.radius, "gap": aff.kernel.gap}

    with _pool(args.threads) as pmap:
        rows = list(pmap(job, range(len(ds.entries))))
    _write_csv(out / "manifest.csv", rows)
    write_run_meta(out, "affgen", args)
    print(f"wrote {len(rows)} affinity maps to {out}")
    return 0


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    aio.atomic_write(path, buf.getvalue().encode("utf-8"))


def cmd_segment(args) -> int:
    adir = _require_dir(args.aff, "affinity")
    ds = Dataset(args.data)
    out = Path(args.out)
    man = adir / "manifest.csv"
    if not man.exists():
        raise ParameterError(f"{man} not found; run affgen first")
    with open(man, newline="", encoding="utf-8") as f:
        arows = list(csv.DictReader(f))
    by_path = {rel: i for i, (_, rel) in enumerate(ds.entries)}

    def job(row):
        i = by_path.get(row["path"])
        if i is None:
            raise ParameterError(f"scene {row['path']} is not in {ds.root}")
        aff = aio.read_affinity(adir / row["affinity"], int(row["radius"]), int(row["gap"]))
        sem = semantic_from_instances(ds.load(i), args.correct_prob, _scene_seed(args.seed, i),
                                      n_classes=N_CLASSES, flip_prob=args.semantic_flip)
        res = segment(aff, sem, args.merge_threshold, args.min_instance_px)
        aio.write_result(out / row["path"], res, extra={"family": row["family"]})
        return {"family": row["family"], "path": row["path"],
                "instances": len(res.confidences)}

    with _pool(args.threads) as pmap:
        rows = list(pmap(job, arows))
    _write_csv(out / "manifest.csv", rows)
    write_run_meta(out, "segment", args)
    print(f"segmented {len(rows)} scenes into {out}")
    return 0


def _evaluate_dirs(results: Path, ds: Dataset, config: EvalConfig):
    """Per-family EvalResults plus the equal-weight average over families."""
    out = {}
    for fam in ds.families():
        dets, gts = [], []
        for i in ds.indices(fam):
            rel = ds.entries[i][1]
            if not (results / rel).exists():
                raise ParameterError(f"missing result for {rel} in {results}")
            dets.append(detections_from_result(aio.read_result(results / rel)))
            gts.append(ds.load(i))
        out[fam] = evaluate(dets, gts, config)
    return out


def _eval_table(per_family) -> tuple[str, float]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    first = next(iter(per_family.values()))
    w.writerow(["family"] + [f"AP@{t:.2f}" for t in first.thresholds] + ["mmAP"])
    for fam, res in per_family.items():
        w.writerow([fam] + [f"{x:.6f}" for x in res.ap_per_threshold] + [f"{res.mmap:.6f}"])
    mean = float(np.mean([r.mmap for r in per_family.values()]))
    w.writerow(["mean"] + [""] * len(first.thresholds) + [f"{mean:.6f}"])
    return buf.getvalue(), mean


def cmd_eval(args) -> int:
    results = _require_dir(args.results, "results")
    ds = Dataset(args.data)
    out = Path(args.out)
    config = _thresholds(args.iou_thresholds)
    config.class_aware = not args.class_agnostic
    per_family = _evaluate_dirs(results, ds, config)
    table, mean = _eval_table(per_family)
    aio.atomic_write(out / "eval.csv", table.encode("utf-8"))
    text = "".join(f"# family={fam}\n{res.to_text()}" for fam, res in per_family.items())
    text += f"# mean over families\nmmAP={mean:.6f}\n"
    aio.atomic_write(out / "eval.txt", text.encode("utf-8"))
    write_run_meta(out, "eval", args)
    print(f"mmAP={mean:.6f}")
    return 0


def instance_color(instance_id: int, salt: int = 0) -> tuple[int, int, int]:
    """Deterministic RGB color for an instance id; never pure black."""
    digest = hashlib.blake2b(f"{instance_id}:{salt}".encode(), digest_size=3).digest()
    rgb = tuple(64 + b * 191 // 255 for b in digest)
    return rgb  # type: ignore[return-value]


def colorize(labels: np.ndarray) -> np.ndarray:
    ids = [int(i) for i in np.unique(labels) if i != 0]
    palette = np.zeros((int(labels.max(initial=0)) + 1, 3), dtype=np.uint8)
    used = {(0, 0, 0)}
    for i in ids:
        salt = 0
        c = instance_color(i)
        while c in used:  # keep colors distinct within one image
            salt += 1
            c = instance_color(i, salt)
        used.add(c)
        palette[i] = c
    return palette[labels]


def cmd_viz(args) -> int:
    out = Path(args.out)
    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.exists():
            raise ParameterError(f"input {p} does not exist")
    for p in inputs:
        imap = aio.read_instance_map(p)
        rgb = colorize(imap.labels)
        buf = io.BytesIO()
        Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
        aio.atomic_write(out / f"{p.stem}_viz.png", buf.getvalue())
    write_run_meta(out, "viz", args)
    print(f"wrote {len(inputs)} images to {out}")
    return 0


def cmd_pipeline(args) -> int:
    out = Path(args.out)
    fams = ",".join(_families(args.families))
    common = dict(threads=args.threads, seed=args.seed)
    steps = [
        ("synth", cmd_synth, dict(out=str(out / "data"), families=fams, scenes=args.scenes,
                                  size=args.size)),
        ("kernel", cmd_kernel, dict(out=str(out / "kernel"), data=str(out / "data"),
                                    per_family=True, radius=None, gap=None, symmetric=False,
                                    coverage_q=args.coverage_q, budget=args.budget,
                                    r_max=args.r_max, sample_limit=None)),
        ("affgen", cmd_affgen, dict(out=str(out / "aff"), data=str(out / "data"),
                                    kernel=str(out / "kernel"), flip_rate=args.flip_rate,
                                    jitter_sd=args.jitter_sd)),
        ("segment", cmd_segment, dict(out=str(out / "results"), aff=str(out / "aff"),
                                      data=str(out / "data"), correct_prob=1.0,
                                      semantic_flip=0.0, merge_threshold=args.merge_threshold,
                                      min_instance_px=args.min_instance_px)),
        ("eval", cmd_eval, dict(out=str(out / "eval"), results=str(out / "results"),
                                data=str(out / "data"), iou_thresholds=None,
                                class_agnostic=False)),
    ]
    for name, fn, kw in steps:
        fn(argparse.Namespace(**common, **kw))
    per_family = _evaluate_dirs(out / "results", Dataset(out / "data"), EvalConfig())
    table, mean = _eval_table(per_family)
    aio.atomic_write(out / "report.csv", table.encode("utf-8"))
    write_run_meta(out, "pipeline", args)
    print(f"pipeline mmAP={mean:.6f}")
    return 0


# -- argument parsing -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with defaults for any flag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="per-image worker threads")


def _kernel_flags(p) -> None:
    p.add_argument("--coverage-q", type=float, default=0.95)
    p.add_argument("--budget", type=int, default=64, help="neighbor budget for adaptive g")
    p.add_argument("--r-max", type=int, default=64)


def _merge_flags(p) -> None:
    p.add_argument("--merge-threshold", type=float, default=DEFAULT_MERGE_THRESHOLD)
    p.add_argument("--min-instance-px", type=int, default=DEFAULT_MIN_INSTANCE_PX)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asis", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"asis {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic suite")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--families", default="all")
    p.add_argument("--scenes", type=int, default=DEFAULT_SCENES, help="scenes per family")
    p.add_argument("--size", default=str(DEFAULT_SIZE), help="N or WxH")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset statistics table")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("kernel", help="write an affinity kernel")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset for adaptive parameters")
    p.add_argument("--radius", type=int)
    p.add_argument("--gap", type=int)
    p.add_argument("--symmetric", action="store_true")
    p.add_argument("--per-family", action="store_true")
    p.add_argument("--sample-limit", type=int)
    _kernel_flags(p)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("affgen", help="ground-truth (optionally corrupted) affinity maps")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--kernel", required=True, help="kernel file or directory of per-family kernels")
    p.add_argument("--out", required=True)
    p.add_argument("--flip-rate", "--noise", dest="flip_rate", type=float, default=0.0)
    p.add_argument("--jitter-sd", type=float, default=0.0)
    p.set_defaults(func=cmd_affgen)

    p = sub.add_parser("segment", help="graph merge + class assign")
    _common(p)
    p.add_argument("--aff", required=True)
    p.add_argument("--data", required=True, help="ground truth feeding the oracle semantic map")
    p.add_argument("--out", required=True)
    p.add_argument("--correct-prob", type=float, default=1.0)
    p.add_argument("--semantic-flip", type=float, default=0.0)
    _merge_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="mask mmAP against ground truth")
    _common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-thresholds", help="comma list, default 0.50:0.05:0.95")
    p.add_argument("--class-agnostic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="color-hashed instance rendering")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("pipeline", help="synth -> kernel -> affgen -> segment -> eval")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--families", default="all")
    p.add_argument("--scenes", type=int, default=DEFAULT_SCENES)
    p.add_argument("--size", default=str(DEFAULT_SIZE))
    p.add_argument("--flip-rate", "--noise", dest="flip_rate", type=float, default=0.0)
    p.add_argument("--jitter-sd", type=float, default=0.0)
    _kernel_flags(p)
    _merge_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
        # set_defaults bypasses type conversion; coerce from the action types
        for a in sub._actions:
            val = getattr(args, a.dest, None)
            if a.dest in cfg and isinstance(val, str):
                if a.type is not None:
                    setattr(args, a.dest, a.type(val))
                elif a.const is True:  # store_true
                    setattr(args, a.dest, val.lower() in ("1", "true", "yes", "on"))
    if getattr(args, "threads", 1) < 1:
        raise ParameterError("--threads must be >= 1")
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return args.func(args)
    except AsisError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.kind}: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
