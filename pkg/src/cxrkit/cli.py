"""Command-line interface: every pipeline stage as a subcommand.

Exit codes are stable for scripting: 0 success, 1 usage, 2 I/O,
3 empty-pool/precondition (including solver non-convergence), 4 parse.
A plain ``key = value`` config file can supply defaults; explicit flags win.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .attention import residual_map, to_attention
from .blending import MODE_PASTE, MODE_POISSON, SOLVER_CG, SOLVER_GAUSS_SEIDEL, BlendRequest, blend_with_residual
from .errors import ConvergenceError, FormatError
from .evaluation import (
    ThresholdSet,
    dataset_map,
    load_predictions,
    render_report_csv,
    render_report_text,
)
from .fileio import (
    LABEL_ABNORMAL,
    LABEL_NORMAL,
    atomic_write_bytes,
    load_annotations,
    load_image,
    save_annotations,
    save_image,
)
from .image import BBox, Image
from .phantom import generate_phantom_pool
from .registration import AlignOptions, align
from .schedule import ACTIVE_BOTH, ACTIVE_DETECTOR, parse_schedule, phase_for_epoch
from .synthesis import (
    ImagePool,
    PoolEntry,
    SynthesisManifest,
    SynthesisOptions,
    Synthesizer,
    SkipRecord,
    augment_dataset,
    pair_rows,
    write_manifest,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_PRECONDITION = 3
EXIT_PARSE = 4

_CONFIG_KEYS = {
    "reference", "scale", "seed", "levels", "max_iters", "step", "tol",
    "blend_mode", "blend_tol", "blend_max_iters", "blend_solver",
    "alpha", "thresholds", "k", "jobs", "size",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on bad flags (default would be 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _parse_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value
    return out


class _Settings:
    """Flag > config-file > built-in default resolution."""

    def __init__(self, args):
        self.args = args
        self.cfg = _parse_config(args.config) if getattr(args, "config", None) else {}

    def get(self, name, default, cast=str, key=None):
        flag = getattr(self.args, name, None)
        if flag is not None:
            return flag
        key = key or name
        if key in self.cfg:
            try:
                return cast(self.cfg[key])
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        return default

    def align_options(self) -> AlignOptions:
        try:
            return AlignOptions(
                levels=self.get("levels", 4, int),
                max_iters=self.get("max_iters", 200, int),
                step=self.get("step", 0.01, float),
                tol=self.get("tol", 1e-7, float),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def synthesis_options(self) -> SynthesisOptions:
        max_iters = self.get("blend_max_iters", 0, int)
        try:
            return SynthesisOptions(
                align=self.align_options(),
                blend_mode=self.get("blend", MODE_POISSON, str, key="blend_mode"),
                blend_solver=self.get("blend_solver", SOLVER_CG, str),
                blend_tol=self.get("blend_tol", 1e-6, float),
                blend_max_iters=max_iters if max_iters else None,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    st = _Settings(args)
    count = args.count
    seed = st.get("seed", 0, int)
    frac = st.get("abnormal_fraction", 0.5, float)
    size = st.get("size", 128, int)
    if count < 1:
        raise UsageError("--count must be >= 1")
    if not 0.0 <= frac <= 1.0:
        raise UsageError("--abnormal-fraction must lie in [0, 1]")
    if size < 64:
        raise UsageError("--size must be >= 64")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool, annotations = generate_phantom_pool(count, seed, frac, size=size)
    for entry in pool.entries:
        save_image(entry.image, out / f"{entry.id}.pgm")
    save_annotations(annotations, out / "annotations.csv")
    n_abn = len(pool.with_label(LABEL_ABNORMAL))
    print(f"wrote {count} phantoms ({n_abn} abnormal) and annotations.csv to {out}")
    return EXIT_OK


def _load_pool(images_dir, annotations_path, scale: float,
               class_info_path=None, include_not_normal: bool = False) -> ImagePool:
    images_dir = Path(images_dir)
    if not images_dir.is_dir():
        raise FileNotFoundError(f"{images_dir} is not a directory")
    aset = load_annotations(annotations_path, scale=scale,
                            class_info_path=class_info_path)
    entries = []
    skipped_not_normal = 0
    paths = sorted(p for p in images_dir.iterdir()
                   if p.suffix.lower() in (".pgm", ".png"))
    for p in paths:
        pid = p.stem
        rec = aset.records.get(pid)
        if rec is None:
            raise FormatError(f"{p}: no annotation row for patient {pid!r}")
        if rec.label == LABEL_ABNORMAL:
            entries.append(PoolEntry(pid, LABEL_ABNORMAL, load_image(p), rec.boxes))
        elif rec.label == LABEL_NORMAL or include_not_normal:
            entries.append(PoolEntry(pid, LABEL_NORMAL, load_image(p)))
        else:
            # "no opacity / not normal" images join the pool only on request
            skipped_not_normal += 1
    if skipped_not_normal:
        print(f"excluded {skipped_not_normal} 'not normal' image(s); "
              f"pass --include-not-normal to widen the pool", file=sys.stderr)
    if not entries:
        raise ValueError(f"no images found in {images_dir}")
    return ImagePool(tuple(entries))


def cmd_synth(args) -> int:
    st = _Settings(args)
    k = st.get("k", 1, int)
    jobs = st.get("jobs", os.cpu_count() or 1, int)
    scale = st.get("scale", 1.0, float)
    if k < 1:
        raise UsageError("--k must be >= 1")
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    opts = st.synthesis_options()
    ref_path = st.get("reference", None, str)
    if ref_path is None:
        raise UsageError("--reference is required (flag or config)")

    pool = _load_pool(args.images, args.annotations, scale,
                      class_info_path=args.class_info,
                      include_not_normal=args.include_not_normal)
    ref = load_image(ref_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.direction == "abnormal":
        normals = [(e.id, e.image) for e in pool.with_label(LABEL_NORMAL)]
        donors = pool.with_label(LABEL_ABNORMAL)
        if not normals:
            raise ValueError("pool has no normal images to augment")
        if not donors:
            raise ValueError("pool has no abnormal donors")
        manifest = augment_dataset(normals, pool, ref, k, out, opts=opts, jobs=jobs)
    else:
        abnormals = pool.with_label(LABEL_ABNORMAL)
        if not abnormals:
            raise ValueError("pool has no abnormal images to normalize")
        if not pool.with_label(LABEL_NORMAL):
            raise ValueError("pool has no normal donors")
        synth = Synthesizer(pool, ref, opts)
        rows, skips = [], []
        for e in abnormals:
            try:
                pair = synth.pseudo_normal((e.id, e.image, e.boxes))
            except (ValueError, KeyError, ConvergenceError) as exc:
                skips.append(SkipRecord(input_id=e.id, reason=str(exc)))
                continue
            prows = pair_rows(pair)
            save_image(pair.counterpart, out / f"{prows[0].pair_id}.pgm")
            rows.extend(prows)
        manifest = SynthesisManifest(rows=tuple(rows), skips=tuple(skips))

    write_manifest(manifest, out / "manifest.csv")
    for skip in manifest.skips:
        print(f"skipped {skip.input_id}: {skip.reason}", file=sys.stderr)
    n_pairs = len({r.pair_id for r in manifest.rows})
    print(f"synthesized {n_pairs} pair(s), {len(manifest.rows)} box row(s), "
          f"{len(manifest.skips)} skip(s); manifest at {out / 'manifest.csv'}")
    if n_pairs == 0:
        print("no pair succeeded", file=sys.stderr)
        return EXIT_PRECONDITION
    return EXIT_OK


def cmd_evaluate(args) -> int:
    st = _Settings(args)
    spec = st.get("thresholds", "0.4:0.05:0.75", str)
    try:
        thresholds = ThresholdSet.parse(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    gt = load_annotations(args.gt, scale=st.get("scale", 1.0, float))
    preds = load_predictions(args.pred)
    unknown = sorted(set(preds) - set(gt.records))
    if unknown:
        raise FormatError(f"{args.pred}: predictions for unknown patients: "
                          f"{', '.join(unknown[:5])}")
    per_image = []
    for pid in sorted(gt.records):
        per_image.append((preds.get(pid, []), list(gt.records[pid].boxes)))
    report = dataset_map(per_image, thresholds, count_fn=not args.no_fn)
    sys.stdout.write(render_report_text(report))
    if args.out:
        atomic_write_bytes(args.out, render_report_csv(report).encode("utf-8"))
    return EXIT_OK


def cmd_align(args) -> int:
    st = _Settings(args)
    opts = st.align_options()
    img = load_image(args.image)
    ref = load_image(args.reference)
    result = align(img, ref, opts)
    t = result.transform
    header = "a11,a12,a21,a22,tx,ty,finalLoss,iterations,converged"
    row = (f"{t.a11:.12g},{t.a12:.12g},{t.a21:.12g},{t.a22:.12g},"
           f"{t.tx:.12g},{t.ty:.12g},{result.final_loss:.12g},"
           f"{result.iterations},{int(result.converged)}")
    text = header + "\n" + row + "\n"
    sys.stdout.write(text)
    if args.out:
        atomic_write_bytes(args.out, text.encode("utf-8"))
    return EXIT_OK


def _parse_region(text: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--region must be x,y,w,h, got {text!r}")
    try:
        x, y, w, h = (int(p) for p in parts)
        return BBox(float(x), float(y), float(w), float(h))
    except ValueError as exc:
        raise UsageError(f"bad region {text!r}: {exc}") from exc


def cmd_blend(args) -> int:
    st = _Settings(args)
    mode = st.get("mode", MODE_POISSON, str, key="blend_mode")
    solver = st.get("solver", SOLVER_CG, str, key="blend_solver")
    tol = st.get("tol", 1e-6, float, key="blend_tol")
    max_iters = st.get("max_iters", 0, int, key="blend_max_iters")
    target = load_image(args.target)
    source = load_image(args.source)
    region = _parse_region(args.region)
    try:
        req = BlendRequest(target=target, source=source, region=region, mode=mode,
                           solver=solver, tol=tol,
                           max_iters=max_iters if max_iters else None)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    blended, residual = blend_with_residual(req)
    save_image(blended, args.out)
    print(f"blended ({mode}) into {args.out}; solver residual {residual:.3e}")
    return EXIT_OK


def cmd_attention(args) -> int:
    st = _Settings(args)
    alpha = st.get("alpha", 1.0, float)
    if alpha < 0:
        raise UsageError("--alpha must be >= 0")
    img = load_image(args.image)
    counterpart = load_image(args.counterpart)
    residual = residual_map(img, lambda _: counterpart)
    feat_w = args.feat_w or max(1, img.width // 32)
    feat_h = args.feat_h or max(1, img.height // 32)
    amap = to_attention(residual, feat_w, feat_h)
    prefix = args.out_prefix
    save_image(residual, f"{prefix}residual.pgm")
    save_image(Image(amap.weights), f"{prefix}attention.pgm")
    print(f"residual peak {float(residual.pixels.max()):.6f}; "
          f"attention {feat_w}x{feat_h}, feature gain at peak {1.0 + alpha:.3f} "
          f"(alpha={alpha:g})")
    return EXIT_OK


def cmd_schedule(args) -> int:
    _Settings(args)  # validates any --config file
    try:
        spec = parse_schedule(args.plan)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    letters = []
    print("epoch,active,frozen")
    for epoch in range(args.epochs):
        phase = phase_for_epoch(spec, epoch)
        print(f"{phase.epoch},{phase.active},{phase.frozen}")
        letters.append("B" if phase.active == ACTIVE_BOTH
                       else "D" if phase.active == ACTIVE_DETECTOR else "G")
    print("sequence: " + ",".join(letters))
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="cxrkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="key = value config file")
        return p

    p = add("phantom", cmd_phantom, "generate a seeded phantom pool")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--abnormal-fraction", dest="abnormal_fraction", type=float)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)

    p = add("synth", cmd_synth, "synthesize pseudo-pairs over an image pool")
    p.add_argument("--direction", choices=["normal", "abnormal"], required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--class-info", dest="class_info",
                   help="optional patientId,class CSV refining Target=0 labels")
    p.add_argument("--include-not-normal", dest="include_not_normal",
                   action="store_true",
                   help="let 'no opacity / not normal' images join the normal pool")
    p.add_argument("--reference")
    p.add_argument("--k", type=int)
    p.add_argument("--blend", choices=[MODE_PASTE, MODE_POISSON])
    p.add_argument("--blend-solver", dest="blend_solver",
                   choices=[SOLVER_CG, SOLVER_GAUSS_SEIDEL])
    p.add_argument("--blend-tol", dest="blend_tol", type=float)
    p.add_argument("--blend-max-iters", dest="blend_max_iters", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "score predictions with the challenge metric")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--no-fn", dest="no_fn", action="store_true",
                   help="second-setting variant: do not count false negatives")
    p.add_argument("--scale", type=float)
    p.add_argument("--out")

    p = add("align", cmd_align, "fit an affine transform onto a reference")
    p.add_argument("--image", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--levels", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--out")

    p = add("blend", cmd_blend, "replace and blend a box region")
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--region", required=True, help="x,y,w,h in pixels")
    p.add_argument("--mode", choices=[MODE_PASTE, MODE_POISSON])
    p.add_argument("--solver", choices=[SOLVER_CG, SOLVER_GAUSS_SEIDEL])
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--out", required=True)

    p = add("attention", cmd_attention, "write residual and attention rasters")
    p.add_argument("--image", required=True)
    p.add_argument("--counterpart", required=True)
    p.add_argument("--feat-w", dest="feat_w", type=int)
    p.add_argument("--feat-h", dest="feat_h", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out-prefix", dest="out_prefix", default="")

    p = add("schedule", cmd_schedule, "print an alternation phase table")
    p.add_argument("--plan", required=True, help="'joint' or 'N:M'")
    p.add_argument("--epochs", type=int, required=True)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FileNotFoundError, NotADirectoryError, PermissionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
