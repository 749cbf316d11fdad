"""End-to-end pseudo-pair construction.

An abnormal radiograph becomes a pseudo-normal counterpart by aligning it to a
reference, retrieving the nearest normal donor (on aligned thumbnails),
replacing each annotated box region with donor content, and smoothing the
seams with Poisson blending. Running the same machinery with the classes
swapped turns normal images into pseudo-abnormal ones for augmentation, with
the donor's boxes carried over as labels.

All work happens in the canonical (reference-aligned) frame: retrieval,
replacement, and the recorded boxes, with each image's transform kept so the
original frame stays recoverable.
"""
from __future__ import annotations

import csv
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blending import (
    MODE_PASTE,
    MODE_POISSON,
    SOLVER_CG,
    BlendRequest,
    blend_with_residual,
)
from .errors import ConvergenceError
from .fileio import LABEL_ABNORMAL, LABEL_NORMAL, atomic_write_bytes, save_image
from .image import Affine2D, BBox, Image, apply_affine
from .registration import AlignOptions, align
from .retrieval import ThumbIndex, build_index, nearest

DIRECTION_TO_NORMAL = "to_normal"
DIRECTION_TO_ABNORMAL = "to_abnormal"

MANIFEST_HEADER = "pairId,inputId,donorId,direction,x,y,width,height,blendMode,finalLoss"

_MIN_BOX_SIDE = 3
_SAFE_MARGIN = 1  # keeps every box usable by the Poisson solver


@dataclass(frozen=True)
class PoolEntry:
    id: str
    label: str
    image: Image
    boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        if self.label not in (LABEL_NORMAL, LABEL_ABNORMAL):
            raise ValueError(f"pool entries must be normal or abnormal, got {self.label!r}")


@dataclass(frozen=True)
class ImagePool:
    entries: tuple[PoolEntry, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("pool ids must be unique")
        object.__setattr__(self, "_by_id", {e.id: e for e in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, pid: str) -> PoolEntry | None:
        return self._by_id.get(pid)

    def with_label(self, label: str) -> list[PoolEntry]:
        return [e for e in self.entries if e.label == label]


@dataclass(frozen=True)
class SynthesisOptions:
    align: AlignOptions = field(default_factory=AlignOptions)
    blend_mode: str = MODE_POISSON
    blend_solver: str = SOLVER_CG
    blend_tol: float = 1e-6
    blend_max_iters: int | None = None

    def __post_init__(self):
        if self.blend_mode not in (MODE_PASTE, MODE_POISSON):
            raise ValueError(f"unknown blend mode {self.blend_mode!r}")


@dataclass(frozen=True)
class StageRecord:
    stage: str
    detail: str


@dataclass(frozen=True)
class PseudoPair:
    input_id: str
    input_aligned: Image
    counterpart: Image
    boxes: tuple[BBox, ...]
    direction: str
    donor_id: str
    transform: Affine2D
    stage_log: tuple[StageRecord, ...]
    blend_mode: str
    box_residuals: tuple[float, ...]

    def __post_init__(self):
        if self.direction not in (DIRECTION_TO_NORMAL, DIRECTION_TO_ABNORMAL):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.input_aligned.pixels.shape != self.counterpart.pixels.shape:
            raise ValueError("aligned input and counterpart dimensions must match")
        if not self.boxes:
            raise ValueError("a pseudo-pair must record at least one box")
        if len(self.box_residuals) != len(self.boxes):
            raise ValueError("one residual per box required")
        if self.residual_outside_boxes() != 0.0:
            raise ValueError("counterpart differs from the input outside the boxes")

    def residual(self) -> np.ndarray:
        return np.abs(self.input_aligned.pixels - self.counterpart.pixels)

    def _outside_mask(self) -> np.ndarray:
        mask = np.ones(self.input_aligned.pixels.shape, dtype=bool)
        for b in self.boxes:
            x, y, w, h = b.to_int()
            mask[y:y + h, x:x + w] = False
        return mask

    def residual_outside_boxes(self) -> float:
        return float(self.residual()[self._outside_mask()].max(initial=0.0))

    def residual_inside_boxes(self) -> float:
        inside = ~self._outside_mask()
        return float(self.residual()[inside].max(initial=0.0))


def map_box(box: BBox, t: Affine2D, out_w: int, out_h: int) -> BBox | None:
    """Carry a box through a forward affine map onto the output pixel grid.

    The transformed corners are enclosed in an axis-aligned integer box,
    clipped one pixel inside the image; boxes smaller than 3x3 after clipping
    are degenerate and yield ``None``.
    """
    cx = np.array([box.x, box.right, box.x, box.right])
    cy = np.array([box.y, box.y, box.bottom, box.bottom])
    # continuous pixel coordinate c covers [c, c+1); normalize against input grid
    nx = 2.0 * cx / out_w - 1.0
    ny = 2.0 * cy / out_h - 1.0
    mx, my = t.map_xy(nx, ny)
    px = (mx + 1.0) * out_w / 2.0
    py = (my + 1.0) * out_h / 2.0
    x0 = max(int(np.floor(px.min())), _SAFE_MARGIN)
    y0 = max(int(np.floor(py.min())), _SAFE_MARGIN)
    x1 = min(int(np.ceil(px.max())), out_w - _SAFE_MARGIN)
    y1 = min(int(np.ceil(py.max())), out_h - _SAFE_MARGIN)
    if x1 - x0 < _MIN_BOX_SIDE or y1 - y0 < _MIN_BOX_SIDE:
        return None
    return BBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0))


@dataclass(frozen=True)
class _Canonical:
    id: str
    aligned: Image
    boxes: tuple[BBox, ...]
    transform: Affine2D
    align_loss: float


class Synthesizer:
    """Caches per-image alignments and donor indexes for one (pool, reference)."""

    def __init__(self, pool: ImagePool, ref: Image, opts: SynthesisOptions | None = None):
        self.pool = pool
        self.ref = ref
        self.opts = opts or SynthesisOptions()
        self._canon: dict[str, _Canonical] = {}
        self._indexes: dict[str, ThumbIndex] = {}
        self._lock = threading.Lock()

    # -- canonical frame ----------------------------------------------------

    def _canonicalize(self, pid: str, img: Image, boxes: tuple[BBox, ...]) -> _Canonical:
        result = align(img, self.ref, self.opts.align)
        aligned = apply_affine(img, result.transform, self.ref.width, self.ref.height)
        mapped = tuple(
            m for m in (map_box(b, result.transform, self.ref.width, self.ref.height)
                        for b in boxes)
            if m is not None
        )
        return _Canonical(pid, aligned, mapped, result.transform, result.final_loss)

    def canonical(self, pid: str) -> _Canonical:
        entry = self.pool.get(pid)
        if entry is None:
            raise KeyError(f"{pid!r} is not in the pool")
        with self._lock:
            hit = self._canon.get(pid)
        if hit is not None:
            return hit
        canon = self._canonicalize(pid, entry.image, entry.boxes)
        with self._lock:
            return self._canon.setdefault(pid, canon)

    def _canonical_input(self, pid: str, img: Image, boxes: tuple[BBox, ...]) -> _Canonical:
        entry = self.pool.get(pid)
        if entry is not None and entry.image.pixels is img.pixels:
            return self.canonical(pid)
        return self._canonicalize(pid, img, boxes)

    # -- donor retrieval ----------------------------------------------------

    def _donor_index(self, want_label: str) -> ThumbIndex:
        with self._lock:
            if want_label in self._indexes:
                return self._indexes[want_label]
        donors = []
        for e in self.pool.with_label(want_label):
            if want_label == LABEL_ABNORMAL and not e.boxes:
                continue
            canon = self.canonical(e.id)
            if want_label == LABEL_ABNORMAL and not canon.boxes:
                continue  # every box collapsed during alignment
            donors.append((e.id, e.label, canon.aligned))
        if not donors:
            raise ValueError(f"pool has no usable {want_label} donors")
        index = build_index(donors)
        with self._lock:
            return self._indexes.setdefault(want_label, index)

    # -- blending -----------------------------------------------------------

    def _blend_boxes(self, target: Image, source: Image, boxes: tuple[BBox, ...],
                     ) -> tuple[Image, tuple[BBox, ...], tuple[float, ...]]:
        """Blend boxes top-left first; overlaps take the later blend's values."""
        ordered = tuple(sorted(boxes, key=lambda b: (b.y, b.x)))
        out = target
        residuals = []
        for box in ordered:
            req = BlendRequest(
                target=out, source=source, region=box,
                mode=self.opts.blend_mode, solver=self.opts.blend_solver,
                tol=self.opts.blend_tol, max_iters=self.opts.blend_max_iters,
            )
            out, res = blend_with_residual(req)
            residuals.append(res)
        return out, ordered, tuple(residuals)

    # -- pipelines ----------------------------------------------------------

    def pseudo_normal(self, abn: tuple[str, Image, tuple[BBox, ...]]) -> PseudoPair:
        """Abnormal (id, image, boxes) -> pair whose counterpart looks normal."""
        aid, aimg, aboxes = abn
        if not aboxes:
            raise ValueError("pseudo-normal synthesis needs at least one box")
        canon = self._canonical_input(aid, aimg, tuple(aboxes))
        if not canon.boxes:
            raise ValueError(f"{aid!r}: every box became degenerate after alignment")
        index = self._donor_index(LABEL_NORMAL)
        (donor_id, dist), = nearest(index, canon.aligned, 1, LABEL_NORMAL, exclude_id=aid)
        donor = self.canonical(donor_id)
        counterpart, boxes, residuals = self._blend_boxes(canon.aligned, donor.aligned,
                                                          canon.boxes)
        log = (
            StageRecord("align", f"input {aid} loss={canon.align_loss:.6g}"),
            StageRecord("retrieve", f"donor {donor_id} distance={dist:.6g}"),
            StageRecord("replace", f"{len(boxes)} box(es) from {donor_id} "
                                   f"(donor align loss={donor.align_loss:.6g})"),
            StageRecord("blend", f"mode={self.opts.blend_mode}"),
        )
        return PseudoPair(
            input_id=aid, input_aligned=canon.aligned, counterpart=counterpart,
            boxes=boxes, direction=DIRECTION_TO_NORMAL, donor_id=donor_id,
            transform=canon.transform, stage_log=log,
            blend_mode=self.opts.blend_mode, box_residuals=residuals,
        )

    def pseudo_abnormal(self, nor: tuple[str, Image], k: int = 1) -> list[PseudoPair]:
        """Normal (id, image) -> k pairs with pathology imported from donors."""
        nid, nimg = nor
        if k < 1:
            raise ValueError("k must be >= 1")
        canon = self._canonical_input(nid, nimg, ())
        index = self._donor_index(LABEL_ABNORMAL)
        hits = nearest(index, canon.aligned, k, LABEL_ABNORMAL, exclude_id=nid)
        pairs = []
        for donor_id, dist in hits:
            donor = self.canonical(donor_id)
            counterpart, boxes, residuals = self._blend_boxes(canon.aligned, donor.aligned,
                                                              donor.boxes)
            log = (
                StageRecord("align", f"input {nid} loss={canon.align_loss:.6g}"),
                StageRecord("retrieve", f"donor {donor_id} distance={dist:.6g}"),
                StageRecord("replace", f"{len(boxes)} box(es) from {donor_id} "
                                       f"(donor align loss={donor.align_loss:.6g})"),
                StageRecord("blend", f"mode={self.opts.blend_mode}"),
            )
            pairs.append(PseudoPair(
                input_id=nid, input_aligned=canon.aligned, counterpart=counterpart,
                boxes=boxes, direction=DIRECTION_TO_ABNORMAL, donor_id=donor_id,
                transform=canon.transform, stage_log=log,
                blend_mode=self.opts.blend_mode, box_residuals=residuals,
            ))
        return pairs


def synth_pseudo_normal(abn: tuple[str, Image, tuple[BBox, ...]], pool: ImagePool,
                        ref: Image, opts: SynthesisOptions | None = None) -> PseudoPair:
    return Synthesizer(pool, ref, opts).pseudo_normal(abn)


def synth_pseudo_abnormal(nor: tuple[str, Image], pool: ImagePool, ref: Image,
                          k: int = 1, opts: SynthesisOptions | None = None,
                          ) -> list[PseudoPair]:
    return Synthesizer(pool, ref, opts).pseudo_abnormal(nor, k)


# ---------------------------------------------------------------------------
# batch augmentation


@dataclass(frozen=True)
class ManifestRow:
    pair_id: str
    input_id: str
    donor_id: str
    direction: str
    x: int
    y: int
    width: int
    height: int
    blend_mode: str
    final_loss: float


@dataclass(frozen=True)
class SkipRecord:
    input_id: str
    reason: str


@dataclass(frozen=True)
class SynthesisManifest:
    rows: tuple[ManifestRow, ...]
    skips: tuple[SkipRecord, ...]


def pair_rows(pair: PseudoPair) -> list[ManifestRow]:
    pid = f"{pair.input_id}_{pair.donor_id}"
    rows = []
    for box, res in zip(pair.boxes, pair.box_residuals):
        x, y, w, h = box.to_int()
        rows.append(ManifestRow(
            pair_id=pid, input_id=pair.input_id, donor_id=pair.donor_id,
            direction=pair.direction, x=x, y=y, width=w, height=h,
            blend_mode=pair.blend_mode, final_loss=res,
        ))
    return rows


def write_manifest(manifest: SynthesisManifest, path) -> None:
    lines = [MANIFEST_HEADER]
    for r in manifest.rows:
        lines.append(f"{r.pair_id},{r.input_id},{r.donor_id},{r.direction},"
                     f"{r.x},{r.y},{r.width},{r.height},{r.blend_mode},"
                     f"{r.final_loss:.9e}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_HEADER.split(","):
            raise ValueError(f"{path}: unexpected manifest header")
        return list(reader)


def augment_dataset(normals, pool: ImagePool, ref: Image, k: int, out_dir,
                    opts: SynthesisOptions | None = None, jobs: int = 1,
                    ) -> SynthesisManifest:
    """Synthesize ``k`` pseudo-abnormal counterparts for every normal image.

    ``normals`` is an iterable of (id, image). Counterpart images are written
    to ``out_dir`` as 16-bit PGM named after the pair id, along with a
    ``manifest.csv``; per-item failures are recorded as skips without
    aborting the batch.
    """
    normals = list(normals)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not normals:
        warnings.warn("augment_dataset received no normal images", stacklevel=2)
    synth = Synthesizer(pool, ref, opts)

    def one(item):
        nid, img = item
        try:
            return synth.pseudo_abnormal((nid, img), k), None
        except (ValueError, KeyError, ConvergenceError) as exc:
            return None, SkipRecord(input_id=nid, reason=str(exc))

    if jobs > 1 and len(normals) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(one, normals))
    else:
        results = [one(item) for item in normals]

    rows: list[ManifestRow] = []
    skips: list[SkipRecord] = []
    for (pairs, skip) in results:
        if skip is not None:
            skips.append(skip)
            continue
        for pair in pairs:
            prows = pair_rows(pair)
            save_image(pair.counterpart, out_dir / f"{prows[0].pair_id}.pgm")
            rows.extend(prows)
    manifest = SynthesisManifest(rows=tuple(rows), skips=tuple(skips))
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
