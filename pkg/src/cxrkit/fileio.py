"""Image and annotation file I/O.

PGM (P5, 8- or 16-bit) is the canonical lossless interchange format; 8-bit
grayscale PNG is accepted for convenience. Annotations follow the pneumonia
challenge CSV layout: ``patientId,x,y,width,height,Target`` with one row per
box for Target=1 patients and empty coordinates for Target=0 patients. An
optional class-info CSV (``patientId,class``) distinguishes plain normal
images from "no opacity / not normal" ones, which matters when building
donor pools.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import FormatError
from .image import BBox, Image

LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"
LABEL_NOT_NORMAL = "no_opacity_not_normal"

ANNOTATION_HEADER = ["patientId", "x", "y", "width", "height", "Target"]
CLASS_INFO_HEADER = ["patientId", "class"]
_CLASS_STRINGS = {
    "Normal": LABEL_NORMAL,
    "Lung Opacity": LABEL_ABNORMAL,
    "No Lung Opacity / Not Normal": LABEL_NOT_NORMAL,
}
_LABEL_CLASS_STRINGS = {v: k for k, v in _CLASS_STRINGS.items()}

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class AnnotationRecord:
    label: str
    boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        if self.label not in (LABEL_NORMAL, LABEL_ABNORMAL, LABEL_NOT_NORMAL):
            raise ValueError(f"unknown label {self.label!r}")
        if self.label == LABEL_ABNORMAL and not self.boxes:
            raise ValueError("abnormal records need at least one box")
        if self.label != LABEL_ABNORMAL and self.boxes:
            raise ValueError(f"{self.label} records must not carry boxes")


@dataclass(frozen=True)
class AnnotationSet:
    records: dict[str, AnnotationRecord]

    def ids_with_label(self, label: str) -> list[str]:
        return sorted(pid for pid, rec in self.records.items() if rec.label == label)

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# images


def load_image(path) -> Image:
    with open(path, "rb") as f:
        head = f.read(8)
    if head[:2] == b"P5":
        return _load_pgm(path)
    if head == _PNG_MAGIC:
        return _load_png(path)
    raise FormatError(f"{path}: unsupported image format (want P5 PGM or grayscale PNG)")


def save_image(img: Image, path, bits: int = 16) -> None:
    """Write PGM (``.pgm``, 8- or 16-bit) or 8-bit grayscale PNG (``.png``).

    Files are written to a temp name and renamed into place, so readers never
    observe a partial image.
    """
    p = str(path)
    if p.lower().endswith(".png"):
        data = np.rint(img.pixels * 255.0).astype(np.uint8)
        tmp = f"{p}.tmp{os.getpid()}"
        PILImage.fromarray(data, mode="L").save(tmp, format="PNG")
        os.replace(tmp, p)
        return
    if bits == 8:
        maxval, dtype = 255, np.uint8
    elif bits == 16:
        maxval, dtype = 65535, np.dtype(">u2")
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    data = np.rint(img.pixels * maxval).astype(dtype)
    payload = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii") + data.tobytes()
    atomic_write_bytes(p, payload)


def atomic_write_bytes(path, payload: bytes) -> None:
    p = str(path)
    tmp = f"{p}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, p)


def _load_pgm(path) -> Image:
    with open(path, "rb") as f:
        data = f.read()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        return data[start:pos]

    if next_token() != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PGM header field") from exc
    if width < 1 or height < 1 or not (0 < maxval < 65536):
        raise FormatError(f"{path}: invalid PGM dimensions or maxval")
    pos += 1  # single whitespace after maxval
    bpp = 1 if maxval < 256 else 2
    need = width * height * bpp
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise FormatError(f"{path}: truncated PGM raster "
                          f"({len(raster)} of {need} bytes)")
    dtype = np.uint8 if bpp == 1 else np.dtype(">u2")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return Image(arr.astype(np.float64) / maxval)


def _load_png(path) -> Image:
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode != "L":
                raise FormatError(
                    f"{path}: only 8-bit grayscale PNG is supported, got mode {im.mode}"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise FormatError(f"{path}: corrupt PNG file ({exc})") from exc
    return Image(arr.astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# annotations


def load_class_info(path) -> dict[str, str]:
    """Read the optional ``patientId,class`` CSV into an id -> label map."""
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CLASS_INFO_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CLASS_INFO_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            pid, cls = row
            if cls not in _CLASS_STRINGS:
                raise FormatError(f"{path}:{lineno}: unknown class {cls!r}")
            label = _CLASS_STRINGS[cls]
            if pid in out and out[pid] != label:
                raise FormatError(f"{path}:{lineno}: conflicting classes for {pid!r}")
            out[pid] = label
    return out


def load_annotations(path, scale: float = 1.0, class_info_path=None) -> AnnotationSet:
    """Parse the challenge annotation CSV, optionally rescaling coordinates.

    Target=0 patients default to the ``normal`` label; a class-info CSV can
    reassign them to ``no_opacity_not_normal``.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    class_info = load_class_info(class_info_path) if class_info_path else {}

    boxes: dict[str, list[BBox]] = {}
    targets: dict[str, int] = {}
    seen_rows: set[tuple] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise FormatError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            pid, xs, ys, ws, hs, ts = row
            if ts not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: Target must be 0 or 1, got {ts!r}")
            target = int(ts)
            if pid in targets and targets[pid] != target:
                raise FormatError(f"{path}:{lineno}: {pid!r} has conflicting Target values")
            targets[pid] = target
            if target == 0:
                if any(v.strip() for v in (xs, ys, ws, hs)):
                    raise FormatError(
                        f"{path}:{lineno}: Target=0 rows must leave coordinates empty"
                    )
                boxes.setdefault(pid, [])
                continue
            try:
                x, y, w, h = (float(v) for v in (xs, ys, ws, hs))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinates") from exc
            key = (pid, x, y, w, h)
            if key in seen_rows:
                raise FormatError(f"{path}:{lineno}: duplicate box for {pid!r}")
            seen_rows.add(key)
            try:
                box = BBox(x * scale, y * scale, w * scale, h * scale)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            boxes.setdefault(pid, []).append(box)

    records: dict[str, AnnotationRecord] = {}
    for pid, target in targets.items():
        if target == 1:
            if class_info.get(pid, LABEL_ABNORMAL) != LABEL_ABNORMAL:
                raise FormatError(f"{path}: {pid!r} has boxes but class info says "
                                  f"{class_info[pid]!r}")
            records[pid] = AnnotationRecord(LABEL_ABNORMAL, tuple(boxes[pid]))
        else:
            records[pid] = AnnotationRecord(class_info.get(pid, LABEL_NORMAL))
    return AnnotationSet(records)


def split_patients(ids, val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded patient-level (train, validation) split; sides are disjoint and
    together cover every id."""
    if not 0.0 <= val_fraction <= 1.0:
        raise ValueError("val_fraction must lie in [0, 1]")
    ordered = sorted(ids)
    if len(set(ordered)) != len(ordered):
        raise ValueError("patient ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_val = int(round(len(ordered) * val_fraction))
    val = {ordered[i] for i in perm[:n_val]}
    return [i for i in ordered if i not in val], sorted(val)


def save_annotations(aset: AnnotationSet, path, class_info_path=None) -> None:
    """Write the challenge CSV (and optionally the class-info sidecar)."""
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        f.write(",".join(ANNOTATION_HEADER) + "\n")
        for pid in sorted(aset.records):
            rec = aset.records[pid]
            if rec.label == LABEL_ABNORMAL:
                for b in rec.boxes:
                    f.write(f"{pid},{b.x!r},{b.y!r},{b.w!r},{b.h!r},1\n")
            else:
                f.write(f"{pid},,,,,0\n")
    if class_info_path is not None:
        with open(class_info_path, "w", newline="\n", encoding="utf-8") as f:
            f.write(",".join(CLASS_INFO_HEADER) + "\n")
            for pid in sorted(aset.records):
                f.write(f"{pid},{_LABEL_CLASS_STRINGS[aset.records[pid].label]}\n")
