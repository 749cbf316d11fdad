"""Nearest-neighbor retrieval over 32x32 thumbnails.

Every indexed image is area-resized to 32x32 and compared by plain Euclidean
distance on the flattened intensities. The scan is exhaustive and exact, which
keeps results trivially checkable against a brute-force oracle; the pool sizes
this toolkit targets do not justify an approximate index.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .image import Image, resize_area

THUMB_SIDE = 32
LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"

_MAGIC = b"THIX"
_LABEL_BYTES = {LABEL_NORMAL: 0, LABEL_ABNORMAL: 1}
_BYTE_LABELS = {v: k for k, v in _LABEL_BYTES.items()}


@dataclass(frozen=True)
class IndexEntry:
    id: str
    label: str
    thumb: Image


@dataclass(frozen=True)
class ThumbIndex:
    entries: tuple[IndexEntry, ...]

    def __post_init__(self):
        ids = set()
        for e in self.entries:
            if e.label not in _LABEL_BYTES:
                raise ValueError(f"unknown label {e.label!r} for entry {e.id!r}")
            if e.thumb.width != THUMB_SIDE or e.thumb.height != THUMB_SIDE:
                raise ValueError(f"entry {e.id!r} thumb is not {THUMB_SIDE}x{THUMB_SIDE}")
            if e.id in ids:
                raise ValueError(f"duplicate id {e.id!r}")
            ids.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)


def _thumbnail(img: Image) -> Image:
    if img.width == THUMB_SIDE and img.height == THUMB_SIDE:
        return img
    return resize_area(img, THUMB_SIDE, THUMB_SIDE)


def build_index(images: list[tuple[str, str, Image]]) -> ThumbIndex:
    """Thumbnail every (id, label, image) triple into an immutable index."""
    if not images:
        raise ValueError("cannot build an index from an empty list")
    return ThumbIndex(tuple(
        IndexEntry(id=i, label=lbl, thumb=_thumbnail(img)) for i, lbl, img in images
    ))


def nearest(index: ThumbIndex, query: Image, k: int, want_label: str,
            exclude_id: str | None = None) -> list[tuple[str, float]]:
    """The ``k`` closest entries of class ``want_label``, ascending by distance.

    The query is thumbnailed internally, so any resolution is accepted. Ties
    are broken by id. ``exclude_id`` drops the query's own index entry so an
    indexed image never retrieves itself.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _thumbnail(query).pixels.ravel()
    scored = []
    for e in index.entries:
        if e.label != want_label or e.id == exclude_id:
            continue
        d = float(np.sqrt(np.sum((e.thumb.pixels.ravel() - q) ** 2)))
        scored.append((d, e.id))
    if len(scored) < k:
        raise ValueError(
            f"need {k} candidates with label {want_label!r}, index has {len(scored)}"
        )
    scored.sort()
    return [(i, d) for d, i in scored[:k]]


# ---------------------------------------------------------------------------
# flat binary sidecar: magic "THIX", u32 entry count, then per entry
# u32 id byte-length, UTF-8 id, one label byte (0=normal, 1=abnormal),
# 1024 little-endian float32 thumbnail intensities.


def save_index(index: ThumbIndex, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(index.entries)))
        for e in index.entries:
            raw = e.id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("B", _LABEL_BYTES[e.label]))
            f.write(e.thumb.pixels.astype("<f4").tobytes())


def load_index(path) -> ThumbIndex:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a thumbnail index (bad magic)")
    off = 4
    try:
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        entries = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", data, off)
            off += 4
            ident = data[off:off + id_len].decode("utf-8")
            if len(data) < off + id_len:
                raise FormatError(f"{path}: truncated index")
            off += id_len
            label_byte = data[off]
            off += 1
            if label_byte not in _BYTE_LABELS:
                raise FormatError(f"{path}: unknown label byte {label_byte}")
            n = THUMB_SIDE * THUMB_SIDE
            block = data[off:off + 4 * n]
            if len(block) < 4 * n:
                raise FormatError(f"{path}: truncated index")
            off += 4 * n
            thumb = np.frombuffer(block, dtype="<f4").reshape(THUMB_SIDE, THUMB_SIDE)
            entries.append(IndexEntry(ident, _BYTE_LABELS[label_byte],
                                      Image(np.clip(thumb.astype(np.float64), 0.0, 1.0))))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated index") from exc
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after index payload")
    return ThumbIndex(tuple(entries))
