"""Seeded procedural chest phantoms.

These are deliberately low-fidelity: a dark background, two bright soft-edged
"lung" ellipses, faint sinusoidal "rib" bands, and a mild per-seed affine
jitter. Abnormal phantoms add Gaussian-blob opacities inside a lung field,
each with a tight bounding box. Their only job is to give alignment,
retrieval, blending, attention, and evaluation structured, reproducible
inputs with ground-truth boxes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import LABEL_ABNORMAL, LABEL_NORMAL, AnnotationRecord, AnnotationSet
from .image import BBox, Image
from .synthesis import ImagePool, PoolEntry

CLASS_NORMAL = LABEL_NORMAL
CLASS_ABNORMAL = LABEL_ABNORMAL

# lung ellipse centers and semi-axes in normalized [-1, 1] coordinates
_LUNGS = ((-0.42, 0.02, 0.30, 0.52), (0.42, 0.02, 0.30, 0.52))
_BACKGROUND = 0.10
_LUNG_GAIN = 0.45
_RIB_AMPLITUDE = 0.05
_BLOB_PEAK = 0.30
# blob support threshold for the "tight" box: peak * exp(-r^2 / (2 sigma^2)) = 0.05
_BLOB_BOX_RADIUS_SIGMAS = float(np.sqrt(2.0 * np.log(_BLOB_PEAK / 0.05)))


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    size: int = 128
    class_: str = CLASS_NORMAL
    opacity_count: int = 1

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("phantom size must be >= 64")
        if self.class_ not in (CLASS_NORMAL, CLASS_ABNORMAL):
            raise ValueError(f"unknown phantom class {self.class_!r}")
        if self.class_ == CLASS_ABNORMAL and self.opacity_count < 1:
            raise ValueError("abnormal phantoms need opacity_count >= 1")


def synth_phantom(spec: PhantomSpec) -> tuple[Image, list[BBox]]:
    """Deterministically render a phantom and the boxes of its added opacities."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    lin = (2.0 * np.arange(n) + 1.0) / n - 1.0
    gx, gy = np.meshgrid(lin, lin)

    sx = 1.0 + rng.uniform(-0.03, 0.03)
    sy = 1.0 + rng.uniform(-0.03, 0.03)
    dx = rng.uniform(-0.02, 0.02)
    dy = rng.uniform(-0.02, 0.02)
    xj = (gx - dx) / sx
    yj = (gy - dy) / sy

    img = np.full((n, n), _BACKGROUND)
    lung_union = np.zeros_like(img)
    for cx, cy, ax, ay in _LUNGS:
        r2 = ((xj - cx) / ax) ** 2 + ((yj - cy) / ay) ** 2
        field = 1.0 / (1.0 + np.exp((r2 - 1.0) / 0.06))
        img += _LUNG_GAIN * field
        lung_union = np.maximum(lung_union, field)

    phase = rng.uniform(0.0, 2.0 * np.pi)
    img += _RIB_AMPLITUDE * np.sin(2.0 * np.pi * 3.5 * yj + 0.6 * xj + phase) * lung_union

    boxes: list[BBox] = []
    if spec.class_ == CLASS_ABNORMAL:
        for _ in range(spec.opacity_count):
            lung = _LUNGS[int(rng.integers(len(_LUNGS)))]
            cx0, cy0, ax, ay = lung
            # offset within the lung, then map through the jitter to image space
            ox = cx0 + rng.uniform(-0.45, 0.45) * ax
            oy = cy0 + rng.uniform(-0.45, 0.45) * ay
            bx = ox * sx + dx
            by = oy * sy + dy
            sigma_px = n * rng.uniform(0.045, 0.07)
            sigma = 2.0 * sigma_px / n
            r2 = ((gx - bx) ** 2 + (gy - by) ** 2) / (2.0 * sigma * sigma)
            img += _BLOB_PEAK * np.exp(-r2)
            boxes.append(_blob_box(bx, by, sigma_px, n))

    return Image(np.clip(img, 0.0, 1.0)), boxes


def _blob_box(bx: float, by: float, sigma_px: float, n: int) -> BBox:
    cx_px = (bx + 1.0) / 2.0 * n - 0.5
    cy_px = (by + 1.0) / 2.0 * n - 0.5
    r = _BLOB_BOX_RADIUS_SIGMAS * sigma_px
    x0 = max(0, int(np.floor(cx_px - r)))
    y0 = max(0, int(np.floor(cy_px - r)))
    x1 = min(n, int(np.ceil(cx_px + r)) + 1)
    y1 = min(n, int(np.ceil(cy_px + r)) + 1)
    return BBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def generate_phantom_pool(count: int, seed: int, abnormal_fraction: float,
                          size: int = 128, opacity_count: int = 1,
                          ) -> tuple[ImagePool, AnnotationSet]:
    """Seeded pool of phantoms with a consistent annotation set.

    The first ``round(count * abnormal_fraction)`` phantoms are abnormal; ids
    are ``ph0000``, ``ph0001``, ... in generation order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= abnormal_fraction <= 1.0:
        raise ValueError("abnormal_fraction must lie in [0, 1]")
    n_abnormal = int(round(count * abnormal_fraction))
    children = np.random.SeedSequence(seed).spawn(count)

    entries: list[PoolEntry] = []
    records: dict[str, AnnotationRecord] = {}
    for i in range(count):
        cls = CLASS_ABNORMAL if i < n_abnormal else CLASS_NORMAL
        child_seed = int(children[i].generate_state(1, np.uint64)[0])
        spec = PhantomSpec(seed=child_seed, size=size, class_=cls,
                           opacity_count=opacity_count)
        img, boxes = synth_phantom(spec)
        pid = f"ph{i:04d}"
        entries.append(PoolEntry(id=pid, label=cls, image=img, boxes=tuple(boxes)))
        if cls == CLASS_ABNORMAL:
            records[pid] = AnnotationRecord(LABEL_ABNORMAL, tuple(boxes))
        else:
            records[pid] = AnnotationRecord(LABEL_NORMAL)
    return ImagePool(tuple(entries)), AnnotationSet(records)
