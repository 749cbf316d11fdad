"""Image container, resampling, affine warping, and box geometry.

Everything downstream (registration, blending, retrieval, evaluation) is built
on the three types defined here. Intensities are float64 in [0, 1]; boxes are
axis-aligned with float coordinates; affine transforms act on normalized
coordinates where the image center is (0, 0) and the image edges are at +/-1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_SIDE = 1024
MIN_ABS_DET = 1e-6

# Sample positions are quantized to this grid (in pixels), which snaps the
# ~1e-13 arithmetic wobble of grid-permutation warps (identity, whole-pixel
# translations, 180-degree rotation) onto exact pixel centers so those warps
# reproduce intensities bit-for-bit. The quantum is far below any visually or
# numerically meaningful sub-pixel offset.
_QUANTUM_BITS = 16
_QUANTUM_MASK = (1 << _QUANTUM_BITS) - 1
_COORD_QUANTUM = 2.0 ** -_QUANTUM_BITS


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel raster; ``pixels`` is a read-only (height, width) float64 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D intensity array, got shape {px.shape}")
        h, w = px.shape
        if not (1 <= w <= MAX_SIDE and 1 <= h <= MAX_SIDE):
            raise ValueError(f"image dimensions {w}x{h} outside 1..{MAX_SIDE}")
        if not np.isfinite(px).all():
            raise ValueError("intensities must be finite")
        lo = float(px.min())
        hi = float(px.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities outside [0, 1]: min={lo:.6g} max={hi:.6g}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def constant(cls, width: int, height: int, value: float = 0.0) -> "Image":
        return cls(np.full((height, width), float(value)))

    def allclose(self, other: "Image", atol: float = 0.0) -> bool:
        return (
            self.pixels.shape == other.pixels.shape
            and bool(np.allclose(self.pixels, other.pixels, rtol=0.0, atol=atol))
        )


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: ``x``/``y`` top-left corner, ``w``/``h`` strictly positive."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def fits_within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.right <= width and self.bottom <= height

    def to_int(self) -> tuple[int, int, int, int]:
        """Return ``(x, y, w, h)`` as ints; the box must sit on the pixel grid."""
        out = []
        for v in (self.x, self.y, self.w, self.h):
            r = round(v)
            if abs(v - r) > 1e-9:
                raise ValueError(f"box {self} is not aligned to the pixel grid")
            out.append(int(r))
        return tuple(out)


@dataclass(frozen=True)
class Affine2D:
    """Forward affine map on normalized coordinates: p_out = A @ p_in + (tx, ty)."""

    a11: float
    a12: float
    a21: float
    a22: float
    tx: float
    ty: float

    def __post_init__(self):
        vals = self.as_params()
        if not np.isfinite(vals).all():
            raise ValueError("affine parameters must be finite")
        if abs(self.det) < MIN_ABS_DET:
            raise ValueError(f"affine transform is singular (|det|={abs(self.det):.3g})")

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)

    @classmethod
    def from_params(cls, p) -> "Affine2D":
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (6,):
            raise ValueError(f"expected 6 affine parameters, got shape {p.shape}")
        return cls(*(float(v) for v in p))

    def as_params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    def inverse(self) -> "Affine2D":
        d = self.det
        i11, i12 = self.a22 / d, -self.a12 / d
        i21, i22 = -self.a21 / d, self.a11 / d
        return Affine2D(
            i11, i12, i21, i22,
            -(i11 * self.tx + i12 * self.ty),
            -(i21 * self.tx + i22 * self.ty),
        )

    def map_xy(self, x, y):
        """Apply the forward map to normalized coordinates (arrays or scalars)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (self.a11 * x + self.a12 * y + self.tx,
                self.a21 * x + self.a22 * y + self.ty)


# ---------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=256)
def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of fractional pixel coverages."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for j in range(n_out):
        a = j * scale
        b = (j + 1) * scale
        k0 = int(np.floor(a))
        k1 = min(int(np.ceil(b)), n_in)
        for k in range(k0, k1):
            ov = min(b, k + 1.0) - max(a, float(k))
            if ov > 0:
                w[j, k] = ov / scale
    w.setflags(write=False)
    return w


def resize_area_array(px: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Area-weighted resample of a (..., h, w) array to (..., out_h, out_w)."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target dimensions must be positive, got {out_w}x{out_h}")
    h, w = px.shape[-2:]
    wy = _area_weights(h, out_h)
    wx = _area_weights(w, out_w)
    return np.matmul(np.matmul(wy, px), wx.T)


def resize_area(img: Image, out_w: int, out_h: int) -> Image:
    """Resample so each output pixel is the area-weighted mean of the region it covers."""
    return Image(np.clip(resize_area_array(img.pixels, out_w, out_h), 0.0, 1.0))


# ---------------------------------------------------------------------------
# affine warping


@lru_cache(maxsize=64)
def _output_grid(out_w: int, out_h: int) -> np.ndarray:
    """Homogeneous output-pixel coordinates as a (3, out_h*out_w) matrix."""
    x = (2.0 * np.arange(out_w) + 1.0) / out_w - 1.0
    y = (2.0 * np.arange(out_h) + 1.0) / out_h - 1.0
    gx, gy = np.meshgrid(x, y)
    grid = np.vstack([gx.ravel(), gy.ravel(), np.ones(out_w * out_h)])
    grid.setflags(write=False)
    return grid


def pad_warp_source(px: np.ndarray) -> np.ndarray:
    """Flattened zero-padded copy of a source raster for :func:`warp_prepared`.

    The dtype is preserved, so callers choosing float32 sources get a float32
    sampling pipeline.
    """
    h, w = px.shape
    padded = np.zeros((h + 3, w + 3), dtype=px.dtype)
    padded[1:h + 1, 1:w + 1] = px
    return padded.ravel()


class WarpWorkspace:
    """Reusable buffers for repeated batched warps onto one output geometry.

    Fresh multi-megabyte temporaries cost more in page faults than the warp
    arithmetic itself, so tight loops (parameter fitting) allocate this once.
    Results returned from :func:`warp_prepared` alias these buffers and stay
    valid only until the next warp that uses the same workspace.
    """

    def __init__(self, max_batch: int, out_w: int, out_h: int, value_dtype):
        hw = out_w * out_h
        self.max_batch = max_batch
        self.coords = np.empty((2 * max_batch, hw))
        self.qa = np.empty((max_batch, hw), np.int64)
        self.qb = np.empty((max_batch, hw), np.int64)
        self.itmp = np.empty((max_batch, hw), np.int64)
        dt = np.dtype(value_dtype)
        self.fx = np.empty((max_batch, hw), dt)
        self.fy = np.empty((max_batch, hw), dt)
        self.values = [np.empty((max_batch, hw), dt) for _ in range(4)]


def warp_prepared(flat_src: np.ndarray, src_h: int, src_w: int,
                  params: np.ndarray, out_w: int, out_h: int,
                  workspace: WarpWorkspace | None = None) -> np.ndarray:
    """Inverse-warp a prepared source under a batch of forward affine maps.

    ``flat_src`` comes from :func:`pad_warp_source`. ``params`` has shape
    (n, 6) with rows (a11, a12, a21, a22, tx, ty); the result has shape
    (n, out_h, out_w) in the source dtype. Output pixels are bilinear samples
    of the source at the inverse-mapped position, 0.0 outside the source.
    With a workspace the result aliases workspace memory.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != 6:
        raise ValueError(f"expected (n, 6) parameter array, got {params.shape}")
    h, w = src_h, src_w
    a11, a12, a21, a22, tx, ty = params.T
    det = a11 * a22 - a12 * a21
    if np.any(np.abs(det) < MIN_ABS_DET):
        raise ValueError("affine transform is singular")
    i11, i12 = a22 / det, -a12 / det
    i21, i22 = -a21 / det, a11 / det
    bx = -(i11 * tx + i12 * ty)
    by = -(i21 * tx + i22 * ty)

    n = params.shape[0]
    value_dtype = flat_src.dtype
    if workspace is not None and n <= workspace.max_batch:
        ws = workspace
    else:
        ws = WarpWorkspace(n, out_w, out_h, value_dtype)
    hw = out_h * out_w

    # fold the normalized->pixel conversion into the inverse coefficients
    # (s = (coord + 1) * n/2 - 0.5) and evaluate both sample-coordinate
    # fields as one matrix product against the homogeneous output grid
    coef = np.empty((2 * n, 3))
    coef[:n, 0] = i11 * (w / 2.0)
    coef[:n, 1] = i12 * (w / 2.0)
    coef[:n, 2] = (bx + 1.0) * (w / 2.0) - 0.5
    coef[n:, 0] = i21 * (h / 2.0)
    coef[n:, 1] = i22 * (h / 2.0)
    coef[n:, 2] = (by + 1.0) * (h / 2.0) - 0.5
    coords = ws.coords[:2 * n]
    np.matmul(coef, _output_grid(out_w, out_h), out=coords)
    sx = coords[:n]
    sy = coords[n:]

    # clamping to [-1, n] is exact: all clamped samples evaluate to the 0 fill
    np.clip(sx, -1.0, float(w), out=sx)
    np.clip(sy, -1.0, float(h), out=sy)

    # quantize positions onto the sub-pixel grid as integer quantum counts;
    # grid-permutation warps then resolve to exact pixel hits
    coords *= 1.0 / _COORD_QUANTUM
    np.rint(coords, out=coords)
    qx = ws.qa[:n]
    qy = ws.qb[:n]
    np.copyto(qx, sx, casting="unsafe")  # values are integral after rint
    np.copyto(qy, sy, casting="unsafe")
    quantum = value_dtype.type(_COORD_QUANTUM)
    fx = ws.fx[:n]
    fy = ws.fy[:n]
    frac = ws.itmp[:n]
    np.bitwise_and(qx, _QUANTUM_MASK, out=frac)
    np.copyto(fx, frac, casting="unsafe")
    fx *= quantum
    np.bitwise_and(qy, _QUANTUM_MASK, out=frac)
    np.copyto(fy, frac, casting="unsafe")
    fy *= quantum
    qx >>= _QUANTUM_BITS
    qy >>= _QUANTUM_BITS

    # gather bilinear corners via flat indices; the lower corner pair reads
    # from a view shifted one padded row down
    stride = w + 3
    idx = qy
    idx *= stride
    idx += qx
    idx += stride + 1
    idx1 = ws.itmp[:n]
    np.add(idx, 1, out=idx1)
    shifted = flat_src[stride:]
    v00, v01, v10, v11 = (buf[:n] for buf in ws.values)
    np.take(flat_src, idx, out=v00, mode="clip")
    np.take(flat_src, idx1, out=v01, mode="clip")
    np.take(shifted, idx, out=v10, mode="clip")
    np.take(shifted, idx1, out=v11, mode="clip")
    # in-place lerp: top = v00 + fx*(v01-v00), bottom likewise, then blend
    v01 -= v00
    v01 *= fx
    v01 += v00
    v11 -= v10
    v11 *= fx
    v11 += v10
    v11 -= v01
    v11 *= fy
    v11 += v01
    return v11.reshape(n, out_h, out_w)


def warp_params_array(px: np.ndarray, params: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Inverse-warp one float64 source raster under forward affine maps."""
    h, w = px.shape
    return warp_prepared(pad_warp_source(np.asarray(px, dtype=np.float64)),
                         h, w, params, out_w, out_h)


def apply_affine(img: Image, t: Affine2D, out_w: int | None = None, out_h: int | None = None) -> Image:
    """Warp ``img`` by ``t``; samples falling outside the input are filled with 0."""
    out_w = img.width if out_w is None else out_w
    out_h = img.height if out_h is None else out_h
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target dimensions must be positive, got {out_w}x{out_h}")
    warped = warp_params_array(img.pixels, t.as_params()[None, :], out_w, out_h)[0]
    return Image(np.clip(warped, 0.0, 1.0))


# ---------------------------------------------------------------------------
# scalar measures


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when they are disjoint."""
    iw = min(a.right, b.right) - max(a.x, b.x)
    ih = min(a.bottom, b.bottom) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def l1_mean(a: Image, b: Image) -> float:
    """Mean absolute intensity difference; requires equal dimensions."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    return float(np.mean(np.abs(a.pixels - b.pixels)))
