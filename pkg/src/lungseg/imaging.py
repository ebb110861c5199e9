"""Raster preprocessing, augmentation, morphology and synthetic phantoms.

Rasters are plain 2-D numpy arrays in row-major (H, W) order:

* grayscale images are ``uint8`` at ingest and float in [0, 1] after
  :func:`normalize`;
* binary masks are ``uint8`` arrays holding only 0 and 1.

Coordinates follow the pixel-centre convention: pixel ``k`` covers the
continuous interval [k, k+1) and its centre sits at k + 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataIOError, ShapeError, UsageError


# -- I/O ----------------------------------------------------------------------

def read_gray(path) -> np.ndarray:
    """Load a PNG/PGM as an 8-bit (H, W) array; colour input is converted to luma."""
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return np.rint(np.clip(arr, 0, 65535) * (255.0 / 65535.0)).astype(np.uint8)
            if im.mode != "L":
                im = im.convert("L")
            return np.array(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc


def read_mask(path) -> np.ndarray:
    """Any nonzero pixel counts as lung."""
    return (read_gray(path) != 0).astype(np.uint8)


def write_gray(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataIOError(f"cannot write image {path}: {exc}") from exc


def write_mask(path, mask: np.ndarray) -> None:
    write_gray(path, (np.asarray(mask) != 0).astype(np.uint8) * 255)


def write_overlay(path, img: np.ndarray, mask: np.ndarray) -> None:
    """Radiograph in gray with the mask outline drawn in red."""
    gray = np.asarray(img)
    if gray.dtype != np.uint8:
        gray = np.rint(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    if gray.shape != mask.shape:
        raise ShapeError(f"overlay: image {gray.shape} vs mask {mask.shape}")
    m = (mask != 0).astype(np.uint8)
    edge = m & dilate(1 - m)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[edge.astype(bool)] = (255, 0, 0)
    try:
        Image.fromarray(rgb).save(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataIOError(f"cannot write overlay {path}: {exc}") from exc


# -- resize / normalize -------------------------------------------------------

def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # floor of the source coordinate of each output centre, in exact integer
    # arithmetic; the right half is mirrored from the left so the mapping
    # commutes with horizontal flips even when a centre lands on a pixel edge
    j = np.arange(n_out)
    idx = ((2 * j + 1) * n_in) // (2 * n_out)
    right = 2 * j + 1 > n_out
    idx[right] = n_in - 1 - idx[n_out - 1 - j[right]]
    return idx


def _linear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(img: np.ndarray, out_w: int, out_h: int, mode: str = "bilinear") -> np.ndarray:
    """Half-pixel-centre resize with edge clamping.

    ``nearest`` keeps the input dtype (masks stay binary). ``bilinear`` on
    integer input rounds back to that dtype; float input stays float.
    """
    if out_w < 1 or out_h < 1:
        raise UsageError(f"resize target must be at least 1x1, got {out_w}x{out_h}")
    img = np.asarray(img)
    h, w = img.shape
    if mode == "nearest":
        return img[np.ix_(_nearest_index(h, out_h), _nearest_index(w, out_w))]
    if mode != "bilinear":
        raise UsageError(f"unknown resize mode {mode!r}")
    src = img.astype(np.float64)
    y0, y1, fy = _linear_taps(h, out_h)
    x0, x1, fx = _linear_taps(w, out_w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
    return out.astype(img.dtype, copy=False)


def normalize(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


# -- masks ----------------------------------------------------------------------

def union_masks(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    if left.shape != right.shape:
        raise ShapeError(f"union_masks: {left.shape} vs {right.shape}")
    return ((left != 0) | (right != 0)).astype(np.uint8)


def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary dilation by a 3x3 square; pixels outside the raster are background."""
    m = np.asarray(mask) != 0
    h, w = m.shape
    for _ in range(iterations):
        p = np.pad(m, 1)
        out = np.zeros_like(m)
        for dy in range(3):
            for dx in range(3):
                out |= p[dy:dy + h, dx:dx + w]
        m = out
    return m.astype(np.uint8)


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    zoom_range: float = 0.05
    shift_range: float = 0.05
    hflip_prob: float = 0.5


@dataclass(frozen=True)
class AffineDraw:
    scale: float
    dx: float
    dy: float
    flip: bool


def sample_transform(rng: np.random.Generator, params: AugmentParams, width: int, height: int) -> AffineDraw:
    # always draw all four numbers so the stream stays aligned across settings
    scale = rng.uniform(1.0 - params.zoom_range, 1.0 + params.zoom_range)
    dx = rng.uniform(-params.shift_range * width, params.shift_range * width)
    dy = rng.uniform(-params.shift_range * height, params.shift_range * height)
    flip = bool(rng.random() < params.hflip_prob)
    return AffineDraw(float(scale), float(dx), float(dy), flip)


def _source_coords(draw: AffineDraw, width: int, height: int):
    # inverse of: mirror -> scale about centre -> translate
    cx, cy = width / 2.0, height / 2.0
    qx = np.arange(width) + 0.5
    qy = np.arange(height) + 0.5
    px = (qx - cx - draw.dx) / draw.scale + cx
    py = (qy - cy - draw.dy) / draw.scale + cy
    if draw.flip:
        px = width - px
    return px, py


def _sample_bilinear_zero(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    h, w = img.shape
    u, v = px - 0.5, py - 0.5
    x0, y0 = np.floor(u).astype(np.intp), np.floor(v).astype(np.intp)
    fx, fy = u - x0, v - y0
    out = np.zeros((h, w), dtype=np.float64)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        yy = y0 + oy
        vy = (yy >= 0) & (yy < h)
        for ox, wx in ((0, 1 - fx), (1, fx)):
            xx = x0 + ox
            vx = (xx >= 0) & (xx < w)
            vals = img[np.clip(yy, 0, h - 1)][:, np.clip(xx, 0, w - 1)] * (vy[:, None] & vx[None, :])
            out += vals * (wy[:, None] * wx[None, :])
    return out


def _sample_nearest_zero(mask: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    xi, yi = np.floor(px).astype(np.intp), np.floor(py).astype(np.intp)
    vx, vy = (xi >= 0) & (xi < w), (yi >= 0) & (yi < h)
    out = mask[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
    return (out * (vy[:, None] & vx[None, :])).astype(mask.dtype)


def apply_transform(img: np.ndarray, mask: np.ndarray, draw: AffineDraw) -> tuple[np.ndarray, np.ndarray]:
    if img.shape != mask.shape:
        raise ShapeError(f"augment: image {img.shape} vs mask {mask.shape}")
    h, w = img.shape
    px, py = _source_coords(draw, w, h)
    warped = _sample_bilinear_zero(np.asarray(img, dtype=np.float64), px, py)
    if np.issubdtype(img.dtype, np.floating):
        warped = warped.astype(img.dtype, copy=False)
    return warped, _sample_nearest_zero(np.asarray(mask), px, py)


def augment(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            params: AugmentParams = AugmentParams()) -> tuple[np.ndarray, np.ndarray]:
    """Random zoom/shift/h-flip applied identically to image (bilinear) and mask (nearest)."""
    if img.shape != mask.shape:
        raise ShapeError(f"augment: image {img.shape} vs mask {mask.shape}")
    h, w = img.shape
    return apply_transform(img, mask, sample_transform(rng, params, w, h))


# -- synthetic phantoms -------------------------------------------------------

PHANTOM_MIN_SIZE = 32


def synth_phantom(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Chest-like test image: two dark elliptical lungs, rib stripes, Gaussian noise.

    Returns the float image in [0, 1] and the exact union of the two ellipses.
    """
    if size < PHANTOM_MIN_SIZE:
        raise UsageError(f"phantom size must be >= {PHANTOM_MIN_SIZE}, got {size}")
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    # left centres stay <= 0.34, right >= 0.66, half-widths <= 0.15: never touching
    for cx_lo, cx_hi in ((0.26, 0.34), (0.66, 0.74)):
        cx = rng.uniform(cx_lo, cx_hi) * size
        cy = rng.uniform(0.45, 0.55) * size
        a = rng.uniform(0.10, 0.15) * size
        b = rng.uniform(0.25, 0.36) * size
        mask |= ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0

    background = rng.uniform(0.65, 0.8)
    contrast = rng.uniform(0.3, 0.4)
    period = rng.uniform(0.1, 0.16) * size
    phase = rng.uniform(0, 2 * np.pi)
    img = np.full((size, size), background)
    img -= contrast * mask
    img += 0.06 * np.sin(2 * np.pi * yy / period + phase)
    img += rng.normal(0.0, 0.05, (size, size))
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def write_phantom_set(out_dir, count: int, size: int, seed: int) -> list[tuple[Path, Path]]:
    """Write ``count`` phantoms as ``phantom_XXXX.png`` + ``phantom_XXXX_mask.png``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out}: {exc}") from exc
    pairs = []
    for i in range(count):
        img, mask = synth_phantom(np.random.default_rng([seed, i]), size)
        ipath, mpath = out / f"phantom_{i:04d}.png", out / f"phantom_{i:04d}_mask.png"
        write_gray(ipath, img)
        write_mask(mpath, mask)
        pairs.append((ipath, mpath))
    return pairs
