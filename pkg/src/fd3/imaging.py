"""Image tensors, file I/O, geometric preprocessing and CLAHE.

Images are ``float64`` numpy arrays of shape ``(H, W, 3)`` in RGB order with
values in ``[0, 1]``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MIN_SIZE = 8
N_BINS = 256

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


class ImageDecodeError(ValueError):
    """Raised when a file exists but cannot be decoded as an 8-bit RGB raster."""


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ValueError(f"{name} must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape[:2]}")
    return img


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "P", "L"):
                raise ImageDecodeError(f"{path}: unsupported mode {im.mode!r} (need 8-bit RGB)")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` as an 8-bit PNG (the extension is ignored)."""
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Resize the shorter side to ``size`` (bilinear) and take the central square."""
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    img = validate_image(img)
    h, w = img.shape[:2]
    if min(h, w) != size:
        scale = size / min(h, w)
        nh = size if h <= w else max(size, int(round(h * scale)))
        nw = size if w <= h else max(size, int(round(w * scale)))
        img = _resize_bilinear(img, nh, nw)
        h, w = nh, nw
    top = (h - size) // 2
    left = (w - size) // 2
    out = img[top:top + size, left:left + size]
    return np.clip(out, 0.0, 1.0)


def _resize_bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    # half-pixel centers, edge clamping (same convention as cv2.INTER_LINEAR)
    h, w = img.shape[:2]
    ys = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)

    def __post_init__(self):
        if not self.clip_limit > 0:
            raise ValueError(f"clip_limit must be > 0, got {self.clip_limit}")
        rows, cols = self.tile_grid
        if rows < 1 or cols < 1:
            raise ValueError(f"tile_grid entries must be >= 1, got {self.tile_grid}")
        object.__setattr__(self, "tile_grid", (int(rows), int(cols)))


def rgb_to_luma_chroma(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = img @ _LUMA
    return y, img[..., 2] - y, img[..., 0] - y


def luma_chroma_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    r = y + cr
    b = y + cb
    g = (y - _LUMA[0] * r - _LUMA[2] * b) / _LUMA[1]
    return np.stack([r, g, b], axis=-1)


def luminance_bins(img: np.ndarray) -> np.ndarray:
    """Quantize luminance to integer bins ``0..255``."""
    y = img @ _LUMA
    return np.clip(np.round(y * (N_BINS - 1)), 0, N_BINS - 1).astype(np.intp)


def _tile_luts(bins: np.ndarray, rows: int, cols: int, clip_limit: float):
    h, w = bins.shape
    redges = np.linspace(0, h, rows + 1).round().astype(int)
    cedges = np.linspace(0, w, cols + 1).round().astype(int)
    luts = np.empty((rows, cols, N_BINS))
    for i in range(rows):
        for j in range(cols):
            tile = bins[redges[i]:redges[i + 1], cedges[j]:cedges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=N_BINS).astype(np.float64)
            limit = max(clip_limit * tile.size / N_BINS, 1.0)
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / N_BINS
            cdf = np.cumsum(hist)
            luts[i, j] = cdf / cdf[-1]
    rcent = (redges[:-1] + redges[1:]) / 2.0
    ccent = (cedges[:-1] + cedges[1:]) / 2.0
    return luts, rcent, ccent


def _interp_index(centers: np.ndarray, n: int):
    pos = np.interp(np.arange(n) + 0.5, centers, np.arange(len(centers), dtype=np.float64))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(centers) - 1)
    return lo, hi, pos - lo


def equalize_luminance(bins: np.ndarray, params: ClaheParams) -> np.ndarray:
    """Contrast-limited adaptive equalization of a 2-D luminance bin map.

    Each tile's histogram is clipped at ``clip_limit`` times the mean bin count,
    the clipped mass is spread evenly over all bins (one pass), and tile
    mappings are blended bilinearly between tile centers.
    """
    h, w = bins.shape
    rows, cols = params.tile_grid
    if max(rows, cols) > min(h, w) // 2:
        raise ValueError(f"tile_grid {params.tile_grid} too large for {h}x{w} image")
    luts, rcent, ccent = _tile_luts(bins, rows, cols, params.clip_limit)
    r0, r1, wr = _interp_index(rcent, h)
    c0, c1, wc = _interp_index(ccent, w)
    R0, R1, WR = r0[:, None], r1[:, None], wr[:, None]
    C0, C1, WC = c0[None, :], c1[None, :], wc[None, :]
    top = luts[R0, C0, bins] * (1 - WC) + luts[R0, C1, bins] * WC
    bot = luts[R1, C0, bins] * (1 - WC) + luts[R1, C1, bins] * WC
    return top * (1 - WR) + bot * WR


def clahe(img: np.ndarray, params: ClaheParams | None = None) -> np.ndarray:
    """Apply CLAHE to the luminance of an RGB image, keeping chroma differences."""
    params = params or ClaheParams()
    img = validate_image(img)
    y, cb, cr = rgb_to_luma_chroma(img)
    y_eq = equalize_luminance(luminance_bins(img), params)
    return np.clip(luma_chroma_to_rgb(y_eq, cb, cr), 0.0, 1.0)
