"""Raster type and sampling/derivative/resampling kernels.

Coordinate convention, used everywhere in this package: pixel centers sit
at integer coordinates, origin at the top-left, x grows rightward, y grows
downward.  Sampling outside [0, W-1] x [0, H-1] clamps to the border.
"""

from __future__ import annotations

import numpy as np

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


class ImageBuffer:
    """Dense float raster stored channel-interleaved as a (H, W, C) array.

    Values must be finite; [0, 1] is the convention for photographic data
    but derived maps (gradients, losses) may hold any finite float.  The
    backing array is copied on construction and marked read-only.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray, dtype=None):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected (H, W) or (H, W, C) array, got shape {arr.shape}")
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        arr = np.array(arr, dtype=dtype, copy=True)
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"degenerate image shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        """Single channel as a read-only (H, W) view."""
        if not 0 <= channel < self.channels:
            raise ValueError(f"channel {channel} out of range [0, {self.channels})")
        return self.data[:, :, channel]

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"ImageBuffer({self.width}x{self.height}x{self.channels}, {self.data.dtype})"


def sample_grid(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinearly sample a (H, W, C) array at continuous coords, border-clamped.

    xs/ys broadcast together; returns samples with shape xs.shape + (C,).
    """
    h, w = data.shape[0], data.shape[1]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    # v0 + f*(v1-v0) keeps results inside the texel hull and exact on the lattice
    top = data[y0, x0] + fx * (data[y0, x1] - data[y0, x0])
    bot = data[y1, x0] + fx * (data[y1, x1] - data[y1, x0])
    return top + fy * (bot - top)


def bilinear_sample(img: ImageBuffer, x: float, y: float, channel: int = 0) -> float:
    """Bilinear interpolation of the 4 neighboring texels at (x, y), clamped."""
    if not 0 <= channel < img.channels:
        raise ValueError(f"channel {channel} out of range [0, {img.channels})")
    return float(sample_grid(img.data[:, :, channel : channel + 1], np.float64(x), np.float64(y))[0])


def spatial_gradient(img: ImageBuffer) -> tuple[ImageBuffer, ImageBuffer]:
    """Forward-difference gradients (dx, dy); last column/row zero-padded."""
    if img.width < 2 or img.height < 2:
        raise ValueError(f"gradient needs at least 2x2 pixels, got {img.width}x{img.height}")
    d = img.data
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, :-1, :] = d[:, 1:, :] - d[:, :-1, :]
    gy[:-1, :, :] = d[1:, :, :] - d[:-1, :, :]
    return ImageBuffer(gx), ImageBuffer(gy)


def resize_bilinear(img: ImageBuffer, new_w: int, new_h: int) -> ImageBuffer:
    """Bilinear resampling with corner-aligned coordinates.

    Destination pixel i maps to source i * (src-1)/(dst-1); a resize to the
    identical size returns a value-identical buffer.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size {new_w}x{new_h} must be at least 1x1")
    if new_w == img.width and new_h == img.height:
        return ImageBuffer(img.data)
    xs = np.zeros(new_w) if new_w == 1 else np.arange(new_w) * ((img.width - 1) / (new_w - 1))
    ys = np.zeros(new_h) if new_h == 1 else np.arange(new_h) * ((img.height - 1) / (new_h - 1))
    gx, gy = np.meshgrid(xs, ys)
    return ImageBuffer(sample_grid(img.data, gx, gy).astype(img.data.dtype))


def hflip(img: ImageBuffer) -> ImageBuffer:
    """Mirror columns: out[y][x] = in[y][W-1-x], per channel."""
    return ImageBuffer(img.data[:, ::-1, :])


def grayscale(img: ImageBuffer) -> ImageBuffer:
    """Single-channel intensity; RGB collapses with fixed 0.299/0.587/0.114 weights."""
    if img.channels == 1:
        return ImageBuffer(img.data)
    if img.channels != 3:
        raise ValueError(f"grayscale expects 1 or 3 channels, got {img.channels}")
    w = np.asarray(GRAY_WEIGHTS, dtype=img.data.dtype)
    return ImageBuffer(img.data @ w)
