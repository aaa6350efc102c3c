"""Separable filtering and resizing helpers shared by metrics, phantoms, and
feature resizing.  Stride-tricks windows plus a matmul; no scipy."""

import numpy as np

from .errors import DimensionError, ParameterError


def gaussian_kernel1d(size, sigma):
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate1d_along_last(img, k):
    """'valid' correlation along the last axis via a window view."""
    n = k.size
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=-1)
    return win @ k


def filter2_valid(img, k):
    """Separable 2-d correlation, valid region only: output shrinks by
    (len(k)-1) per axis."""
    if img.shape[-1] < k.size or img.shape[-2] < k.size:
        raise DimensionError(f"image {img.shape} smaller than kernel {k.size}")
    out = _correlate1d_along_last(img, k)
    out = _correlate1d_along_last(np.swapaxes(out, -1, -2), k)
    return np.swapaxes(out, -1, -2)


def filter2_same_reflect(img, k):
    """Separable 2-d correlation, same size, half-sample symmetric padding
    (edge pattern  d c b a | a b c d  on both sides)."""
    half = k.size // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(half, half), (half, half)]
    return filter2_valid(np.pad(img, pad, mode="symmetric"), k)


def downsample2(img):
    return img[..., ::2, ::2]


def bilinear_resize(img, out_h, out_w):
    """Resize the last two axes with bilinear interpolation, half-pixel
    centers (the align_corners=False convention)."""
    in_h, in_w = img.shape[-2], img.shape[-1]
    if out_h < 1 or out_w < 1:
        raise ParameterError("output dims must be positive")
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x1[None, :]]
    c = img[..., y1[:, None], x0[None, :]]
    d = img[..., y1[:, None], x1[None, :]]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return top * (1 - wy) + bot * wy
