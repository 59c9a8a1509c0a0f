"""Separable Catmull-Rom bicubic resampling (a = -0.5), edge-clamped.

Images are channel-first (C, H, W) float arrays. Accumulation runs in float64
and results are returned as float32. Sample positions follow the half-pixel
convention src = (dst + 0.5) * (src_size / dst_size) - 0.5.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import InvalidArgumentError

KERNEL_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = KERNEL_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    m1 = x <= 1.0
    m2 = (x > 1.0) & (x < 2.0)
    out[m1] = (a + 2.0) * x[m1] ** 3 - (a + 3.0) * x[m1] ** 2 + 1.0
    out[m2] = a * x[m2] ** 3 - 5.0 * a * x[m2] ** 2 + 8.0 * a * x[m2] - 4.0 * a
    return out


@functools.lru_cache(maxsize=256)
def _taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Clamped tap indices (dst, 4) and weights (dst, 4) for one axis."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    base = np.floor(pos).astype(np.int64)
    idx = base[:, None] + np.arange(-1, 3)[None, :]
    w = cubic_kernel(pos[:, None] - idx)
    idx = np.clip(idx, 0, src - 1)
    return idx, w


def _resample_axis(img: np.ndarray, dst: int) -> np.ndarray:
    """Resample the last axis of img to length dst."""
    idx, w = _taps(img.shape[-1], dst)
    gathered = img[..., idx]  # (..., dst, 4)
    return np.einsum("...dk,dk->...d", gathered, w)


def resample_cubic(image: np.ndarray, target: int) -> np.ndarray:
    """Resample a (C, H, W) image to (C, target, target)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidArgumentError(f"expected (C, H, W), got shape {image.shape}")
    if target < 4:
        raise InvalidArgumentError(f"target size must be >= 4, got {target}")
    out = np.ascontiguousarray(image, dtype=np.float64)
    out = _resample_axis(out, target)            # width
    out = _resample_axis(out.swapaxes(-1, -2), target).swapaxes(-1, -2)  # height
    return out.astype(np.float32)
