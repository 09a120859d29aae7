"""8-bit RGB image loading and writing (PNG and PPM).

The codec pipeline is strictly 8-bit RGB: inputs carrying an alpha channel
are rejected (a dropped alpha would silently darken reconstructions), as
are 16-bit and float formats.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

_ALPHA_MODES = {"RGBA", "LA", "PA", "RGBa", "La"}
_DEEP_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


class AlphaChannelError(ValueError):
    """Input image carries an alpha channel, which this codec cannot keep."""


class UnsupportedImageError(ValueError):
    """Input image is not 8-bit RGB (or promotable grayscale)."""


class UnreadableImageError(OSError):
    """Input file could not be parsed as an image."""


def load_rgb8(path) -> np.ndarray:
    """Load an image as HxWx3 uint8, rejecting alpha and deep pixel formats."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImageError(f"cannot read image file {path}: {exc}") from exc
    mode = img.mode
    if mode in _ALPHA_MODES or (mode == "P" and "transparency" in img.info):
        raise AlphaChannelError(f"alpha channel unsupported: {path}")
    if mode in _DEEP_MODES:
        raise UnsupportedImageError(f"16-bit/float images unsupported (mode {mode}): {path}")
    if mode not in ("RGB", "L", "P", "1"):
        raise UnsupportedImageError(f"unsupported image mode {mode}: {path}")
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_png(path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"save_png expects HxWx3 uint8, got {rgb.dtype} {rgb.shape}")
    Image.fromarray(rgb, mode="RGB").save(Path(path))


def srgb_to_linear(rgb8: np.ndarray) -> np.ndarray:
    """Map 8-bit sRGB samples to linear RGB floats in [0, 1]."""
    x = np.asarray(rgb8, dtype=np.float64) / 255.0
    linear = np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)
    return linear.astype(np.float32)


def to_unit_float(rgb8: np.ndarray) -> np.ndarray:
    return np.asarray(rgb8, dtype=np.float32) / 255.0


def to_uint8(rgb01: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and quantize to 8-bit samples."""
    clipped = np.clip(np.asarray(rgb01, dtype=np.float64), 0.0, 1.0)
    return np.clip(np.floor(clipped * 255.0 + 0.5), 0, 255).astype(np.uint8)
