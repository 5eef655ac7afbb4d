"""Raster images, windowed-sinc resampling and square standardization.

Pixel data is float64 in [0, 1], shape (height, width, 3), RGB order,
row-major and channel-interleaved. Quantization to 8 bits happens only at
the PNG/JPEG encode/decode boundary.

The resampler is separable (rows then columns). Sample positions follow the
pixel-center convention: source pixel ``s`` sits at coordinate ``s + 0.5``.
Out-of-range taps are clamped to the edge pixel, and the weights of every
output pixel are normalized to sum to one, so constant images survive any
resize exactly (up to float rounding).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError

CHANNELS = 3

KERNELS = ("lanczos", "nearest", "bilinear")

DEFAULT_LOBES = 3


class ImageBuffer:
    """Decoded raster: float64 pixels in [0, 1], shape (h, w, 3)."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.ascontiguousarray(pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != CHANNELS:
            raise ValueError(f"pixels must have shape (h, w, {CHANNELS}), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.isfinite(arr).all():
            raise ValueError("pixels must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        self.pixels = arr

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return CHANNELS

    @classmethod
    def full(cls, width: int, height: int, value: float) -> "ImageBuffer":
        """Constant image of the given value."""
        return cls(np.full((height, width, CHANNELS), float(value)))

    @classmethod
    def from_clamped(cls, arr: np.ndarray) -> "ImageBuffer":
        """Build a buffer from raw math output, clamping into [0, 1]."""
        return cls(np.clip(arr, 0.0, 1.0))

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.pixels.copy())


@dataclass
class ResampleSpec:
    """Target size plus the kernel used to get there."""

    target_width: int
    target_height: int
    kernel: str = "lanczos"
    support_a: int = DEFAULT_LOBES

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.kernel == "lanczos" and self.support_a < 1:
            raise ValueError(f"support_a must be >= 1 for the lanczos kernel, got {self.support_a}")
        if self.target_width < 1 or self.target_height < 1:
            raise ValueError(
                f"target dimensions must be >= 1, got {self.target_width}x{self.target_height}"
            )


def lanczos_weight(x: float, a: int) -> float:
    """Windowed-sinc kernel: sinc(x) * sinc(x/a) for |x| < a, else 0.

    Uses the normalized sinc, so L(0) = 1 and L(n) = 0 at every other
    integer inside the window.
    """
    if a < 1:
        raise ValueError(f"lobe count a must be >= 1, got {a}")
    ax = abs(x)
    if ax >= a:
        return 0.0
    if ax < 1e-12:  # Taylor limit; also avoids (pi*x)^2 underflow
        return 1.0
    px = math.pi * x
    # sinc(x) * sinc(x/a) == a*sin(pi x)*sin(pi x / a) / (pi x)^2
    return a * math.sin(px) * math.sin(px / a) / (px * px)


def _lanczos_profile(x: np.ndarray, a: int) -> np.ndarray:
    out = np.zeros_like(x)
    inside = np.abs(x) < a
    xs = x[inside]
    px = np.pi * xs
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = a * np.sin(px) * np.sin(px / a) / (px * px)
    out[inside] = np.where(np.abs(xs) < 1e-12, 1.0, vals)
    return out


def _axis_weights(src: int, dst: int, kernel: str, a: int) -> np.ndarray:
    """Resampling matrix (dst, src) for one axis.

    Clamp-to-edge taps fold onto the boundary pixels; every row is
    normalized to sum to one. Kernels widen by the scale factor when
    downsampling so they keep acting as low-pass filters.
    """
    scale = src / dst
    centers = (np.arange(dst) + 0.5) * scale
    weights = np.zeros((dst, src))
    if kernel == "nearest":
        idx = np.minimum(np.floor(centers).astype(int), src - 1)
        weights[np.arange(dst), idx] = 1.0
        return weights
    fscale = max(1.0, scale)
    support = (a if kernel == "lanczos" else 1.0) * fscale
    for i in range(dst):
        lo = math.floor(centers[i] - support + 0.5)
        hi = math.ceil(centers[i] + support - 0.5)
        taps = np.arange(lo, hi + 1)
        x = (taps + 0.5 - centers[i]) / fscale
        if kernel == "lanczos":
            kw = _lanczos_profile(x, a)
        else:
            kw = np.maximum(0.0, 1.0 - np.abs(x))
        np.add.at(weights[i], np.clip(taps, 0, src - 1), kw)
        weights[i] /= weights[i].sum()
    return weights


def _resize_rows(arr: np.ndarray, target_height: int, kernel: str, a: int) -> np.ndarray:
    w = _axis_weights(arr.shape[0], target_height, kernel, a)
    return np.tensordot(w, arr, axes=(1, 0))


def _resize_cols(arr: np.ndarray, target_width: int, kernel: str, a: int) -> np.ndarray:
    w = _axis_weights(arr.shape[1], target_width, kernel, a)
    return np.tensordot(w, arr, axes=(1, 1)).transpose(1, 0, 2)


def resize(img: ImageBuffer, spec: ResampleSpec) -> ImageBuffer:
    """Separable resize to the spec's target size, clamped to [0, 1]."""
    if img.pixels.size == 0:
        raise ValueError("cannot resize an empty image")
    out = _resize_rows(img.pixels, spec.target_height, spec.kernel, spec.support_a)
    out = _resize_cols(out, spec.target_width, spec.kernel, spec.support_a)
    return ImageBuffer.from_clamped(out)


def standardize_square(
    img: ImageBuffer,
    side: int,
    mode: str = "stretch",
    kernel: str = "lanczos",
    support_a: int = DEFAULT_LOBES,
) -> ImageBuffer:
    """Bring an image to side x side.

    ``stretch`` (the default) resizes anisotropically; broadcast cutouts are
    close to square already and models expect a full-frame square input.
    ``pad`` fits the longest side and letterboxes the rest with black.
    """
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    if mode == "stretch":
        return resize(img, ResampleSpec(side, side, kernel, support_a))
    if mode == "pad":
        if img.width >= img.height:
            fit_w, fit_h = side, max(1, round(side * img.height / img.width))
        else:
            fit_w, fit_h = max(1, round(side * img.width / img.height)), side
        fitted = resize(img, ResampleSpec(fit_w, fit_h, kernel, support_a))
        canvas = np.zeros((side, side, CHANNELS))
        y0 = (side - fit_h) // 2
        x0 = (side - fit_w) // 2
        canvas[y0 : y0 + fit_h, x0 : x0 + fit_w] = fitted.pixels
        return ImageBuffer(canvas)
    raise ValueError(f"unknown standardization mode {mode!r}")


def to_uint8(img: ImageBuffer) -> np.ndarray:
    """Quantize to 8-bit (round(v * 255))."""
    return np.round(img.pixels * 255.0).astype(np.uint8)


def load_image(data: bytes) -> ImageBuffer:
    """Decode PNG or JPEG bytes; 8-bit values map to [0, 1] by v / 255."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode image stream: {exc}") from exc
    return ImageBuffer(arr)


def save_png(img: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_jpeg(img: ImageBuffer, quality: int = 95) -> bytes:
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    # full chroma at high quality, otherwise 4:2:0 dominates the error
    subsampling = 0 if quality >= 95 else 2
    Image.fromarray(to_uint8(img), mode="RGB").save(
        buf, format="JPEG", quality=quality, subsampling=subsampling
    )
    return buf.getvalue()
