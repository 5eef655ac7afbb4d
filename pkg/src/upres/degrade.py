"""Seeded synthetic degradations for building desk-scale test fixtures.

Ground-truth images are damaged with the same family of operators the
upscaler ControlNet's training data used: Gaussian and Poisson noise,
Gaussian blur, JPEG compression artifacts and downsampling, optionally
applied as a second-order chain (the whole step list runs twice with
freshly drawn parameters).

Randomness comes from Philox streams keyed by
``SeedSequence([seed, pass_index, step_index])``, so every step owns an
independent sub-stream and identical (input, spec, seed) always yields
byte-identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .imaging import ImageBuffer, KERNELS, ResampleSpec, resize

Param = Union[float, int, tuple, list]

STEP_KINDS = ("gaussian_noise", "poisson_noise", "gaussian_blur", "jpeg_artifacts", "downsample")

# valid parameter ranges per step kind: (lo, hi, lo_exclusive)
PARAM_RANGES = {
    ("gaussian_noise", "sigma"): (0.0, 0.3, False),
    ("poisson_noise", "scale"): (0.0, 1024.0, True),
    ("gaussian_blur", "sigma"): (0.0, 5.0, True),
    ("jpeg_artifacts", "quality"): (10.0, 100.0, False),
    ("downsample", "factor"): (2.0, 16.0, False),
}

# ITU T.81 Annex K.1 luminance quantization table.
JPEG_LUMA_QUANT = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _substream(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, path)])))


@dataclass
class DegradationStep:
    """One degradation operator plus its parameters.

    A parameter may be a scalar (applied as-is) or a [lo, hi] pair, in which
    case each pass draws a fresh value uniformly from its sub-stream and the
    realized value lands in the fixture manifest.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown degradation step kind {self.kind!r}")
        for (kind, name), (lo, hi, lo_excl) in PARAM_RANGES.items():
            if kind != self.kind:
                continue
            if name not in self.params:
                raise ValueError(f"{self.kind} requires parameter {name!r}")
            value = self.params[name]
            endpoints = list(value) if isinstance(value, (tuple, list)) else [value]
            if isinstance(value, (tuple, list)) and len(value) != 2:
                raise ValueError(f"{self.kind}.{name} range must be a [lo, hi] pair")
            for v in endpoints:
                v = float(v)
                if v < lo or v > hi or (lo_excl and v <= lo):
                    raise ValueError(
                        f"{self.kind}.{name}={v} outside valid range "
                        f"{'(' if lo_excl else '['}{lo}, {hi}]"
                    )
        if self.kind == "downsample":
            method = self.params.get("method", "lanczos")
            if method not in KERNELS:
                raise ValueError(f"downsample method {method!r} not one of {KERNELS}")


@dataclass
class DegradationSpec:
    steps: list[DegradationStep] = field(default_factory=list)
    orders: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.orders not in (1, 2):
            raise ValueError(f"orders must be 1 or 2, got {self.orders}")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")
        for step in self.steps:
            step.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        steps = [DegradationStep(kind=s["kind"], params=dict(s.get("params", {}))) for s in d.get("steps", [])]
        spec = cls(steps=steps, orders=int(d.get("orders", 1)), seed=int(d.get("seed", 0)))
        spec.validate()
        return spec


def gaussian_noise(img: ImageBuffer, sigma: float, seed: int) -> ImageBuffer:
    """Add i.i.d. zero-mean normal noise per channel, then clamp."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    return ImageBuffer(_gaussian_noise_arr(img.pixels, sigma, _substream(seed)))


def _gaussian_noise_arr(arr: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return arr.copy()
    return np.clip(arr + rng.normal(0.0, sigma, size=arr.shape), 0.0, 1.0)


def poisson_noise(img: ImageBuffer, scale: float, seed: int) -> ImageBuffer:
    """Per pixel v -> Poisson(v * scale) / scale, seeded, clamped."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    return ImageBuffer(_poisson_noise_arr(img.pixels, scale, _substream(seed)))


def _poisson_noise_arr(arr: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(rng.poisson(arr * scale) / scale, 0.0, 1.0)


def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    """Separable blur with a normalized Gaussian of radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return ImageBuffer(_gaussian_blur_arr(img.pixels, sigma))


def blur_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _gaussian_blur_arr(arr: np.ndarray, sigma: float) -> np.ndarray:
    k = blur_kernel(sigma)
    out = ndimage.correlate1d(arr, k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def jpeg_quant_table(quality: float) -> np.ndarray:
    """Standard luminance table scaled with the libjpeg quality curve."""
    q = int(round(quality))
    if not 1 <= q <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 // q if q < 50 else 200 - 2 * q
    table = (JPEG_LUMA_QUANT * scale + 50) // 100
    return np.clip(table, 1, 255)


def jpeg_artifacts(img: ImageBuffer, quality: float) -> ImageBuffer:
    """Blockwise 8x8 DCT quantization round trip, per channel.

    Simulates compression error without entropy coding: deterministic and
    codec-independent.
    """
    q = float(quality)
    if q < 10 or q > 100:
        raise ValueError(f"quality must be in [10, 100], got {quality}")
    return ImageBuffer(_jpeg_artifacts_arr(img.pixels, q))


def _jpeg_artifacts_arr(arr: np.ndarray, quality: float) -> np.ndarray:
    table = jpeg_quant_table(quality)
    h, w = arr.shape[:2]
    pad_h, pad_w = (-h) % 8, (-w) % 8
    padded = np.pad(arr, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    x = padded * 255.0 - 128.0
    ph, pw = x.shape[:2]
    blocks = x.reshape(ph // 8, 8, pw // 8, 8, 3).transpose(0, 2, 4, 1, 3)
    coef = sfft.dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    rec = sfft.idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    out = (rec.transpose(0, 3, 1, 4, 2).reshape(ph, pw, 3) + 128.0) / 255.0
    return np.clip(out[:h, :w], 0.0, 1.0)


def _downsample_arr(arr: np.ndarray, factor: float, method: str) -> np.ndarray:
    h, w = arr.shape[:2]
    tw = max(1, round(w / factor))
    th = max(1, round(h / factor))
    return resize(ImageBuffer(arr), ResampleSpec(tw, th, kernel=method)).pixels


def _realize_params(step: DegradationStep, rng: np.random.Generator) -> dict:
    realized = {}
    for name, value in sorted(step.params.items()):
        if isinstance(value, (tuple, list)):
            lo, hi = float(value[0]), float(value[1])
            drawn = float(rng.uniform(lo, hi))
            realized[name] = round(drawn) if step.kind == "jpeg_artifacts" else drawn
        else:
            realized[name] = value
    return realized


def _apply_step(arr: np.ndarray, kind: str, params: dict, rng: np.random.Generator) -> np.ndarray:
    if kind == "gaussian_noise":
        return _gaussian_noise_arr(arr, float(params["sigma"]), rng)
    if kind == "poisson_noise":
        return _poisson_noise_arr(arr, float(params["scale"]), rng)
    if kind == "gaussian_blur":
        return _gaussian_blur_arr(arr, float(params["sigma"]))
    if kind == "jpeg_artifacts":
        return _jpeg_artifacts_arr(arr, float(params["quality"]))
    if kind == "downsample":
        return _downsample_arr(arr, float(params["factor"]), params.get("method", "lanczos"))
    raise ValueError(f"unknown step kind {kind!r}")


def synthesize_fixture(ground_truth: ImageBuffer, spec: DegradationSpec) -> tuple[ImageBuffer, dict]:
    """Run the degradation chain and return (degraded, manifest).

    The manifest records every realized parameter, the sub-stream key of
    each step and the input/output geometry; saving it next to the PNG pair
    makes the fixture reproducible from scratch.
    """
    spec.validate()
    if ground_truth.width < 256 or ground_truth.height < 256:
        raise ValueError(
            f"ground truth must be at least 256x256, got {ground_truth.width}x{ground_truth.height}"
        )
    arr = ground_truth.pixels
    applied = []
    for pass_index in range(spec.orders):
        for step_index, step in enumerate(spec.steps):
            rng = _substream(spec.seed, pass_index, step_index)
            params = _realize_params(step, rng)
            arr = _apply_step(arr, step.kind, params, rng)
            applied.append(
                {
                    "pass": pass_index,
                    "step": step_index,
                    "kind": step.kind,
                    "params": params,
                    "substream": [spec.seed, pass_index, step_index],
                }
            )
    degraded = ImageBuffer(np.clip(arr, 0.0, 1.0))
    manifest = {
        "seed": spec.seed,
        "orders": spec.orders,
        "input_size": [ground_truth.width, ground_truth.height],
        "output_size": [degraded.width, degraded.height],
        "steps": applied,
    }
    return degraded, manifest


def broadcast_cutout_spec(seed: int, orders: int = 2) -> DegradationSpec:
    """Default chain mimicking damaged broadcast cutouts.

    Two passes of blur + noise + JPEG + 4x downsampling take a 1024 square
    ground truth to 64x64, inside the 64-100 px band real cutouts land in.
    """
    steps = [
        DegradationStep("gaussian_blur", {"sigma": (0.4, 1.2)}),
        DegradationStep("gaussian_noise", {"sigma": (0.01, 0.05)}),
        DegradationStep("jpeg_artifacts", {"quality": (30, 70)}),
        DegradationStep("downsample", {"factor": 4, "method": "lanczos"}),
    ]
    return DegradationSpec(steps=steps, orders=orders, seed=seed)
