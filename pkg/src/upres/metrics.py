"""Full-reference scoring (MSE/PSNR/SSIM) and blind sharpness ranking.

SSIM uses an 8x8 sliding uniform window over every fully contained
position, computed per RGB channel and averaged; no luma conversion, so
numbers are only meant for relative ranking across runs of this tool.
Variances are population variances (divide by N).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .imaging import ImageBuffer

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 8

LAPLACIAN_3X3 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _check_same_shape(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def mse(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean squared error over all samples, on the [0, 1] scale."""
    _check_same_shape(a, b)
    diff = a.pixels - b.pixels
    return float(np.mean(diff * diff))


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """10*log10(1/mse), capped at 99 dB so reports stay finite and sortable."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / m)))


def _window_sums(x: np.ndarray, n: int) -> np.ndarray:
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[n:, n:] - c[:-n, n:] - c[n:, :-n] + c[:-n, :-n]


def _ssim_channel(x: np.ndarray, y: np.ndarray, n: int, k1: float, k2: float) -> float:
    area = float(n * n)
    mx = _window_sums(x, n) / area
    my = _window_sums(y, n) / area
    vx = _window_sums(x * x, n) / area - mx * mx
    vy = _window_sums(y * y, n) / area - my * my
    cxy = _window_sums(x * y, n) / area - mx * my
    c1 = k1 * k1  # dynamic range L == 1
    c2 = k2 * k2
    s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / (
        (mx * mx + my * my + c1) * (vx + vy + c2)
    )
    return float(s.mean())


def ssim(
    a: ImageBuffer,
    b: ImageBuffer,
    window: int = SSIM_WINDOW,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local structural similarity in [-1, 1]."""
    _check_same_shape(a, b)
    if a.height < window or a.width < window:
        raise ValueError(
            f"image {a.width}x{a.height} smaller than the {window}x{window} window"
        )
    vals = [
        _ssim_channel(a.pixels[..., c], b.pixels[..., c], window, k1, k2)
        for c in range(a.channels)
    ]
    return float(np.mean(vals))


def sharpness(img: ImageBuffer) -> float:
    """Variance of the 3x3 Laplacian response on channel-mean intensity.

    The response is taken over the interior (valid positions only); higher
    means crisper edges.
    """
    if img.height < 3 or img.width < 3:
        raise ValueError("image must be at least 3x3")
    g = img.pixels.mean(axis=2)
    r = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return float(r.var())


@dataclass
class CandidateScore:
    candidate_id: str
    sharpness: float
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    rank: int = 0

    def to_dict(self) -> dict:
        return {
            "candidate_id": self.candidate_id,
            "sharpness": self.sharpness,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "rank": self.rank,
        }


@dataclass
class ComparisonReport:
    blind: bool
    scores: list[CandidateScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"blind": self.blind, "scores": [s.to_dict() for s in self.scores]}


def compare_report(
    candidates: Sequence[tuple[str, ImageBuffer]],
    ground_truth: Optional[ImageBuffer] = None,
) -> ComparisonReport:
    """Score and rank candidates.

    With ground truth: rank by (SSIM desc, PSNR desc, id asc). Blind: rank
    by sharpness desc, id asc. The ordering is deterministic for identical
    inputs.
    """
    if not candidates:
        raise ValueError("at least one candidate is required")
    scores = []
    for cid, img in candidates:
        s = CandidateScore(candidate_id=str(cid), sharpness=sharpness(img))
        if ground_truth is not None:
            s.psnr = psnr(ground_truth, img)
            s.ssim = ssim(ground_truth, img)
        scores.append(s)
    if ground_truth is not None:
        scores.sort(key=lambda s: (-s.ssim, -s.psnr, s.candidate_id))
    else:
        scores.sort(key=lambda s: (-s.sharpness, s.candidate_id))
    for i, s in enumerate(scores):
        s.rank = i + 1
    return ComparisonReport(blind=ground_truth is None, scores=scores)
