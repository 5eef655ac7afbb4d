import math

import numpy as np
import pytest

from upres.degrade import (
    DegradationSpec,
    DegradationStep,
    broadcast_cutout_spec,
    gaussian_blur,
    gaussian_noise,
    jpeg_artifacts,
    jpeg_quant_table,
    poisson_noise,
    synthesize_fixture,
)
from upres.imaging import ImageBuffer, save_png
from upres.metrics import psnr


def oracle_gaussian_kernel(sigma: float) -> list[float]:
    """Independent kernel table: radius ceil(3*sigma), normalized."""
    radius = math.ceil(3 * sigma)
    raw = [math.exp(-0.5 * (i / sigma) ** 2) for i in range(-radius, radius + 1)]
    total = sum(raw)
    return [v / total for v in raw]


def oracle_dct_block(block: np.ndarray) -> np.ndarray:
    """Textbook 8x8 forward DCT-II with JPEG normalization."""
    out = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            cu = 1 / math.sqrt(2) if u == 0 else 1.0
            cv = 1 / math.sqrt(2) if v == 0 else 1.0
            acc = 0.0
            for x in range(8):
                for y in range(8):
                    acc += (
                        block[x, y]
                        * math.cos((2 * x + 1) * u * math.pi / 16)
                        * math.cos((2 * y + 1) * v * math.pi / 16)
                    )
            out[u, v] = 0.25 * cu * cv * acc
    return out


class TestGaussianNoise:
    def test_sigma_zero_is_identity(self, gradient_16):
        out = gaussian_noise(gradient_16, 0.0, seed=3)
        assert np.array_equal(out.pixels, gradient_16.pixels)

    def test_moments_on_gray_card(self):
        img = ImageBuffer.full(128, 128, 0.5)
        out = gaussian_noise(img, 0.05, seed=42)
        assert out.pixels.mean() == pytest.approx(0.5, abs=0.003)
        assert out.pixels.std() == pytest.approx(0.05, abs=0.005)

    def test_same_seed_identical(self, gradient_16):
        a = gaussian_noise(gradient_16, 0.1, seed=7)
        b = gaussian_noise(gradient_16, 0.1, seed=7)
        assert np.array_equal(a.pixels, b.pixels)
        c = gaussian_noise(gradient_16, 0.1, seed=8)
        assert not np.array_equal(a.pixels, c.pixels)

    def test_preserves_dims_and_range(self, checkerboard_16):
        out = gaussian_noise(checkerboard_16, 0.3, seed=1)
        assert out.pixels.shape == checkerboard_16.pixels.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_negative_sigma_rejected(self, gradient_16):
        with pytest.raises(ValueError):
            gaussian_noise(gradient_16, -0.1, seed=0)


class TestPoissonNoise:
    def test_zero_stays_zero(self):
        img = ImageBuffer.full(32, 32, 0.0)
        out = poisson_noise(img, 256.0, seed=5)
        assert np.array_equal(out.pixels, img.pixels)

    def test_variance_law(self):
        img = ImageBuffer.full(128, 128, 0.5)
        out = poisson_noise(img, 256.0, seed=9)
        assert out.pixels.mean() == pytest.approx(0.5, abs=0.005)
        expected_var = 0.5 / 256.0
        assert abs(out.pixels.var() - expected_var) <= 0.3 * expected_var

    def test_same_seed_identical(self, gradient_16):
        a = poisson_noise(gradient_16, 128.0, seed=11)
        b = poisson_noise(gradient_16, 128.0, seed=11)
        assert np.array_equal(a.pixels, b.pixels)

    def test_scale_must_be_positive(self, gradient_16):
        with pytest.raises(ValueError):
            poisson_noise(gradient_16, 0.0, seed=0)


class TestGaussianBlur:
    def test_constant_unchanged(self):
        img = ImageBuffer.full(24, 24, 0.37)
        out = gaussian_blur(img, 1.5)
        assert np.abs(out.pixels - 0.37).max() <= 1e-6

    def test_impulse_peak_matches_kernel_table(self):
        arr = np.zeros((9, 9, 3))
        arr[4, 4] = 1.0
        out = gaussian_blur(ImageBuffer(arr), 1.0)
        k = oracle_gaussian_kernel(1.0)
        peak = k[len(k) // 2] ** 2
        assert out.pixels[4, 4, 0] == pytest.approx(peak, abs=1e-12)

    def test_semigroup_property(self):
        rng = np.random.default_rng(13)
        img = ImageBuffer(rng.random((32, 32, 3)))
        twice = gaussian_blur(gaussian_blur(img, 1.0), 1.0)
        once = gaussian_blur(img, math.sqrt(2.0))
        mad = np.abs(twice.pixels - once.pixels).mean()
        assert mad <= 0.01

    def test_sigma_must_be_positive(self, gradient_16):
        with pytest.raises(ValueError):
            gaussian_blur(gradient_16, 0.0)


class TestJpegArtifacts:
    @pytest.mark.parametrize("quality", [10, 35, 60, 85, 100])
    @pytest.mark.parametrize("value", [0.0, 0.5, 1.0])
    def test_constant_nearly_unchanged(self, quality, value):
        img = ImageBuffer.full(16, 16, value)
        out = jpeg_artifacts(img, quality)
        assert np.abs(out.pixels - value).max() <= 1.0 / 255.0

    def test_quality_100_near_lossless(self, gradient_16):
        out = jpeg_artifacts(gradient_16, 100)
        assert np.abs(out.pixels - gradient_16.pixels).max() <= 0.01
        assert np.all(jpeg_quant_table(100) == 1.0)

    def test_quality_10_blocks_checkerboard(self, checkerboard_16):
        out = jpeg_artifacts(checkerboard_16, 10)
        assert psnr(checkerboard_16, out) <= 30.0

    def test_dct_matches_textbook_formula(self):
        rng = np.random.default_rng(17)
        block = rng.random((8, 8)) * 255.0 - 128.0
        from scipy import fft as sfft

        fast = sfft.dctn(block, type=2, norm="ortho")
        assert np.abs(fast - oracle_dct_block(block)).max() <= 1e-9

    def test_non_multiple_of_eight_dims(self):
        rng = np.random.default_rng(19)
        img = ImageBuffer(rng.random((13, 22, 3)))
        out = jpeg_artifacts(img, 50)
        assert out.pixels.shape == img.pixels.shape

    def test_quality_range_enforced(self, gradient_16):
        with pytest.raises(ValueError):
            jpeg_artifacts(gradient_16, 5)


class TestSynthesizeFixture:
    def gt(self, side=256, value=0.5):
        return ImageBuffer.full(side, side, value)

    def test_empty_steps_identity(self):
        gt = self.gt()
        out, manifest = synthesize_fixture(gt, DegradationSpec(steps=[], seed=1))
        assert np.array_equal(out.pixels, gt.pixels)
        assert manifest["steps"] == []

    def test_downsample_factor_16_geometry(self):
        gt = self.gt(side=1024)
        spec = DegradationSpec(
            steps=[DegradationStep("downsample", {"factor": 16, "method": "lanczos"})],
            seed=2,
        )
        out, manifest = synthesize_fixture(gt, spec)
        assert (out.width, out.height) == (64, 64)
        assert manifest["output_size"] == [64, 64]

    def test_second_order_chain_reproducible(self):
        rng = np.random.default_rng(23)
        gt = ImageBuffer(rng.random((256, 256, 3)))
        spec = broadcast_cutout_spec(seed=77)
        out1, man1 = synthesize_fixture(gt, spec)
        out2, man2 = synthesize_fixture(gt, spec)
        assert save_png(out1) == save_png(out2)
        assert man1 == man2
        # 256 -> /4 -> /4 = 16 px after two passes
        assert (out1.width, out1.height) == (16, 16)

    def test_passes_draw_independent_params(self):
        rng = np.random.default_rng(29)
        gt = ImageBuffer(rng.random((256, 256, 3)))
        spec = DegradationSpec(
            steps=[DegradationStep("gaussian_noise", {"sigma": (0.01, 0.3)})],
            orders=2,
            seed=5,
        )
        _, manifest = synthesize_fixture(gt, spec)
        sigmas = [s["params"]["sigma"] for s in manifest["steps"]]
        assert len(sigmas) == 2
        assert sigmas[0] != sigmas[1]

    def test_near_identity_chain(self):
        rng = np.random.default_rng(31)
        gt = ImageBuffer(rng.random((256, 256, 3)))
        spec = DegradationSpec(
            steps=[
                DegradationStep("gaussian_noise", {"sigma": 0.0}),
                DegradationStep("jpeg_artifacts", {"quality": 100}),
            ],
            seed=3,
        )
        out, _ = synthesize_fixture(gt, spec)
        assert np.abs(out.pixels - gt.pixels).max() <= 0.02

    def test_small_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            synthesize_fixture(ImageBuffer.full(100, 100, 0.5), DegradationSpec())

    def test_out_of_range_params_rejected(self):
        gt = self.gt()
        bad = DegradationSpec(steps=[DegradationStep("gaussian_noise", {"sigma": 0.5})])
        with pytest.raises(ValueError):
            synthesize_fixture(gt, bad)
        with pytest.raises(ValueError):
            DegradationSpec(orders=3).validate()
        with pytest.raises(ValueError):
            DegradationStep("downsample", {"factor": 4, "method": "area"}).validate()

    def test_manifest_records_realized_params(self):
        gt = self.gt()
        spec = DegradationSpec(
            steps=[DegradationStep("jpeg_artifacts", {"quality": (30, 70)})], seed=9
        )
        _, manifest = synthesize_fixture(gt, spec)
        q = manifest["steps"][0]["params"]["quality"]
        assert 30 <= q <= 70
        assert manifest["steps"][0]["substream"] == [9, 0, 0]
