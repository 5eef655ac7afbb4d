import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upres.errors import DecodeError
from upres.imaging import (
    ImageBuffer,
    ResampleSpec,
    _resize_cols,
    _resize_rows,
    lanczos_weight,
    load_image,
    resize,
    save_jpeg,
    save_png,
    standardize_square,
)

# Frozen via the scalar oracle below (50-digit mpmath agrees to 1e-16).
LANCZOS_HALF_A3 = 0.6079271018540266


def oracle_lanczos(x: float, a: int) -> float:
    """Scalar reference: explicit sinc(x) * sinc(x/a), no shared code."""
    if abs(x) >= a:
        return 0.0
    if x == 0.0:
        return 1.0
    s1 = math.sin(math.pi * x) / (math.pi * x)
    s2 = math.sin(math.pi * x / a) / (math.pi * x / a)
    return s1 * s2


def oracle_resize(arr: np.ndarray, dst_w: int, dst_h: int, a: int = 3) -> np.ndarray:
    """Brute-force separable resampler: plain loops, pixel centers,
    clamp-to-edge, per-output-pixel weight normalization."""

    def one_axis(src_len, dst_len, fetch, out_shape):
        scale = src_len / dst_len
        fs = max(1.0, scale)
        out = np.zeros(out_shape)
        for i in range(dst_len):
            center = (i + 0.5) * scale
            lo = math.floor(center - a * fs + 0.5)
            hi = math.ceil(center + a * fs - 0.5)
            acc = np.zeros(out_shape[1:])
            wsum = 0.0
            for s in range(lo, hi + 1):
                w = oracle_lanczos((s + 0.5 - center) / fs, a)
                acc = acc + w * fetch(min(max(s, 0), src_len - 1))
                wsum += w
            out[i] = acc / wsum
        return out

    src_h, src_w, ch = arr.shape
    rows = one_axis(src_h, dst_h, lambda s: arr[s], (dst_h, src_w, ch))
    cols = one_axis(src_w, dst_w, lambda s: rows[:, s], (dst_w, dst_h, ch))
    return cols.transpose(1, 0, 2)


class TestLanczosWeight:
    def test_center_is_one(self):
        assert lanczos_weight(0.0, 3) == 1.0

    @pytest.mark.parametrize("n", [-2, -1, 1, 2])
    def test_integer_zero_crossings(self, n):
        assert lanczos_weight(float(n), 3) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("x", [3.0, -3.0, 3.5, 100.0])
    def test_zero_outside_support(self, x):
        assert lanczos_weight(x, 3) == 0.0

    def test_half_sample_value(self):
        got = lanczos_weight(0.5, 3)
        assert got == pytest.approx(LANCZOS_HALF_A3, abs=1e-12)
        assert got == pytest.approx(oracle_lanczos(0.5, 3), abs=1e-15)

    @given(st.floats(-8, 8, allow_nan=False), st.integers(1, 5))
    def test_symmetry(self, x, a):
        assert lanczos_weight(x, a) == lanczos_weight(-x, a)

    @given(st.floats(-8, 8), st.integers(1, 5))
    def test_matches_oracle_everywhere(self, x, a):
        assert lanczos_weight(x, a) == pytest.approx(oracle_lanczos(x, a), abs=1e-12)

    def test_rejects_bad_lobe_count(self):
        with pytest.raises(ValueError):
            lanczos_weight(0.5, 0)


class TestResize:
    def test_constant_image_partition_of_unity(self):
        img = ImageBuffer.full(100, 60, 0.25)
        out = resize(img, ResampleSpec(256, 256))
        assert out.width == 256 and out.height == 256
        assert np.abs(out.pixels - 0.25).max() <= 1e-6

    def test_identity_resize(self, gradient_16):
        out = resize(gradient_16, ResampleSpec(16, 16))
        assert np.abs(out.pixels - gradient_16.pixels).max() <= 1e-6

    def test_row_upsample_matches_bruteforce(self):
        row = np.array([0.0, 1.0, 0.0, 1.0])
        arr = np.stack([row] * 3, axis=-1)[None, :, :]  # 1x4x3
        img = ImageBuffer(arr)
        out = resize(img, ResampleSpec(8, 1))
        expected = np.clip(oracle_resize(arr, 8, 1), 0.0, 1.0)
        assert np.abs(out.pixels - expected).max() <= 1e-9

    @pytest.mark.parametrize("dst", [(7, 5), (23, 9), (4, 12)])
    def test_general_resize_matches_bruteforce(self, dst, gradient_16):
        dw, dh = dst
        out = resize(gradient_16, ResampleSpec(dw, dh))
        expected = np.clip(oracle_resize(gradient_16.pixels, dw, dh), 0.0, 1.0)
        assert np.abs(out.pixels - expected).max() <= 1e-9

    def test_separability_both_orders(self, gradient_16):
        arr = gradient_16.pixels
        rows_first = _resize_cols(_resize_rows(arr, 11, "lanczos", 3), 9, "lanczos", 3)
        cols_first = _resize_rows(_resize_cols(arr, 9, "lanczos", 3), 11, "lanczos", 3)
        combined = resize(gradient_16, ResampleSpec(9, 11)).pixels
        assert np.abs(rows_first - cols_first).max() <= 1e-6
        assert np.abs(np.clip(rows_first, 0, 1) - combined).max() <= 1e-6

    def test_downscale_then_upscale_constant(self):
        img = ImageBuffer.full(64, 64, 0.7)
        down = resize(img, ResampleSpec(16, 16))
        up = resize(down, ResampleSpec(64, 64))
        assert np.abs(up.pixels - 0.7).max() <= 1e-6

    def test_output_stays_in_range(self, checkerboard_16):
        out = resize(checkerboard_16, ResampleSpec(37, 11))
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    @pytest.mark.parametrize("kernel", ["nearest", "bilinear"])
    def test_other_kernels_preserve_constants(self, kernel):
        img = ImageBuffer.full(13, 7, 0.42)
        out = resize(img, ResampleSpec(29, 17, kernel=kernel))
        assert np.abs(out.pixels - 0.42).max() <= 1e-9

    def test_nearest_identity_is_exact(self, checkerboard_16):
        out = resize(checkerboard_16, ResampleSpec(16, 16, kernel="nearest"))
        assert np.array_equal(out.pixels, checkerboard_16.pixels)

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 24),
        st.integers(1, 24),
        st.integers(1, 24),
        st.integers(1, 24),
        st.floats(0.0, 1.0),
    )
    def test_constant_invariant_random_dims(self, sw, sh, dw, dh, value):
        out = resize(ImageBuffer.full(sw, sh, value), ResampleSpec(dw, dh))
        assert np.abs(out.pixels - value).max() <= 1e-6

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ResampleSpec(0, 10)
        with pytest.raises(ValueError):
            ResampleSpec(10, 10, kernel="bicubic")
        with pytest.raises(ValueError):
            ResampleSpec(10, 10, kernel="lanczos", support_a=0)


class TestStandardizeSquare:
    def test_low_res_cutout_to_1024(self):
        img = ImageBuffer.full(60, 60, 0.5)
        out = standardize_square(img, 1024)
        assert (out.width, out.height) == (1024, 1024)

    def test_average_cutout_to_256(self):
        img = ImageBuffer.full(100, 100, 0.5)
        out = standardize_square(img, 256)
        assert (out.width, out.height) == (256, 256)

    def test_square_identity(self, gradient_16):
        out = standardize_square(gradient_16, 16)
        assert np.abs(out.pixels - gradient_16.pixels).max() <= 1e-6

    def test_stretch_is_anisotropic(self):
        arr = np.zeros((10, 30, 3))
        arr[:, :15] = 1.0  # left half white
        out = standardize_square(ImageBuffer(arr), 20)
        assert (out.width, out.height) == (20, 20)
        # left half still white after the stretch, no letterboxing rows
        assert out.pixels[10, 3, 0] > 0.9
        assert out.pixels[0, :, 0].max() > 0.5

    def test_pad_mode_letterboxes(self):
        img = ImageBuffer.full(30, 10, 1.0)
        out = standardize_square(img, 30, mode="pad")
        assert (out.width, out.height) == (30, 30)
        assert out.pixels[0, 0, 0] == 0.0  # letterbox band
        assert out.pixels[15, 15, 0] == 1.0

    def test_rejects_bad_side(self):
        with pytest.raises(ValueError):
            standardize_square(ImageBuffer.full(4, 4, 0.0), 0)


class TestCodecs:
    def test_png_round_trip_lossless(self, gradient_16):
        data = save_png(gradient_16)
        back = load_image(data)
        quantized = np.round(gradient_16.pixels * 255.0) / 255.0
        assert np.abs(back.pixels - quantized).max() <= 1e-12

    def test_truncated_stream_raises(self, gradient_16):
        data = save_png(gradient_16)
        with pytest.raises(DecodeError):
            load_image(data[: len(data) // 2])
        with pytest.raises(DecodeError):
            load_image(b"not an image at all")

    def test_jpeg_q100_close_on_gradient(self, gradient_16):
        back = load_image(save_jpeg(gradient_16, quality=100))
        assert np.abs(back.pixels - gradient_16.pixels).max() <= 0.02

    def test_jpeg_quality_range(self, gradient_16):
        with pytest.raises(ValueError):
            save_jpeg(gradient_16, quality=0)


class TestImageBuffer:
    def test_shape_and_range_validation(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2, 3), 1.5))
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((0, 4, 3)))

    def test_pixel_count_invariant(self, gradient_16):
        img = gradient_16
        assert img.pixels.size == img.width * img.height * img.channels
