import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisecodec.imageio import ImageError, read_image, to_uint8, write_image
from noisecodec.metrics import MSSSIM_WEIGHTS, max_scales, ms_ssim, ms_ssim_tensor, msssim_db, psnr
from noisecodec.noise import GAIN_PRESETS, synthesize_noise
from noisecodec.tensor import Tensor, backward


def smooth_image(seed, size=96):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = [0.5 + 0.3 * np.sin(rng.uniform(2, 9) * xx + rng.uniform(2, 9) * yy + c) for c in range(3)]
    return np.clip(np.stack(out), 0, 1)


class TestPsnr:
    def test_identical_is_infinite(self):
        a = smooth_image(0)
        assert psnr(a, a) == math.inf

    def test_constant_offset(self):
        a = smooth_image(1) * 0.5
        expected = 20 * math.log10(255 / 16)
        assert psnr(a, a + 16 / 255) == pytest.approx(expected, abs=1e-9)
        assert abs(psnr(a, a + 16 / 255) - 24.05) <= 0.01

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(2, 3, 20, 20))
        assert psnr(a, b) == psnr(b, a)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestMsSsim:
    def test_identical_is_one(self):
        a = smooth_image(3, 128)
        assert abs(ms_ssim(a, a) - 1.0) <= 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = smooth_image(4)
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert ms_ssim(a, b) == ms_ssim(b, a)

    @pytest.mark.parametrize("size,scales", [(11, 1), (21, 1), (22, 2), (64, 3), (88, 4), (176, 5), (512, 5)])
    def test_scale_reduction(self, size, scales):
        assert max_scales(size, size + 7) == scales

    def test_too_small_names_minimum(self):
        a = np.zeros((3, 40, 40))
        with pytest.raises(ValueError, match="44"):
            ms_ssim(a, a, scales=3)
        with pytest.raises(ValueError, match="11x11"):
            ms_ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_single_scale_matches_direct_ssim(self):
        # independent oracle: plain 2-D window sums in float64
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(1, 30, 30))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        x = np.arange(11) - 5
        g = np.exp(-(x**2) / 4.5)
        win = np.outer(g, g) / g.sum() ** 2

        def filt(img):
            out = np.empty((20, 20))
            for i in range(20):
                for j in range(20):
                    out[i, j] = np.sum(img[i : i + 11, j : j + 11] * win)
            return out

        ma, mb = filt(a[0]), filt(b[0])
        va, vb, cov = filt(a[0] ** 2) - ma**2, filt(b[0] ** 2) - mb**2, filt(a[0] * b[0]) - ma * mb
        c1, c2 = 0.01**2, 0.03**2
        ssim = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
        assert ms_ssim(a[None], b[None], scales=1) == pytest.approx(ssim.mean(), abs=1e-10)

    def test_decreases_with_gain(self):
        clean = [smooth_image(s) for s in range(2)]
        means = []
        for gain in (1, 2, 4, 8):
            vals = [ms_ssim(c, synthesize_noise(c, GAIN_PRESETS[gain], seed)) for c in clean for seed in range(5)]
            means.append(np.mean(vals))
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_differentiable(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.uniform(size=(2, 3, 24, 24)))
        b = Tensor(rng.uniform(size=(2, 3, 24, 24)), requires_grad=True)
        loss = ms_ssim_tensor(a, b)
        backward(loss)
        assert b.grad is not None and np.all(np.isfinite(b.grad)) and np.any(b.grad != 0)

    def test_weights_are_canonical(self):
        assert MSSSIM_WEIGHTS == (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class TestDb:
    def test_value(self):
        assert msssim_db(0.99) == pytest.approx(20.0, abs=1e-9)

    def test_one_is_infinite(self):
        assert msssim_db(1.0) == math.inf

    @given(st.floats(min_value=0.0, max_value=0.999999))
    @settings(max_examples=200, deadline=None)
    def test_matches_definition(self, v):
        assert abs(msssim_db(v) - (-10 * math.log10(1 - v))) <= 1e-9


class TestImageIO:
    def test_png_round_trip(self, tmp_path):
        x = np.random.default_rng(0).integers(0, 256, (3, 7, 9)) / 255.0
        write_image(tmp_path / "a.png", x)
        assert np.array_equal(read_image(tmp_path / "a.png"), x.astype(np.float32))

    def test_ppm_round_trip(self, tmp_path):
        x = np.random.default_rng(1).integers(0, 256, (3, 5, 4)) / 255.0
        write_image(tmp_path / "a.ppm", x)
        assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
        assert np.array_equal(read_image(tmp_path / "a.ppm"), x.astype(np.float32))

    def test_rounding_half_away(self):
        assert to_uint8(np.array([0.5 / 255, 1.5 / 255, 254.5 / 255, -1.0, 2.0])).tolist() == [1, 2, 255, 0, 255]

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(ImageError):
            read_image(tmp_path / "bad.png")

    def test_unsupported_suffix(self, tmp_path):
        with pytest.raises(ImageError):
            write_image(tmp_path / "a.jpg", np.zeros((3, 2, 2)))
