import math

import numpy as np
import pytest

from lctem.errors import InputError
from lctem.metrics import (
    SsimConfig,
    SsimResult,
    l1_loss,
    l2_loss,
    local_ssim,
    psnr,
    ssim,
    ssim_loss,
    ssim_map,
)
from lctem.micrograph import NormalizedImage

from helpers import ssim_map_bruteforce


class TestSsimConfig:
    def test_default_constants_square_against_data_range(self):
        cfg = SsimConfig()
        assert cfg.c1 == pytest.approx(1e-4)
        assert cfg.c2 == pytest.approx(9e-4)

    def test_literal_constants_mode(self):
        cfg = SsimConfig(literal_constants=True)
        assert cfg.c1 == 0.01
        assert cfg.c2 == 0.03

    def test_data_range_scales_the_stabilizers(self):
        cfg = SsimConfig(data_range=255.0)
        assert cfg.c1 == pytest.approx((0.01 * 255.0) ** 2)

    @pytest.mark.parametrize("w", [2, 1, 0, -3, 4])
    def test_even_or_small_windows_rejected(self, w):
        with pytest.raises(InputError):
            SsimConfig(window_size=w)


class TestSsimAgainstBruteforce:
    @pytest.mark.parametrize("window", [3, 11])
    def test_random_pairs_match_per_window_oracle(self, window):
        rng = np.random.default_rng(100 + window)
        cfg = SsimConfig(window_size=window)
        for _ in range(10):
            x = rng.random((20, 20))
            y = rng.random((20, 20))
            got = ssim_map(x, y, cfg)
            want = ssim_map_bruteforce(x, y, window, cfg.c1, cfg.c2)
            assert got.shape == want.shape
            assert np.abs(got - want).max() < 1e-9

    def test_wide_window_matches_oracle(self):
        rng = np.random.default_rng(139)
        cfg = SsimConfig(window_size=39)
        x = rng.random((44, 44))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        got = ssim_map(x, y, cfg)
        want = ssim_map_bruteforce(x, y, 39, cfg.c1, cfg.c2)
        assert np.abs(got - want).max() < 1e-9

    def test_nearly_constant_windows_stay_accurate(self):
        rng = np.random.default_rng(4)
        x = 0.8 + 1e-7 * rng.random((16, 16))
        y = 0.8 + 1e-7 * rng.random((16, 16))
        cfg = SsimConfig(window_size=7)
        got = ssim_map(x, y, cfg)
        want = ssim_map_bruteforce(x, y, 7, cfg.c1, cfg.c2)
        assert np.abs(got - want).max() < 1e-9


class TestSsimProperties:
    def test_identity_is_exactly_one(self):
        rng = np.random.default_rng(42)
        x = rng.random((32, 32))
        result = ssim(x, x)
        assert result.mean == 1.0
        assert np.all(result.map == 1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(43)
        x = rng.random((20, 20))
        y = rng.random((20, 20))
        assert ssim(x, y).mean == pytest.approx(ssim(y, x).mean, abs=1e-12)

    def test_bounded_by_one_for_nonnegative_images(self):
        rng = np.random.default_rng(44)
        for _ in range(5):
            x = rng.random((18, 18))
            y = rng.random((18, 18))
            assert ssim(x, y).map.max() <= 1.0 + 1e-12

    def test_map_shape_and_count(self):
        x = np.zeros((20, 30))
        res = ssim(x, x, SsimConfig(window_size=11))
        assert res.map.shape == (10, 20)
        assert res.n_windows == 200

    def test_mean_equals_map_mean(self):
        rng = np.random.default_rng(45)
        x, y = rng.random((15, 15)), rng.random((15, 15))
        res = ssim(x, y, SsimConfig(window_size=5))
        assert res.mean == float(np.mean(res.map))

    def test_normalized_image_inputs(self):
        rng = np.random.default_rng(46)
        img = NormalizedImage(rng.random((12, 12)))
        assert ssim(img, img).mean == 1.0

    def test_too_small_image_rejected(self):
        with pytest.raises(InputError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), SsimConfig(window_size=11))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            ssim(np.zeros((12, 12)), np.zeros((12, 13)))

    def test_loss_is_one_minus_mean_and_zero_at_identity(self):
        rng = np.random.default_rng(47)
        x = rng.random((16, 16))
        y = rng.random((16, 16))
        assert ssim_loss(x, x) == 0.0
        assert ssim_loss(x, y) == pytest.approx(1.0 - ssim(x, y).mean)

    def test_local_ssim_matches_map_cell(self):
        rng = np.random.default_rng(48)
        cfg = SsimConfig(window_size=7)
        x = rng.random((13, 13))
        y = rng.random((13, 13))
        full = ssim_map(x, y, cfg)
        assert local_ssim(x[3:10, 2:9], y[3:10, 2:9], cfg) == pytest.approx(
            full[3, 2], abs=1e-12
        )

    def test_local_ssim_rejects_wrong_window(self):
        with pytest.raises(InputError):
            local_ssim(np.zeros((5, 5)), np.zeros((5, 5)), SsimConfig(window_size=7))


class TestPsnr:
    def test_uniform_offset_gives_twenty_db(self):
        rng = np.random.default_rng(50)
        x = rng.random((24, 24)) * 0.85
        y = x + 0.1
        assert abs(psnr(x, y) - 20.0) < 1e-9

    def test_identical_images_are_infinite(self):
        x = np.full((8, 8), 0.3)
        assert psnr(x, x) == math.inf

    def test_data_range_shifts_by_constant(self):
        rng = np.random.default_rng(51)
        x = rng.random((16, 16))
        y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
        assert psnr(x, y, data_range=2.0) == pytest.approx(
            psnr(x, y) + 20.0 * math.log10(2.0)
        )

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestPointLosses:
    def test_l1_constant_offset(self):
        x = np.zeros((6, 6))
        assert l1_loss(x, x + 0.25) == pytest.approx(0.25)

    def test_l2_constant_offset(self):
        x = np.zeros((6, 6))
        assert l2_loss(x, x + 0.5) == pytest.approx(0.25)

    def test_zero_at_identity(self):
        rng = np.random.default_rng(52)
        x = rng.random((9, 9))
        assert l1_loss(x, x) == 0.0
        assert l2_loss(x, x) == 0.0

    def test_l1_bounds_l2_on_unit_interval(self):
        rng = np.random.default_rng(53)
        x, y = rng.random((10, 10)), rng.random((10, 10))
        assert l2_loss(x, y) <= l1_loss(x, y)
