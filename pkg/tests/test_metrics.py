import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskgan.dataio import PhantomConfig, phantom_dataset
from deskgan.metrics import (MetricReport, SWDConfig, auto_levels, extract_descriptors, frechet_distance,
                             gaussian_window, laplacian_pyramid, max_msssim_scales, ms_ssim,
                             msssim_diversity_report, msssim_weights, random_directions,
                             reconstruct_pyramid, sliced_wasserstein, ssim, swd_multiscale)


def loop_ssim_maps(x, y, size=11, sigma=1.5):
    """Per-window SSIM statistics computed window by window."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, wd = x.shape
    lum = np.zeros((h - size + 1, wd - size + 1))
    cs = np.zeros_like(lum)
    for i in range(lum.shape[0]):
        for j in range(lum.shape[1]):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            lum[i, j] = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
            cs[i, j] = (2 * cxy + c2) / (vx + vy + c2)
    return lum, cs


def oracle_ms_ssim(x, y, scales):
    wts = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales])
    wts /= wts.sum()
    out = 1.0
    for j in range(scales):
        lum, cs = loop_ssim_maps(x, y)
        term = (lum * cs).mean() if j == scales - 1 else cs.mean()
        out *= np.sign(term) * abs(term) ** wts[j]
        if j == scales - 1:
            break
        x = x.reshape(x.shape[0] // 2, 2, x.shape[1] // 2, 2).mean(axis=(1, 3))
        y = y.reshape(y.shape[0] // 2, 2, y.shape[1] // 2, 2).mean(axis=(1, 3))
    return out


class TestSSIM:
    def test_self_is_one(self, rng):
        x = rng.uniform(size=(32, 40))
        assert ssim(x, x) == 1.0

    def test_constant_closed_form(self):
        want = (2 * 0.5 * 0.25 + 1e-4) / (0.5 ** 2 + 0.25 ** 2 + 1e-4)
        got = ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.25))
        assert abs(got - want) < 1e-4
        assert abs(got - 0.8001) < 1e-4

    def test_symmetry(self, rng):
        x, y = rng.uniform(size=(2, 24, 24))
        assert ssim(x, y) == ssim(y, x)

    def test_matches_window_loop(self, rng):
        x = rng.uniform(size=(18, 21))
        y = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
        lum, cs = loop_ssim_maps(x, y)
        assert abs(ssim(x, y) - (lum * cs).mean()) < 1e-10

    def test_errors(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 16)), np.zeros((10, 16)))

    def test_window_normalised(self):
        g = gaussian_window()
        assert g.shape == (11,) and abs(g.sum() - 1) < 1e-15 and g[5] == g.max()


class TestMSSSIM:
    def test_self_is_one(self, rng):
        x = rng.uniform(size=(176, 176))
        assert ms_ssim(x, x) == 1.0

    def test_symmetry(self, rng):
        x, y = rng.uniform(size=(2, 88, 88))
        assert ms_ssim(x, y, scales=4) == ms_ssim(y, x, scales=4)

    @pytest.mark.xfail(strict=True, reason="2x2 pooling shrinks noise variance below C2 at coarse "
                       "scales, so the five-scale value for uniform noise settles near 0.12")
    def test_independent_noise_near_zero(self):
        r = np.random.default_rng(0)
        vals = [ms_ssim(r.uniform(size=(176, 176)), r.uniform(size=(176, 176))) for _ in range(3)]
        assert all(abs(v) < 0.1 for v in vals)

    def test_independent_noise_matches_oracle(self):
        r = np.random.default_rng(0)
        x, y = r.uniform(size=(176, 176)), r.uniform(size=(176, 176))
        got = ms_ssim(x, y)
        assert abs(got - oracle_ms_ssim(x, y, 5)) < 1e-10
        assert 0 < got < 0.15
        # the finest scale alone is close to zero
        assert abs(ms_ssim(x, y, scales=1)) < 0.02

    @pytest.mark.parametrize("scales", [1, 2, 3])
    def test_matches_direct_formula(self, scales, rng):
        n = 11 * 2 ** (scales - 1)
        x = rng.uniform(size=(n, n))
        y = np.clip(0.7 * x + 0.3 * rng.uniform(size=(n, n)), 0, 1)
        assert abs(ms_ssim(x, y, scales=scales) - oracle_ms_ssim(x, y, scales)) < 1e-10

    def test_too_small(self):
        with pytest.raises(ValueError):
            ms_ssim(np.zeros((100, 200)), np.zeros((100, 200)))

    def test_weights(self):
        assert np.allclose(msssim_weights(5), [0.0448, 0.2856, 0.3001, 0.2363, 0.1333], atol=1e-3)
        assert abs(msssim_weights(3).sum() - 1) < 1e-12
        assert max_msssim_scales(64, 64) == 3 and max_msssim_scales(176, 200) == 5

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 1000), a=st.floats(0, 1))
    def test_bounded(self, seed, a):
        r = np.random.default_rng(seed)
        x = r.uniform(size=(44, 44))
        y = np.clip(a * (1 - x) + (1 - a) * r.uniform(size=(44, 44)), 0, 1)
        assert -1 <= ms_ssim(x, y, scales=3) <= 1
        assert -1 <= ssim(x, y) <= 1


class TestDiversity:
    def test_identity_pairing(self, rng):
        s = rng.uniform(size=(4, 44, 44))
        rep = msssim_diversity_report(s, s.copy(), rng, pairing="identity")
        assert rep["msssim_cross"] == 1.0

    def test_collapsed_set(self, rng):
        s = np.repeat(rng.uniform(size=(1, 44, 44)), 5, axis=0)
        other = rng.uniform(size=(5, 44, 44))
        rep = msssim_diversity_report(other, s, rng)
        assert rep["msssim_within_fake"] == 1.0
        assert rep["msssim_within_real"] < 0.5

    def test_reproducible(self):
        s = np.random.default_rng(1).uniform(size=(6, 44, 44))
        t = np.random.default_rng(2).uniform(size=(6, 44, 44))
        a = msssim_diversity_report(s, t, np.random.default_rng(5), n_pairs=8)
        b = msssim_diversity_report(s, t, np.random.default_rng(5), n_pairs=8)
        assert a == b

    def test_too_small(self, rng):
        with pytest.raises(ValueError):
            msssim_diversity_report(np.zeros((1, 44, 44)), np.zeros((3, 44, 44)), rng)


class TestPyramid:
    def test_exact_reconstruction(self, rng):
        x = rng.uniform(size=(3, 32, 48)).astype(np.float32)
        bands = laplacian_pyramid(x, 4)
        assert len(bands) == 4
        assert np.array_equal(reconstruct_pyramid(bands), x.astype(np.float64))

    def test_constant(self):
        bands = laplacian_pyramid(np.full((16, 16), 0.3), 3)
        assert all(not b.any() for b in bands[:-1])
        assert np.all(bands[-1] == 0.3) and bands[-1].shape == (4, 4)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            laplacian_pyramid(np.zeros((12, 16)), 4)

    def test_auto_levels(self):
        assert auto_levels(64, 64) == 3
        assert auto_levels(32, 32) == 2
        assert auto_levels(16, 16) == 1


class TestDescriptors:
    def test_constant_band(self, rng):
        d = extract_descriptors(np.full((2, 16, 16), 0.7), 0, 10, rng)
        assert d.dim == 49 and len(d) == 20
        assert not d.descriptors.any()

    def test_normalised(self, rng):
        d = extract_descriptors(rng.uniform(size=(3, 20, 20)), 1, 8, rng).descriptors
        np.testing.assert_allclose(d.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(d.std(axis=1), 1, atol=1e-6)

    def test_seeded(self, rng):
        img = rng.uniform(size=(2, 20, 20))
        a = extract_descriptors(img, 0, 5, np.random.default_rng(3)).descriptors
        b = extract_descriptors(img, 0, 5, np.random.default_rng(3)).descriptors
        assert np.array_equal(a, b)

    def test_patch_content(self):
        img = np.arange(100.0).reshape(1, 10, 10)
        d = extract_descriptors(img, 0, 3, np.random.default_rng(0), k=3, eps=0.0).descriptors
        # a ramp patch normalises to the same vector wherever it is taken
        assert np.allclose(d, d[0])

    def test_band_too_small(self, rng):
        with pytest.raises(ValueError):
            extract_descriptors(np.zeros((1, 5, 5)), 0, 3, rng)


class TestSWD:
    def test_identical_zero(self, rng):
        a = rng.standard_normal((50, 49))
        assert sliced_wasserstein(a, a.copy(), 64, rng) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), delta=st.floats(-5, 5))
    def test_shift_along_direction(self, seed, delta):
        r = np.random.default_rng(seed)
        a = r.standard_normal((40, 9))
        u = r.standard_normal(9)
        u /= np.linalg.norm(u)
        b = a + delta * u
        got = sliced_wasserstein(a, b, directions=u[:, None])
        assert abs(got - abs(delta)) < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_single_projection_matches_sorted_oracle(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((30, 5)), 2 * r.standard_normal((30, 5)) + 1
        u = random_directions(5, 1, r)
        pa, pb = (a @ u).ravel(), (b @ u).ravel()
        # W1 of two equal-size empirical measures as the integral of |F_a - F_b|
        grid = np.sort(np.concatenate([pa, pb]))
        fa = np.searchsorted(np.sort(pa), grid[:-1], side="right") / 30
        fb = np.searchsorted(np.sort(pb), grid[:-1], side="right") / 30
        want = np.sum(np.abs(fa - fb) * np.diff(grid))
        assert abs(sliced_wasserstein(a, b, directions=u) - want) < 1e-6

    def test_symmetric(self, rng):
        a, b = rng.standard_normal((2, 40, 49))
        assert sliced_wasserstein(a, b, 32, np.random.default_rng(1)) == \
            sliced_wasserstein(b, a, 32, np.random.default_rng(1))

    def test_subsamples_larger(self, rng):
        assert sliced_wasserstein(rng.standard_normal((60, 4)), rng.standard_normal((20, 4)), 8, rng) > 0

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            sliced_wasserstein(np.zeros((0, 4)), np.zeros((3, 4)), 8, rng)
        with pytest.raises(ValueError):
            sliced_wasserstein(np.zeros((3, 4)), np.zeros((3, 5)), 8, rng)


@pytest.fixture(scope="module")
def phantom_splits():
    imgs = phantom_dataset(PhantomConfig(height=32, width=32, seed=4), 96)
    stack = np.stack([im.pixels for im in imgs])
    return stack[:48], stack[48:]


class TestMultiscale:
    def test_self_zero(self, phantom_splits):
        a, _ = phantom_splits
        rep = swd_multiscale(a, a.copy(), SWDConfig(patches_per_image=16, n_projections=64))
        assert rep.swd_per_scale == [0.0] * auto_levels(32, 32)
        assert rep.swd_mean == 0.0

    def test_noise_worse_than_real_split(self, phantom_splits):
        a, b = phantom_splits
        noise = np.random.default_rng(0).uniform(size=a.shape)
        cfg = SWDConfig(patches_per_image=32, n_projections=128)
        real = swd_multiscale(a, b, cfg, np.random.default_rng(1)).swd_mean
        fake = swd_multiscale(a, noise, cfg, np.random.default_rng(1)).swd_mean
        assert fake > real

    def test_monte_carlo_stability(self, phantom_splits):
        a, _ = phantom_splits
        noise = np.random.default_rng(0).uniform(size=a.shape)
        da = extract_descriptors(a, 0, 64, np.random.default_rng(2))
        db = extract_descriptors(noise, 0, 64, np.random.default_rng(3))
        s1 = sliced_wasserstein(da, db, 512, np.random.default_rng(4))
        s2 = sliced_wasserstein(da, db, 1024, np.random.default_rng(5))
        assert abs(s2 - s1) / s1 < 0.05

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError):
            swd_multiscale(np.zeros((2, 16, 16)), np.zeros((2, 32, 32)))


def test_report_csv_round_trip():
    rep = MetricReport([0.1, 0.25], 0.175, 0.3, 0.4, 0.5)
    text = rep.to_csv()
    assert text.splitlines()[0] == "swd_per_scale,swd_mean,msssim_cross,msssim_within_real,msssim_within_fake"
    assert MetricReport.from_csv(text) == rep
    assert '"swd_mean": 0.175' in rep.to_text()


def test_frechet_distance_self_zero(rng):
    f = rng.standard_normal((200, 3))
    assert abs(frechet_distance(f, f)) < 1e-8
    assert frechet_distance(f, f + 1.0) == pytest.approx(3.0, rel=1e-6)
