"""Soft histograms against a brute-force summation oracle."""
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skthdr.autodiff import Tensor, gradcheck
from skthdr.errors import EmptyRegion, NoValidMasks, ShapeMismatch
from skthdr.histogram import (
    HistogramSpec,
    SoftHistogram,
    bin_centers,
    cdf,
    gaussian_kernel,
    histogram_loss,
    kde_sums,
    semantic_histogram_loss,
    soft_histogram,
)

from oracles import oracle_hist, oracle_loss


class TestBins:
    def test_default_centres(self):
        c = bin_centers(HistogramSpec())
        assert c[0] == 0.498046875 and c[255] == 254.501953125

    def test_two_bins(self):
        np.testing.assert_array_equal(bin_centers(HistogramSpec(2, 0, 1, 1)), [0.25, 0.75])

    def test_kernel_values(self):
        assert gaussian_kernel(3.0, 3.0, 2.0) == 1.0
        assert gaussian_kernel(2.0, 0.0, 2.0) == pytest.approx(math.exp(-1), abs=1e-15)
        assert gaussian_kernel(0.0, 128.0, 400.0) == pytest.approx(math.exp(-16384 / 160000), abs=1e-15)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            HistogramSpec(n_bins=1)
        with pytest.raises(ValueError):
            HistogramSpec(sigma=0)


class TestSoftHistogram:
    def test_single_pixel_sums_to_one(self):
        h = soft_histogram(np.full((1, 1, 1), 17.0)).hist.data
        assert h.sum() == pytest.approx(1.0, abs=1e-12)

    def test_two_by_two_oracle(self):
        img = np.array([[[0.0, 128.0], [128.0, 255.0]]])
        h = soft_histogram(img, HistogramSpec(4, 0, 255, 400)).hist.data
        np.testing.assert_allclose(h, oracle_hist(img, 4, 0, 255, 400), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("sigma", [5.0, 30.0, 400.0])
    @pytest.mark.parametrize("method", ["direct", "series", "auto"])
    def test_routes_match_oracle(self, rng, sigma, method):
        img = rng.uniform(0, 255, size=(3, 5, 5))
        spec = HistogramSpec(12, 0, 255, sigma)
        if method == "series" and sigma < 400:
            with pytest.raises(ValueError):
                soft_histogram(img, spec, method=method)
            return
        h = soft_histogram(img, spec, method=method).hist.data
        np.testing.assert_allclose(h, oracle_hist(img, 12, 0, 255, sigma), rtol=0, atol=1e-12)

    def test_default_spec_series_matches_direct(self, rng):
        vals = rng.uniform(0, 255, size=(3, 64))
        a = kde_sums(vals, HistogramSpec(), "series").data
        b = kde_sums(vals, HistogramSpec(), "direct").data
        np.testing.assert_allclose(a, b, rtol=1e-13)

    def test_permutation_invariant(self, rng):
        img = rng.uniform(0, 255, size=(2, 4, 4))
        perm = rng.permutation(16)
        shuffled = img.reshape(2, 16)[:, perm].reshape(2, 4, 4)
        np.testing.assert_allclose(soft_histogram(img).hist.data, soft_histogram(shuffled).hist.data, atol=1e-15)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 16))
    def test_normalised(self, seed, n):
        img = np.random.default_rng(seed).uniform(0, 255, size=(2, 3, 3))
        h = soft_histogram(img, HistogramSpec(n, 0, 255, 40)).hist.data
        np.testing.assert_allclose(h.sum(-1), 1.0, atol=1e-9)

    def test_hard_limit(self, rng):
        n = 8
        spec = HistogramSpec(n, 0, 255, 255 / (100 * n))
        width = 255 / n
        vals = (rng.integers(0, n, size=20) + rng.uniform(0.2, 0.8, size=20)) * width
        for v in vals:
            h = soft_histogram(np.full((1, 1, 1), v), spec, method="direct").hist.data
            assert h.argmax() == int(v // width)

    def test_masked_restricts_pixels(self, rng):
        img = rng.uniform(0, 255, size=(1, 4, 4))
        mask = np.zeros((4, 4))
        mask[:2] = 1
        h = soft_histogram(img, HistogramSpec(8, 0, 255, 30), mask).hist.data
        np.testing.assert_allclose(h, oracle_hist(img[:, :2], 8, 0, 255, 30), atol=1e-12)

    def test_zero_filled_variant(self, rng):
        img = rng.uniform(0, 255, size=(1, 4, 4))
        mask = np.zeros((4, 4))
        mask[:2] = 1
        h = soft_histogram(img, HistogramSpec(8, 0, 255, 30), mask, restrict_to_mask=False).hist.data
        np.testing.assert_allclose(h, oracle_hist(img * mask, 8, 0, 255, 30), atol=1e-12)

    def test_empty_mask(self):
        with pytest.raises(EmptyRegion):
            soft_histogram(np.ones((1, 2, 2)), mask=np.zeros((2, 2)))

    def test_shape_checks(self):
        with pytest.raises(ShapeMismatch):
            soft_histogram(np.ones((2, 2)))
        with pytest.raises(ShapeMismatch):
            soft_histogram(np.ones((1, 2, 2)), mask=np.ones((3, 3)))


class TestCdf:
    def test_uniform(self):
        out = cdf(SoftHistogram(Tensor(np.full((1, 4), 0.25)))).cdf.data
        np.testing.assert_allclose(out, [[0.25, 0.5, 0.75, 1.0]])

    def test_point_mass(self):
        h = np.zeros((1, 6))
        h[0, 0] = 1
        np.testing.assert_array_equal(cdf(SoftHistogram(Tensor(h))).cdf.data, np.ones((1, 6)))

    @given(st.integers(0, 2**31 - 1))
    def test_monotone_and_ends_at_one(self, seed):
        h = np.random.default_rng(seed).random((3, 10))
        h /= h.sum(-1, keepdims=True)
        c = cdf(SoftHistogram(Tensor(h))).cdf.data
        assert (np.diff(c, axis=-1) >= -1e-15).all()
        np.testing.assert_allclose(c[:, -1], 1.0, atol=1e-9)


class TestHistogramLoss:
    def test_identical_is_zero_with_zero_gradient(self, rng):
        a = rng.uniform(0, 255, size=(3, 4, 4))
        x = Tensor(a.copy(), requires_grad=True)
        loss = histogram_loss(x, a)
        loss.backward()
        assert loss.item() == 0.0
        assert not x.grad.any()

    def test_permutation_gives_zero(self, rng):
        a = rng.uniform(0, 255, size=(1, 4, 4))
        b = a.reshape(-1)[rng.permutation(16)].reshape(1, 4, 4)
        assert histogram_loss(a, b).item() == pytest.approx(0.0, abs=1e-20)

    def test_black_vs_white_oracle(self):
        a, b = np.zeros((1, 2, 2)), np.full((1, 2, 2), 255.0)
        got = histogram_loss(a, b, HistogramSpec(4, 0, 255, 400)).item()
        assert got == pytest.approx(oracle_loss(a, b, 4, 0, 255, 400), abs=1e-12)

    def test_random_oracle(self, rng):
        a, b = rng.uniform(0, 255, size=(2, 2, 3, 3))
        got = histogram_loss(a, b, HistogramSpec(10, 0, 255, 50)).item()
        assert got == pytest.approx(oracle_loss(a, b, 10, 0, 255, 50), abs=1e-12)

    def test_teacher_side_receives_no_gradient(self, rng):
        a = Tensor(rng.uniform(0, 255, size=(1, 3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0, 255, size=(1, 3, 3)), requires_grad=True)
        histogram_loss(a, b).backward()
        assert a.grad is not None and b.grad is None

    def test_gradcheck(self, rng):
        a = Tensor(rng.uniform(5, 250, size=(3, 4, 4)), requires_grad=True)
        b = rng.uniform(0, 255, size=(3, 4, 4))
        assert gradcheck(lambda t: histogram_loss(t, b), a) < 1e-5


class TestSemanticLoss:
    def test_equal_images(self, rng):
        a = rng.uniform(0, 255, size=(3, 4, 4))
        masks = np.stack([np.ones((4, 4)), np.zeros((4, 4))])
        assert semantic_histogram_loss(a, a, masks).item() == 0.0

    def test_full_frame_mask_reduces_to_plain_loss(self, rng):
        a, b = rng.uniform(0, 255, size=(2, 3, 4, 4))
        masks = np.zeros((5, 4, 4))
        masks[0] = 1
        assert semantic_histogram_loss(a, b, masks).item() == pytest.approx(histogram_loss(a, b).item(), abs=1e-14)

    def test_half_frames_match_per_region_oracle(self, rng):
        spec = HistogramSpec(8, 0, 255, 40)
        a = rng.uniform(0, 255, size=(3, 4, 4))
        b = a.copy()
        b[:, :, 2:] = rng.uniform(0, 255, size=(3, 4, 2))
        masks = np.zeros((2, 4, 4))
        masks[0, :, :2] = 1
        masks[1, :, 2:] = 1
        want = 0.5 * (oracle_loss(a[:, :, :2], b[:, :, :2], 8, 0, 255, 40)
                      + oracle_loss(a[:, :, 2:], b[:, :, 2:], 8, 0, 255, 40))
        assert oracle_loss(a[:, :, :2], b[:, :, :2], 8, 0, 255, 40) == 0.0
        assert semantic_histogram_loss(a, b, masks, spec).item() == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("restrict", [True, False])
    def test_batched_route_equals_loop(self, rng, restrict):
        a, b = rng.uniform(0, 255, size=(2, 3, 6, 6))
        labels = rng.integers(0, 4, size=(6, 6))
        masks = np.stack([labels == k for k in range(6)]).astype(float)
        loop = sum(histogram_loss(a, b, HistogramSpec(), masks[k], restrict).item() for k in range(4)) / 4
        got = semantic_histogram_loss(a, b, masks, restrict_to_mask=restrict).item()
        assert got == pytest.approx(loop, rel=1e-12)

    def test_all_empty(self):
        with pytest.raises(NoValidMasks):
            semantic_histogram_loss(np.ones((3, 2, 2)), np.ones((3, 2, 2)), np.zeros((2, 2, 2)))

    def test_gradcheck(self, rng):
        a = Tensor(rng.uniform(5, 250, size=(3, 6, 6)), requires_grad=True)
        b = rng.uniform(0, 255, size=(3, 6, 6))
        labels = rng.integers(0, 3, size=(6, 6))
        masks = np.stack([labels == k for k in range(4)]).astype(float)
        assert gradcheck(lambda t: semantic_histogram_loss(t, b, masks), a) < 1e-5


class TestUnderflow:
    def test_far_pixels_still_normalise(self):
        spec = HistogramSpec(8, 0, 255, 0.2)
        img = np.array([[[100.0]]])  # ~8 units from the nearest centre
        h = soft_histogram(img, spec, method="direct").hist.data
        assert h.sum() == pytest.approx(1.0) and h.argmax() == 3

    def test_masked_route_handles_underflowing_regions(self, rng):
        spec = HistogramSpec(8, 0, 255, 0.2)
        a = np.full((3, 2, 2), 100.0)
        b = np.full((3, 2, 2), 20.0)
        masks = np.stack([np.ones((2, 2))])
        got = semantic_histogram_loss(a, b, masks, spec, method="direct").item()
        assert got == pytest.approx(3.0)  # point masses in bins 3 and 0 differ in three CDF entries
