import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skthdr.autodiff import Tensor, gradcheck
from skthdr.data import mosaic
from skthdr.domain import (
    RAW,
    SRGB,
    HdrImage,
    TonemapParams,
    bayer_masks,
    demosaic_bilinear,
    domain_transfer,
    mu_law,
    mu_law_inverse,
)
from skthdr.errors import DomainError, ShapeMismatch

unit = st.floats(0.0, 1.0, allow_nan=False)


def neighbour_oracle(raw, pattern="RGGB"):
    """Per-pixel stencil: own sample, else mean of edge neighbours, else of diagonal ones."""
    h, w = raw.shape
    colour = {"R": 0, "G": 1, "B": 2}
    site = np.empty((h, w), dtype=int)
    for k, c in enumerate(pattern):
        site[k // 2::2, k % 2::2] = colour[c]
    out = np.zeros((3, h, w))
    for ch in range(3):
        for y in range(h):
            for x in range(w):
                if site[y, x] == ch:
                    out[ch, y, x] = raw[y, x]
                    continue
                for ring in ([(0, 1), (0, -1), (1, 0), (-1, 0)], [(1, 1), (1, -1), (-1, 1), (-1, -1)]):
                    vals = [raw[y + dy, x + dx] for dy, dx in ring
                            if 0 <= y + dy < h and 0 <= x + dx < w and site[y + dy, x + dx] == ch]
                    if vals:
                        out[ch, y, x] = sum(vals) / len(vals)
                        break
    return out


class TestMuLaw:
    def test_endpoints(self):
        assert mu_law(Tensor(0.0)).item() == 0.0
        assert mu_law(Tensor(1.0)).item() == pytest.approx(1.0, abs=1e-15)

    def test_half_closed_form(self):
        assert mu_law(Tensor(0.5), 5000).item() == pytest.approx(math.log(2501) / math.log(5001), abs=1e-14)

    def test_inverse_endpoints(self):
        assert mu_law_inverse(Tensor(0.0)).item() == 0.0
        assert mu_law_inverse(Tensor(1.0)).item() == pytest.approx(1.0, abs=1e-12)

    def test_round_trip(self, rng):
        x = rng.uniform(size=64)
        assert np.abs(mu_law_inverse(mu_law(x)).data - x).max() < 1e-10

    @given(unit, unit)
    def test_monotone(self, a, b):
        if a == b:
            return
        lo, hi = sorted((a, b))
        assert mu_law(Tensor(lo)).item() < mu_law(Tensor(hi)).item()

    def test_slope_at_zero_matches_one_sided_difference(self):
        mu, h = 5000.0, 1e-9
        x = Tensor(np.zeros(1), requires_grad=True)
        mu_law(x, mu).sum().backward()
        assert x.grad[0] == pytest.approx(mu / math.log1p(mu), rel=1e-12)
        assert (mu_law(Tensor(h), mu).item() / h) == pytest.approx(x.grad[0], rel=1e-5)

    def test_gradcheck_interior(self, rng):
        x = Tensor(rng.uniform(0.05, 0.95, size=(3, 4, 4)), requires_grad=True)
        assert gradcheck(lambda t: mu_law(t).sum(), x) < 1e-5

    def test_rejects_out_of_range(self):
        with pytest.raises(DomainError):
            mu_law(Tensor([1.5]))
        with pytest.raises(DomainError):
            TonemapParams(mu=0)


class TestDemosaic:
    def test_bayer_masks_partition(self):
        m = bayer_masks("RGGB", 4, 4)
        np.testing.assert_array_equal(m.sum(0), np.ones((4, 4)))
        assert m[1].sum() == 8

    @pytest.mark.parametrize("pattern", ["RGGB", "BGGR", "GRBG", "GBRG"])
    def test_constant_mosaic(self, pattern):
        out = demosaic_bilinear(np.full((1, 6, 6), 0.3), pattern).data
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    @pytest.mark.parametrize("pattern", ["RGGB", "GBRG"])
    def test_matches_neighbour_oracle(self, rng, pattern):
        raw = rng.uniform(size=(4, 4))
        np.testing.assert_allclose(demosaic_bilinear(raw[None], pattern).data, neighbour_oracle(raw, pattern),
                                   atol=1e-14)

    @given(st.floats(0.01, 1.0))
    def test_linear(self, a):
        raw = np.random.default_rng(3).uniform(size=(1, 6, 6))
        np.testing.assert_allclose(demosaic_bilinear(a * raw).data, a * demosaic_bilinear(raw).data, atol=1e-14)

    def test_batched_shape(self, rng):
        assert demosaic_bilinear(rng.uniform(size=(2, 1, 4, 6))).shape == (2, 3, 4, 6)

    def test_rejects_odd_or_multichannel(self):
        with pytest.raises(ShapeMismatch):
            demosaic_bilinear(np.zeros((1, 5, 4)))
        with pytest.raises(ShapeMismatch):
            demosaic_bilinear(np.zeros((3, 4, 4)))

    def test_raw_image_requires_single_channel(self):
        with pytest.raises(ShapeMismatch):
            HdrImage(np.zeros((3, 4, 4)), RAW)


class TestDomainTransfer:
    def test_srgb_zero(self):
        assert not domain_transfer(np.zeros((3, 4, 4)), fmt=SRGB).data.any()

    def test_raw_constant(self):
        out = domain_transfer(HdrImage(np.full((1, 4, 4), 0.2), RAW)).data
        np.testing.assert_allclose(out, mu_law(Tensor(0.2)).item(), atol=1e-14)
        assert out.shape == (3, 4, 4)

    def test_raw_gradcheck(self, rng):
        x = Tensor(rng.uniform(0.05, 0.6, size=(1, 8, 8)), requires_grad=True)
        assert gradcheck(lambda t: domain_transfer(t, fmt=RAW).sum(), x) < 1e-5

    @given(st.integers(0, 2**31 - 1))
    def test_range_preserved(self, seed):
        r = np.random.default_rng(seed)
        raw = r.uniform(size=(1, 4, 4))
        out = domain_transfer(raw, fmt=RAW).data
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_mosaic_then_demosaic_reproduces_constant(self):
        img = np.full((3, 6, 6), 0.4)
        img[1] = 0.7
        back = demosaic_bilinear(mosaic(img)).data
        np.testing.assert_allclose(back, img, atol=1e-14)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            domain_transfer(np.zeros((3, 2, 2)), fmt="xyz")
