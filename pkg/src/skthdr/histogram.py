"""KDE soft histograms, their CDFs, and the per-instance colour loss.

A pixel value x contributes ``exp(-(x - c_i)^2 / sigma^2)`` to every bin
centre ``c_i``; per-channel sums are normalised into a distribution whose
prefix sums give the CDF.  The histogram loss is the channel-averaged sum of
squared CDF differences, and the semantic variant averages it over the
non-empty instance masks.

Two evaluation routes give the same kernel sums:

* ``direct`` builds the full [C, P, N] kernel matrix.
* ``series`` uses the factorisation over uniformly spaced centres
  ``K(x, c_0 + n d) = u(x) * exp(n b(x)) * w_n`` and expands ``exp(n b)`` as a
  power series, so only ``M`` per-pixel moments are needed.  It is selected
  automatically when the bandwidth is wide relative to the value range
  (the default N=256, [0,255], sigma=400 setting) and the truncated tail is
  below 1e-17 relative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Function, Tensor, as_tensor, clip, matmul, no_grad, square
from .errors import EmptyRegion, NoValidMasks, ShapeMismatch

NORM_EPS = 1e-12
_SERIES_MAX_TERMS = 64
_SERIES_TOL = 1e-17
UNDERFLOW_SHIFT = 300.0


@dataclass(frozen=True)
class HistogramSpec:
    n_bins: int = 256
    min: float = 0.0
    max: float = 255.0
    sigma: float = 400.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if not self.max > self.min:
            raise ValueError("max must exceed min")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def bin_width(self) -> float:
        return (self.max - self.min) / self.n_bins


@dataclass
class SoftHistogram:
    hist: Tensor  # [C, N], each row sums to 1
    cdf: Optional[Tensor] = None


def bin_centers(spec: HistogramSpec) -> np.ndarray:
    i = np.arange(spec.n_bins, dtype=np.float64)
    return spec.min + (spec.max - spec.min) / spec.n_bins * (i + 0.5)


def gaussian_kernel(x, c, sigma):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-((x - c) ** 2) / sigma**2)


def _series_terms(spec: HistogramSpec, bmax: float) -> Optional[int]:
    """Number of series terms for a truncation error below tolerance, or None."""
    z = (spec.n_bins - 1) * bmax
    if z == 0.0:
        return 1
    log_target = math.log(_SERIES_TOL) - 2.0 * z
    for m in range(1, _SERIES_MAX_TERMS):
        # tail bound z^(m+1)/(m+1)!
        if (m + 1) * math.log(z) - math.lgamma(m + 2) < log_target:
            return m + 1
    return None


class GaussianKde(Function):
    """Unnormalised kernel sums ``H[c, n] = sum_p K(x[c, p], c_n)``."""

    def forward(self, x, spec=None, method="auto", stabilize=False):
        s = spec.sigma**2
        delta = spec.bin_width
        c0 = spec.min + 0.5 * delta
        d = x - c0
        b = (2.0 * delta / s) * d
        terms = None
        if method in ("auto", "series"):
            terms = _series_terms(spec, float(np.abs(b).max()) if b.size else 0.0)
            if terms is None and method == "series":
                raise ValueError("bandwidth too narrow for the series route")
        if terms is None:
            centers = bin_centers(spec)
            diff = x[..., :, None] - centers
            e = -(diff * diff) / s
            if stabilize and e.size:
                # per-row rescaling that cancels in the normalisation; it only
                # matters when every kernel of a row would underflow
                shift = -e.max(axis=(-2, -1), keepdims=True)
                e = e + np.where(shift > UNDERFLOW_SHIFT, shift, 0.0)
            E = np.exp(e)
            self.save("direct", diff, E, s)
            return E.sum(axis=-2)
        u = np.exp(-(d * d) / s)
        n = np.arange(spec.n_bins, dtype=np.float64)
        w = np.exp(-(n * delta) ** 2 / s)
        moments = np.empty(x.shape[:-1] + (terms,))
        pw = u.copy()
        for m in range(terms):
            moments[..., m] = pw.sum(axis=-1)
            pw *= b / (m + 1)
        acc = np.broadcast_to(moments[..., terms - 1:terms], x.shape[:-1] + (spec.n_bins,)).copy()
        for m in range(terms - 2, -1, -1):
            acc *= n
            acc += moments[..., m:m + 1]
        self.save("series", d, b, u, n, w, delta, s, terms)
        return acc * w

    def backward(self, g):
        route = self.saved[0]
        if route == "direct":
            _, diff, E, s = self.saved
            gx = np.einsum("...pn,...n->...p", E * diff, g) * (-2.0 / s)
            return (gx,)
        _, d, b, u, n, w, delta, s, terms = self.saved
        gw = g * w
        G0 = np.empty(g.shape[:-1] + (terms,))
        G1 = np.empty_like(G0)
        t = gw.copy()
        for m in range(terms):
            G0[..., m] = t.sum(axis=-1)
            G1[..., m] = (t * n).sum(axis=-1)
            t *= n / (m + 1)
        S0 = np.broadcast_to(G0[..., terms - 1:terms], d.shape).copy()
        S1 = np.broadcast_to(G1[..., terms - 1:terms], d.shape).copy()
        for m in range(terms - 2, -1, -1):
            S0 *= b
            S0 += G0[..., m:m + 1]
            S1 *= b
            S1 += G1[..., m:m + 1]
        return ((-2.0 / s) * u * (d * S0 - delta * S1),)


class MaskedGaussianKde(Function):
    """Kernel sums restricted to each of K pixel masks, [C,P] x [K,P] -> [K,C,N].

    All masks share one pass over the pixels: the per-pixel series terms (or
    kernel matrix) are computed once and contracted against the mask matrix.
    """

    def forward(self, x, masks=None, spec=None, method="auto"):
        s = spec.sigma**2
        delta = spec.bin_width
        d = x - (spec.min + 0.5 * delta)
        b = (2.0 * delta / s) * d
        sel = masks > 0.5
        bsel = np.abs(b[:, sel.any(axis=0)])
        terms = None
        if method in ("auto", "series"):
            terms = _series_terms(spec, float(bsel.max()) if bsel.size else 0.0)
            if terms is None and method == "series":
                raise ValueError("bandwidth too narrow for the series route")
        M = sel.astype(np.float64)
        C, P = x.shape
        K = M.shape[0]
        if terms is None:
            diff = x[:, :, None] - bin_centers(spec)
            e = -(diff * diff) / s
            best = e.max(axis=-1)  # [C,P]
            region_best = np.where(sel[:, None, :], best[None], -np.inf).max(axis=-1)  # [K,C]
            shift = np.where(np.isfinite(region_best) & (region_best < -UNDERFLOW_SHIFT), -region_best, 0.0)
            # exp(e + shift_kc) factored as exp(best + shift) * exp(e - best)
            W = M[:, None, :] * np.exp(np.minimum(best[None] + shift[:, :, None], 0.0))
            E = np.exp(e - best[..., None])
            self.save("direct", W, diff, E, s)
            return np.einsum("kcp,cpn->kcn", W, E, optimize=True)
        u = np.exp(-(d * d) / s)
        n = np.arange(spec.n_bins, dtype=np.float64)
        w = np.exp(-(n * delta) ** 2 / s)
        pw = np.empty((terms, C, P))
        cur = u.copy()
        for m in range(terms):
            pw[m] = cur
            cur *= b / (m + 1)
        moments = (pw.reshape(-1, P) @ M.T).reshape(terms, C, K)  # [m, c, k]
        acc = np.broadcast_to(moments[terms - 1, :, :, None], (C, K, spec.n_bins)).copy()
        for m in range(terms - 2, -1, -1):
            acc *= n
            acc += moments[m, :, :, None]
        acc = acc.transpose(1, 0, 2)
        self.save("series", M, d, b, u, n, w, delta, s, terms)
        return acc * w

    def backward(self, g):
        if self.saved[0] == "direct":
            _, W, diff, E, s = self.saved
            inner = np.einsum("kcn,cpn->kcp", g, E * diff, optimize=True)
            return ((W * inner).sum(axis=0) * (-2.0 / s),)
        _, M, d, b, u, n, w, delta, s, terms = self.saved
        K, C, _ = g.shape
        P = d.shape[1]
        t = g * w
        G0 = np.empty((K, C, terms))
        G1 = np.empty_like(G0)
        for m in range(terms):
            G0[..., m] = t.sum(axis=-1)
            G1[..., m] = (t * n).sum(axis=-1)
            t *= n / (m + 1)
        A0 = (G0.transpose(2, 1, 0).reshape(-1, K) @ M).reshape(terms, C, P)
        A1 = (G1.transpose(2, 1, 0).reshape(-1, K) @ M).reshape(terms, C, P)
        S0 = A0[terms - 1].copy()
        S1 = A1[terms - 1].copy()
        for m in range(terms - 2, -1, -1):
            S0 *= b
            S0 += A0[m]
            S1 *= b
            S1 += A1[m]
        return ((-2.0 / s) * u * (d * S0 - delta * S1),)


def kde_sums(values, spec: HistogramSpec, method: str = "auto") -> Tensor:
    """Kernel sums over the last axis of ``values`` ([..., P] -> [..., N])."""
    return GaussianKde.apply(values, spec=spec, method=method)


def soft_histogram(img, spec: HistogramSpec = HistogramSpec(), mask=None,
                   restrict_to_mask: bool = True, method: str = "auto") -> SoftHistogram:
    """Normalised per-channel KDE histogram of a [C,H,W] image.

    With a 0/1 ``mask`` of shape [H,W] either only in-mask pixels are
    histogrammed (``restrict_to_mask``) or the zero-filled product
    ``mask * img`` over the whole frame is.
    """
    img = as_tensor(img)
    if img.ndim != 3:
        raise ShapeMismatch(f"soft_histogram expects [C,H,W], got {img.shape}")
    C, H, W = img.shape
    flat = img.reshape((C, H * W))
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if m.shape != (H, W):
            raise ShapeMismatch(f"mask shape {m.shape} != image plane {(H, W)}")
        m = m.reshape(-1)
        if not m.any():
            raise EmptyRegion("mask selects no pixels")
        if restrict_to_mask:
            flat = flat[:, np.flatnonzero(m > 0.5)]
        else:
            flat = flat * m
    flat = clip(flat, spec.min, spec.max)
    sums = GaussianKde.apply(flat, spec=spec, method=method, stabilize=True)
    total = sums.sum(axis=-1, keepdims=True) + NORM_EPS
    return SoftHistogram(hist=sums / total)


_TRI_CACHE: dict = {}


def _upper_ones(n: int) -> np.ndarray:
    if n not in _TRI_CACHE:
        _TRI_CACHE[n] = np.triu(np.ones((n, n)))
    return _TRI_CACHE[n]


def cdf(h: SoftHistogram) -> SoftHistogram:
    """Populate prefix sums ``CDF[c, k] = sum_{i<=k} H[c, i]``."""
    n = h.hist.shape[-1]
    return SoftHistogram(hist=h.hist, cdf=matmul(h.hist, _upper_ones(n)))


def histogram_loss(a, b, spec: HistogramSpec = HistogramSpec(), mask=None,
                   restrict_to_mask: bool = True, method: str = "auto") -> Tensor:
    """(1/C) sum_c sum_k (CDF_a - CDF_b)^2 with ``b`` held constant."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"histogram_loss shapes differ: {a.shape} vs {b.shape}")
    with no_grad():
        target = cdf(soft_histogram(b.detach(), spec, mask, restrict_to_mask, method)).cdf
    pred = cdf(soft_histogram(a, spec, mask, restrict_to_mask, method)).cdf
    return square(pred - target.detach()).sum() * (1.0 / a.shape[0])


def valid_mask_indices(masks) -> list:
    m = np.asarray(masks.data if isinstance(masks, Tensor) else masks)
    return [k for k in range(m.shape[0]) if m[k].any()]


def semantic_histogram_loss(student, teacher, masks, spec: HistogramSpec = HistogramSpec(),
                            restrict_to_mask: bool = True, method: str = "auto") -> Tensor:
    """Mean of per-instance histogram losses over the non-empty masks."""
    student = as_tensor(student)
    m = np.asarray(masks.data if isinstance(masks, Tensor) else masks)
    if m.ndim != 3 or m.shape[1:] != student.shape[-2:]:
        raise ShapeMismatch(f"masks {m.shape} do not match image {student.shape}")
    valid = valid_mask_indices(m)
    if not valid:
        raise NoValidMasks("every instance mask is empty")
    if restrict_to_mask:
        return _region_losses(student, as_tensor(teacher), m[valid], spec, method)
    total = None
    for k in valid:
        term = histogram_loss(student, teacher, spec, m[k], restrict_to_mask, method)
        total = term if total is None else total + term
    return total * (1.0 / len(valid))


def _region_cdfs(img: Tensor, masks: np.ndarray, spec: HistogramSpec, method: str) -> Tensor:
    C = img.shape[0]
    flat = clip(img.reshape((C, -1)), spec.min, spec.max)
    sums = MaskedGaussianKde.apply(flat, masks=masks.reshape(len(masks), -1), spec=spec, method=method)
    hist = sums / (sums.sum(axis=-1, keepdims=True) + NORM_EPS)
    return matmul(hist, _upper_ones(spec.n_bins))


def _region_losses(student: Tensor, teacher: Tensor, masks: np.ndarray, spec, method) -> Tensor:
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"histogram_loss shapes differ: {student.shape} vs {teacher.shape}")
    with no_grad():
        target = _region_cdfs(teacher.detach(), masks, spec, method)
    pred = _region_cdfs(student, masks, spec, method)
    # per-region (1/C) sum of squared CDF gaps, then the mean over regions
    return square(pred - target.detach()).sum() * (1.0 / (student.shape[0] * len(masks)))
