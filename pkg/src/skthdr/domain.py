"""Mapping HDR-domain outputs into the tonemapped sRGB domain.

sRGB-linear data is tonemapped with the mu-law curve; RAW Bayer data is
first demosaiced bilinearly and then tonemapped.  Both paths are built from
differentiable tensor ops so gradients flow through the whole chain.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from .autodiff import Tensor, as_tensor, clip, conv2d, expm1, log1p
from .errors import DomainError, ShapeMismatch

SRGB = "sRGB-linear"
RAW = "RAW-Bayer"
BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class TonemapParams:
    mu: float = 5000.0

    def __post_init__(self):
        if not self.mu > 0:
            raise DomainError(f"mu must be positive, got {self.mu}")


@dataclass
class HdrImage:
    """Linear radiance in [0,1]; ``data`` is [C,H,W] or batched [B,C,H,W]."""

    data: Tensor
    format: str = SRGB

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.format not in (SRGB, RAW):
            raise ValueError(f"unknown format {self.format!r}")
        _check_unit_range(self.data.data, "HdrImage")
        if self.format == RAW:
            h, w = self.data.shape[-2:]
            if self.data.shape[-3] != 1 or h % 2 or w % 2:
                raise ShapeMismatch(f"RAW-Bayer image must be 1 x even x even, got {self.data.shape}")


def _check_unit_range(arr: np.ndarray, what: str):
    if arr.size and (arr.min() < -_RANGE_TOL or arr.max() > 1 + _RANGE_TOL):
        raise DomainError(f"{what}: values must lie in [0,1], got [{arr.min()}, {arr.max()}]")


def _params(p) -> TonemapParams:
    if p is None:
        return TonemapParams()
    if isinstance(p, TonemapParams):
        return p
    return TonemapParams(float(p))


def mu_law(x, p: Union[TonemapParams, float, None] = None) -> Tensor:
    """ln(1 + mu x) / ln(1 + mu), elementwise on [0,1]."""
    x = x.data if isinstance(x, HdrImage) else as_tensor(x)
    _check_unit_range(x.data, "mu_law input")
    mu = _params(p).mu
    return log1p(x * mu) * (1.0 / np.log1p(mu))


def mu_law_inverse(y, p: Union[TonemapParams, float, None] = None) -> Tensor:
    """((1 + mu)^y - 1) / mu, the inverse of :func:`mu_law`."""
    y = as_tensor(y)
    _check_unit_range(y.data, "mu_law_inverse input")
    mu = _params(p).mu
    return expm1(y * np.log1p(mu)) * (1.0 / mu)


def bayer_masks(pattern: str, h: int, w: int) -> np.ndarray:
    """[3,H,W] 0/1 masks marking where R, G and B are sampled."""
    if pattern not in BAYER_PATTERNS:
        raise ValueError(f"unknown Bayer pattern {pattern!r}")
    masks = np.zeros((3, h, w))
    index = {"R": 0, "G": 1, "B": 2}
    for k, color in enumerate(pattern):
        dy, dx = divmod(k, 2)
        masks[index[color], dy::2, dx::2] = 1.0
    return masks


_RB_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0
_G_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0


@lru_cache(maxsize=32)
def _demosaic_operators(pattern: str, h: int, w: int):
    masks = bayer_masks(pattern, h, w)
    kernels = np.stack([_RB_KERNEL, _G_KERNEL, _RB_KERNEL])[:, None]
    # normalising weights depend only on the sampling layout, so the operator stays linear
    den = conv2d(Tensor(masks[None]), Tensor(kernels), padding=1, groups=3).data
    return masks[None], kernels, 1.0 / den


def demosaic_bilinear(x, pattern: str = "RGGB") -> Tensor:
    """Bilinear demosaicing of [...,1,H,W] Bayer data to [...,3,H,W] RGB.

    Each missing sample is the weighted average of the nearest same-colour
    samples (normalised convolution, so borders average whatever neighbours
    exist).  The map is linear in the input.
    """
    if isinstance(x, HdrImage):
        x = x.data
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-3] != 1:
        raise ShapeMismatch(f"demosaic expects a single-channel mosaic, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeMismatch(f"demosaic needs even spatial dims, got {h}x{w}")
    lead = x.shape[:-3]
    x4 = x.reshape((-1, 1, h, w))
    masks, kernels, inv_den = _demosaic_operators(pattern, h, w)
    num = conv2d(x4 * masks, Tensor(kernels), padding=1, groups=3)
    rgb = clip(num * inv_den, 0.0, 1.0)
    return rgb.reshape(lead + (3, h, w))


def domain_transfer(x, p: Union[TonemapParams, float, None] = None, fmt: str = None,
                    pattern: str = "RGGB") -> Tensor:
    """Map an HDR output to the tonemapped sRGB domain.

    ``x`` may be an :class:`HdrImage` (its format decides the path) or a raw
    tensor together with ``fmt``.
    """
    if isinstance(x, HdrImage):
        fmt = x.format
        x = x.data
    fmt = fmt or SRGB
    if fmt == RAW:
        return mu_law(demosaic_bilinear(x, pattern), p)
    if fmt == SRGB:
        return mu_law(x, p)
    raise ValueError(f"unknown format {fmt!r}")
