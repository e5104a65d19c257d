"""Semantic priors: instance masks, a multi-scale feature pyramid, and FPN fusion.

The segmenter is replaced by an oracle.  Masks are the scene's true instance
labels.  Features come from a frozen, fixed-seed random conv pyramid run on
the tonemapped ground truth.  Externally produced masks and features can be
injected through the raster loader instead.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, as_tensor, leaky_relu, no_grad, resize, upsample_nearest
from .domain import mu_law
from .errors import FormatError, ShapeMismatch
from .layers import CONSTRUCTED, Conv, Module
from .raster import read_levels, read_planes, write_levels, write_planes

DEFAULT_K = 50
PYRAMID_CHANNELS = (256, 128, 64, 32)  # coarse -> fine, at H/16, H/8, H/4, H/2


@dataclass
class SegmentationPriors:
    masks: np.ndarray  # [K,H,W] in {0,1}
    features: List[np.ndarray] = field(default_factory=list)  # p_f^i, coarse -> fine

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3:
            raise ShapeMismatch(f"masks must be [K,H,W], got {self.masks.shape}")
        if not np.isin(self.masks, (0.0, 1.0)).all():
            raise ValueError("masks must be 0/1 valued")
        H, W = self.masks.shape[1:]
        if self.features:
            check_pyramid(self.features, H, W)

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    def valid(self) -> List[int]:
        return [k for k in range(self.K) if self.masks[k].any()]


def pyramid_shapes(h: int, w: int, channels: Sequence[int] = PYRAMID_CHANNELS) -> List[Tuple[int, int, int]]:
    return [(c, h // 2 ** (4 - i), w // 2 ** (4 - i)) for i, c in enumerate(channels)]


def check_pyramid(features, h: int, w: int):
    if len(features) != 4:
        raise ShapeMismatch(f"expected 4 pyramid levels, got {len(features)}")
    for i, f in enumerate(features):
        want = (h // 2 ** (4 - i), w // 2 ** (4 - i))
        if f.ndim != 3 or tuple(f.shape[1:]) != want:
            raise ShapeMismatch(f"level {i}: shape {f.shape} does not sit at spatial size {want}")


def fit_masks(masks: np.ndarray, K: int = DEFAULT_K, warn: bool = True) -> np.ndarray:
    """Pad with empty masks or truncate so exactly K masks remain."""
    n = masks.shape[0]
    if n == K:
        return masks
    if warn:
        warnings.warn(f"got {n} masks, {'padding' if n < K else 'truncating'} to {K}", stacklevel=3)
    if n > K:
        return masks[:K]
    pad = np.zeros((K - n,) + masks.shape[1:])
    return np.concatenate([masks, pad], axis=0)


def masks_from_labels(labels: np.ndarray, K: int = DEFAULT_K) -> np.ndarray:
    labels = np.asarray(labels)
    n = int(labels.max()) + 1
    onehot = (labels[None] == np.arange(n)[:, None, None]).astype(np.float64)
    return fit_masks(onehot, K, warn=False)


class FeaturePyramid(Module):
    """Frozen random conv pyramid: stride-2 3x3 convs, one level per stride."""

    def __init__(self, channels: Sequence[int] = PYRAMID_CHANNELS, in_ch: int = 3, seed: int = 1234):
        CONSTRUCTED["feature_pyramid"] += 1
        rng = np.random.default_rng([seed, 7])
        fine_to_coarse = list(channels)[::-1]
        self._stem = Conv(in_ch, fine_to_coarse[0], 3, rng, stride=2)
        self._stages = [Conv(a, b, 3, rng, stride=2) for a, b in zip(fine_to_coarse[:-1], fine_to_coarse[1:])]
        for conv in [self._stem] + self._stages:
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False

    def __call__(self, img: np.ndarray) -> List[np.ndarray]:
        """[3,H,W] -> four levels coarse -> fine."""
        with no_grad():
            x = leaky_relu(self._stem(Tensor(np.asarray(img)[None])))
            levels = [x]
            for conv in self._stages:
                x = leaky_relu(conv(x))
                levels.append(x)
        return [lvl.data[0] for lvl in levels[::-1]]


_PYRAMIDS: dict = {}


def _pyramid(channels, seed) -> FeaturePyramid:
    key = (tuple(channels), seed)
    if key not in _PYRAMIDS:
        _PYRAMIDS[key] = FeaturePyramid(channels, seed=seed)
    return _PYRAMIDS[key]


def prior_features(hdr_rgb: np.ndarray, channels: Sequence[int] = PYRAMID_CHANNELS, seed: int = 1234,
                   mu: float = 5000.0) -> List[np.ndarray]:
    """Pyramid features of the tonemapped radiance map [3,H,W]."""
    tone = mu_law(np.clip(hdr_rgb, 0.0, 1.0), mu).data
    return _pyramid(channels, seed)(tone)


def synth_priors(scene, K: int = DEFAULT_K, channels: Sequence[int] = PYRAMID_CHANNELS,
                 seed: int = 1234, mu: float = 5000.0) -> SegmentationPriors:
    """Oracle priors for a :class:`~skthdr.data.SyntheticScene`."""
    CONSTRUCTED["synth_priors"] += 1
    masks = masks_from_labels(scene.instances, K)
    return SegmentationPriors(masks=masks, features=prior_features(scene.hdr_gt, channels, seed, mu))


def save_priors(priors: SegmentationPriors, mask_file, feature_file):
    write_planes(mask_file, priors.masks[:, None])
    write_levels(feature_file, priors.features)


def load_priors(mask_file, feature_file, K: int = DEFAULT_K) -> SegmentationPriors:
    planes = read_planes(mask_file)
    if planes.shape[1] != 1:
        raise FormatError(f"mask file must hold single-channel planes, got C={planes.shape[1]}")
    masks = fit_masks((planes[:, 0] > 0.5).astype(np.float64), K)
    features = read_levels(feature_file)
    return SegmentationPriors(masks=masks, features=features)


# ---------------------------------------------------------------------------
# FPN
# ---------------------------------------------------------------------------
class FpnParams(Module):
    """Lateral 1x1 convs, 3x3 top-down merges and a 1x1 output projection.

    The pathway is linear with zero-initialised biases, so all-zero features
    fuse to an all-zero map.
    """

    def __init__(self, channels: Sequence[int] = PYRAMID_CHANNELS, inner: int = 16, c_out: int = 32,
                 rng=None):
        CONSTRUCTED["fpn"] += 1
        rng = rng if rng is not None else np.random.default_rng(0)
        self.lateral = [Conv(c, inner, 1, rng, gain=0.5) for c in channels]
        self.merge = [Conv(inner, inner, 3, rng, gain=0.5) for _ in channels[1:]]
        self.out = Conv(inner, c_out, 1, rng, gain=0.5)
        self.channels = tuple(channels)
        self.c_out = c_out


def fpn_fuse(features, params: FpnParams, target_hw: Tuple[int, int]) -> Tensor:
    """Fuse four levels (coarse -> fine, each [C,h,w] or [B,C,h,w])."""
    if len(features) != 4:
        raise ShapeMismatch(f"fpn_fuse needs 4 levels, got {len(features)}")
    feats = [as_tensor(f) for f in features]
    batched = feats[0].ndim == 4
    if not batched:
        feats = [f.reshape((1,) + f.shape) for f in feats]
    for i, f in enumerate(feats):
        if f.shape[1] != params.channels[i]:
            raise ShapeMismatch(f"level {i}: {f.shape[1]} channels, expected {params.channels[i]}")
        if i and f.shape[-2:] != tuple(2 * s for s in feats[i - 1].shape[-2:]):
            raise ShapeMismatch(f"level {i} is not twice the size of level {i - 1}")
    x = params.lateral[0](feats[0])
    for i in range(1, 4):
        x = params.merge[i - 1](upsample_nearest(x, 2) + params.lateral[i](feats[i]))
    out = params.out(resize(x, tuple(target_hw)))
    return out if batched else out.reshape(out.shape[1:])
