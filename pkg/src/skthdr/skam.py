"""Masked feature alignment between student and teacher taps.

Both taps are encoded into a shared latent space, mixed with a random binary
mask and its complement, and decoded back to the teacher's feature space.
The loss is the MSE between the decoded features and the (constant) teacher
tap, so gradients reach the student tap and the codecs but never the teacher.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, as_tensor, leaky_relu, mean, square
from .errors import ShapeMismatch, StageCountMismatch
from .layers import CONSTRUCTED, Conv, Module


@dataclass
class BinaryMask:
    values: np.ndarray
    seed: Optional[int] = None

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.values


def sample_mask(shape, rng) -> BinaryMask:
    """I.i.d. Bernoulli(0.5) entries in {0, 1}."""
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    return BinaryMask((rng.random(shape) < 0.5).astype(np.float64), seed)


class Codec(Module):
    """Two 3x3 convs with a leaky ReLU in between (or linear when ``act=False``)."""

    def __init__(self, cin: int, cout: int, latent: int, rng=None, act: bool = True):
        self.first = Conv(cin, latent, 3, rng)
        self.second = Conv(latent, cout, 3, rng)
        self.act = act

    def __call__(self, x):
        h = self.first(x)
        return self.second(leaky_relu(h) if self.act else h)


class SkamStage(Module):
    def __init__(self, c_student: int, c_teacher: int, latent: int = 32, rng=None, act: bool = True):
        CONSTRUCTED["skam"] += 1
        rng = rng if rng is not None else np.random.default_rng(2)
        self.encoder_s = Codec(c_student, latent, latent, rng, act)
        self.encoder_t = Codec(c_teacher, latent, latent, rng, act)
        self.decoder = Codec(latent, c_teacher, latent, rng, act)
        self.latent = latent

    @classmethod
    def identity(cls, channels: int) -> "SkamStage":
        """Linear codecs whose convs all pass the centre tap through unchanged."""
        stage = cls(channels, channels, channels, act=False)
        eye = np.zeros((channels, channels, 3, 3))
        eye[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        for _, p in stage.named_parameters():
            p.data = eye.copy() if p.ndim == 4 else np.zeros_like(p.data)
        return stage


def skam_forward(F_S, F_T, params: SkamStage, rng=None, mask: Optional[np.ndarray] = None
                 ) -> Tuple[Tensor, Tensor]:
    """Return (F_E, L_feat) for one alignment stage.

    ``mask`` fixes I^M; otherwise it is drawn from ``rng``.
    """
    F_S = as_tensor(F_S)
    F_T = as_tensor(F_T)
    if F_S.ndim != 4 or F_T.ndim != 4:
        raise ShapeMismatch(f"SKAM expects [B,C,h,w] taps, got {F_S.shape} and {F_T.shape}")
    if F_S.shape[0] != F_T.shape[0] or F_S.shape[2:] != F_T.shape[2:]:
        raise ShapeMismatch(f"SKAM taps differ in batch or spatial size: {F_S.shape} vs {F_T.shape}")
    target = F_T.detach()
    s_hat = params.encoder_s(F_S)
    t_hat = params.encoder_t(target)
    if mask is None:
        mask = sample_mask(s_hat.shape, rng).values
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != s_hat.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} != latent shape {s_hat.shape}")
    F_E = params.decoder(s_hat * (1.0 - mask) + t_hat * mask)
    return F_E, mean(square(F_E - target))


def multi_stage_loss(taps_s: Sequence, taps_t: Sequence, stages: Sequence[SkamStage], rng=None,
                     masks: Optional[List[np.ndarray]] = None) -> Tensor:
    """Sum of per-stage alignment losses; masks are drawn sequentially from ``rng``."""
    if not (len(taps_s) == len(taps_t) == len(stages)):
        raise StageCountMismatch(
            f"{len(taps_s)} student taps, {len(taps_t)} teacher taps, {len(stages)} SKAM stages")
    total = Tensor(0.0)
    for k, (fs, ft, st) in enumerate(zip(taps_s, taps_t, stages)):
        _, loss = skam_forward(fs, ft, st, rng, None if masks is None else masks[k])
        total = total + loss
    return total
