"""Toy student (ORM) and teacher (SPGRM) reconstruction networks.

Both networks work on a space-to-depth grid (``r x r`` pixel blocks folded
into channels), which keeps every 3x3 conv cheap at 64x64 while the receptive
field still covers the largest motion offsets.

The student predicts a per-pixel log-gain on top of a classic exposure-merge
estimate, squashed through a sigmoid so the output stays in [0,1].  The
teacher refines the (detached) tonemapped student output with three fusion
modules, each injecting the FPN-fused semantic prior through a
channel-attention Prior Fusion Block, and adds the result back as a residual.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    clip,
    leaky_relu,
    matmul,
    pixel_shuffle,
    pixel_unshuffle,
    sigmoid,
    softmax,
)
from .errors import ShapeMismatch
from .layers import CONSTRUCTED, Conv, Module

LOGIT_CLIP = 1e-4


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------
def merge_estimate(frames: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Triangle-weighted average of linearised frames, [B,n,C,H,W] -> [B,C,H,W].

    Saturated and near-black samples get little weight; when every frame is
    saturated the shortest exposure is used as is.
    """
    t = np.asarray(times, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    lin = frames * (t.min() / t)
    w = np.clip(1.0 - np.abs(2.0 * frames - 1.0), 0.0, None) ** 2 + 1e-6
    w[:, 1:] = np.where(frames[:, 1:] >= 1.0, 0.0, w[:, 1:])
    return (w * lin).sum(axis=1) / w.sum(axis=1)


def orm_inputs(frames: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Stack frames and their linearised versions on channels: [B, 2nC, H, W]."""
    frames = np.asarray(frames, dtype=np.float64)
    B, n, C, H, W = frames.shape
    t = np.asarray(times, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    lin = frames * (t.min() / t)
    return np.concatenate([frames, lin], axis=1).reshape(B, 2 * n * C, H, W)


class ORM(Module):
    """Six-layer conv network with taps after layers 2, 4 and 6."""

    def __init__(self, n_frames: int = 3, channels: int = 3, width: int = 32, r: int = 4,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        cin = 2 * n_frames * channels * r * r
        self.embed = Conv(cin, width, 1, rng)
        self.body = [Conv(width, width, 3, rng) for _ in range(5)]
        self.head = Conv(width, channels * r * r, 1, zero=True)
        self.n_frames, self.channels, self.width, self.r = n_frames, channels, width, r

    @property
    def tap_layers(self) -> Tuple[int, ...]:
        return (2, 4, 6)


def orm_forward(frames, times, params: ORM) -> Tuple[Tensor, List[Tensor]]:
    """frames [B,n,C,H,W] (or unbatched [n,C,H,W]) -> (H_in [B,C,H,W], taps)."""
    frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=np.float64)
    single = frames.ndim == 4
    if single:
        frames = frames[None]
    if frames.ndim != 5:
        raise ShapeMismatch(f"orm_forward expects [B,n,C,H,W], got {frames.shape}")
    B, n, C, H, W = frames.shape
    if n < 2 or n != params.n_frames or C != params.channels:
        raise ShapeMismatch(f"ORM built for {params.n_frames}x{params.channels} frames, got {n}x{C}")
    if len(times) != n:
        raise ShapeMismatch("one exposure time per frame required")
    base = np.clip(merge_estimate(frames, times), LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    x = pixel_unshuffle(Tensor(orm_inputs(frames, times)), params.r)
    x = leaky_relu(params.embed(x))
    taps = []
    for i, conv in enumerate(params.body, start=2):
        x = leaky_relu(conv(x))
        if i in params.tap_layers:
            taps.append(x)
    z = pixel_shuffle(params.head(x), params.r)
    out = sigmoid(z + np.log(base / (1.0 - base)))
    if single:
        out = out.reshape(out.shape[1:])
    return out, taps


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------
def attention_map(k: Tensor, q: Tensor, gamma) -> Tensor:
    """Softmax(K Q^T / gamma) over the last axis; [B,C,P] x [B,C,P] -> [B,C,C]."""
    return softmax(matmul(k, q.transpose((0, 2, 1))) / gamma, axis=-1)


class PriorFusionBlock(Module):
    """Channel (transposed) attention with queries from the prior.

    Q, K and V are produced by a pointwise conv followed by a depthwise 3x3
    conv.  The C x C logits are raw inner products over positions, so only
    gamma sets the sharpness of the attention.
    """

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = channels
        self.q_point, self.q_depth = Conv(c, c, 1, rng), Conv(c, c, 3, rng, groups=c, gain=0.5)
        self.k_point, self.k_depth = Conv(c, c, 1, rng), Conv(c, c, 3, rng, groups=c, gain=0.5)
        self.v_point, self.v_depth = Conv(c, c, 1, rng), Conv(c, c, 3, rng, groups=c, gain=0.5)
        self.proj = Conv(c, c, 1, rng, gain=0.5)
        self.gamma = Tensor(np.ones(1), requires_grad=True)
        self.channels = c


def prior_fusion_block(F_k, p_f, params: PriorFusionBlock, return_attention: bool = False):
    F_k = as_tensor(F_k)
    p_f = as_tensor(p_f)
    single = F_k.ndim == 3
    if single:
        F_k = F_k.reshape((1,) + F_k.shape)
        p_f = p_f.reshape((1,) + p_f.shape)
    if F_k.shape != p_f.shape or F_k.shape[1] != params.channels:
        raise ShapeMismatch(f"prior fusion needs matching [B,{params.channels},h,w] inputs, "
                            f"got {F_k.shape} and {p_f.shape}")
    B, C, h, w = F_k.shape
    q = params.q_depth(params.q_point(p_f)).reshape((B, C, h * w))
    k = params.k_depth(params.k_point(F_k)).reshape((B, C, h * w))
    v = params.v_depth(params.v_point(F_k)).reshape((B, C, h * w))
    attn = attention_map(k, q, params.gamma)
    mixed = matmul(attn, v).reshape((B, C, h, w))
    out = params.proj(mixed) + F_k
    if single:
        out = out.reshape(out.shape[1:])
        attn = attn.reshape(attn.shape[1:])
    return (out, attn) if return_attention else out


class FusionModule(Module):
    def __init__(self, width: int, rng):
        self.pre = Conv(width, width, 3, rng)
        self.pfb = PriorFusionBlock(width, rng)
        self.post = Conv(width, width, 3, rng)


class SPGRM(Module):
    """Embedding, exactly three semantic guided fusion modules, zero-init tail."""

    N_MODULES = 3

    def __init__(self, channels: int = 3, width: int = 32, r: int = 4,
                 rng: Optional[np.random.Generator] = None):
        CONSTRUCTED["spgrm"] += 1
        rng = rng if rng is not None else np.random.default_rng(1)
        self.embed = Conv(channels * r * r, width, 1, rng)
        self.modules = [FusionModule(width, rng) for _ in range(self.N_MODULES)]
        self.tail = Conv(width, channels * r * r, 1, zero=True)
        self.channels, self.width, self.r = channels, width, r

    def zero_(self):
        """Zero every weight and bias except gamma (the pure-residual state)."""
        for name, p in self.named_parameters():
            if not name.endswith("gamma"):
                p.data = np.zeros_like(p.data)
        return self


def spgrm_forward(H_s, p_f, params: SPGRM) -> Tuple[Tensor, List[Tensor]]:
    """Refine a tonemapped image [B,3,H,W] with a fused prior [B,width,H/r,W/r]."""
    H_s = as_tensor(H_s)
    p_f = as_tensor(p_f)
    single = H_s.ndim == 3
    if single:
        H_s = H_s.reshape((1,) + H_s.shape)
        p_f = p_f.reshape((1,) + p_f.shape)
    B, C, H, W = H_s.shape
    r = params.r
    if C != params.channels or H % r or W % r:
        raise ShapeMismatch(f"SPGRM input {H_s.shape} incompatible with channels={params.channels}, r={r}")
    if p_f.shape != (B, params.width, H // r, W // r):
        raise ShapeMismatch(f"prior shape {p_f.shape} != {(B, params.width, H // r, W // r)}")
    x = leaky_relu(params.embed(pixel_unshuffle(H_s, r)))
    taps = []
    for m in params.modules:
        x = leaky_relu(m.pre(x))
        x = prior_fusion_block(x, p_f, m.pfb)
        x = leaky_relu(m.post(x))
        taps.append(x)
    out = clip(H_s + pixel_shuffle(params.tail(x), r), 0.0, 1.0)
    if single:
        out = out.reshape(out.shape[1:])
    return out, taps


def count_parameters(modules: Sequence[Module]) -> int:
    return sum(m.num_parameters() for m in modules)
