"""Image operations on NCHW tensors: convolution, pooling, resampling."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .tensor import Function, Tensor, as_tensor, reshape, transpose


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


class Conv2d(Function):
    """Cross-correlation with zero padding, stride and channel groups.

    Dense convs build NHWC patch matrices with ``kh*kw`` strided slice copies,
    so both the forward matmul and the col2im scatter touch contiguous rows.
    """

    def forward(self, x, w, b, stride=1, padding=0, groups=1):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeMismatch(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
        B, C, H, W = x.shape
        O, Cg, kh, kw = w.shape
        if C % groups or O % groups or Cg != C // groups:
            raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with weight {w.shape} (groups={groups})")
        if b is not None and b.shape != (O,):
            raise ShapeMismatch(f"conv2d bias shape {b.shape} != ({O},)")
        sh, sw = _pair(stride)
        ph, pw = _pair(padding)
        Ho = (H + 2 * ph - kh) // sh + 1
        Wo = (W + 2 * pw - kw) // sw + 1
        if Ho <= 0 or Wo <= 0:
            raise ShapeMismatch("conv2d kernel larger than padded input")
        geom = (B, C, H, W, Ho, Wo, sh, sw, ph, pw)
        depthwise = Cg == 1 and groups == C and O == C
        if depthwise:
            xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
            out = np.zeros((B, C, Ho, Wo))
            for i in range(kh):
                for j in range(kw):
                    out += xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] * w[:, 0, i, j][None, :, None, None]
            self.save("depthwise", xp, w, geom, b is not None)
        else:
            cols = _im2col_nhwc(x, kh, kw, geom)  # [B*Ho*Wo, kh*kw*C]
            Og = O // groups
            wr = w.transpose(0, 2, 3, 1)  # [O, kh, kw, Cg]
            if groups == 1:
                out = cols @ wr.reshape(O, -1).T
            else:
                c5 = cols.reshape(-1, kh * kw, groups, Cg)
                out = np.concatenate(
                    [c5[:, :, gi].reshape(len(c5), -1) @ wr[gi * Og:(gi + 1) * Og].reshape(Og, -1).T
                     for gi in range(groups)], axis=1)
            out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
            self.save("dense", cols, w, geom, b is not None)
        if b is not None:
            out = out + b.reshape(1, O, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, g):
        kind, data, w, geom, has_bias = self.saved
        B, C, H, W, Ho, Wo, sh, sw, ph, pw = geom
        O, Cg, kh, kw = w.shape
        gx = gw = gb = None
        if has_bias and self.needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        if kind == "depthwise":
            xp = data
            if self.needs[1]:
                gw = np.empty((C, 1, kh, kw))
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] * g).sum(axis=(0, 2, 3))
            if self.needs[0]:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += g * w[:, 0, i, j][None, :, None, None]
                gx = gxp[:, :, ph:ph + H, pw:pw + W]
            return gx, gw, gb
        cols = data
        groups = C // Cg
        Og = O // groups
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        wr = w.transpose(0, 2, 3, 1)
        if groups == 1:
            if self.needs[1]:
                gw = (g2.T @ cols).reshape(O, kh, kw, Cg).transpose(0, 3, 1, 2)
            if self.needs[0]:
                gcols = g2 @ wr.reshape(O, -1)
        else:
            c5 = cols.reshape(-1, kh * kw, groups, Cg)
            if self.needs[1]:
                gw = np.concatenate(
                    [(g2[:, gi * Og:(gi + 1) * Og].T @ c5[:, :, gi].reshape(len(c5), -1))
                     .reshape(Og, kh, kw, Cg) for gi in range(groups)], axis=0).transpose(0, 3, 1, 2)
            if self.needs[0]:
                gc = np.empty((len(c5), kh * kw, groups, Cg))
                for gi in range(groups):
                    gc[:, :, gi] = (g2[:, gi * Og:(gi + 1) * Og] @ wr[gi * Og:(gi + 1) * Og].reshape(Og, -1)
                                    ).reshape(-1, kh * kw, Cg)
                gcols = gc.reshape(len(c5), -1)
        if self.needs[0]:
            gx = _col2im_nhwc(gcols, kh, kw, geom)
        if gw is not None:
            gw = np.ascontiguousarray(gw)
        return gx, gw, gb


def _im2col_nhwc(x, kh, kw, geom) -> np.ndarray:
    B, C, H, W, Ho, Wo, sh, sw, ph, pw = geom
    xn = x.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        return np.ascontiguousarray(xn).reshape(B * H * W, C)
    xp = np.zeros((B, H + 2 * ph, W + 2 * pw, C))
    xp[:, ph:ph + H, pw:pw + W] = xn
    cols = np.empty((B, Ho, Wo, kh, kw, C))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    return cols.reshape(B * Ho * Wo, kh * kw * C)


def _col2im_nhwc(gcols, kh, kw, geom) -> np.ndarray:
    B, C, H, W, Ho, Wo, sh, sw, ph, pw = geom
    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        return np.ascontiguousarray(gcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
    gc = gcols.reshape(B, Ho, Wo, kh, kw, C)
    gxp = np.zeros((B, H + 2 * ph, W + 2 * pw, C))
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gc[:, :, :, i, j]
    return np.ascontiguousarray(gxp[:, ph:ph + H, pw:pw + W].transpose(0, 3, 1, 2))


def conv2d(x, w, b=None, stride=1, padding=0, groups=1) -> Tensor:
    """2-D cross-correlation over an NCHW batch.

    ``groups == C`` with one filter per channel gives a depthwise convolution.
    """
    inputs = (x, w) if b is None else (x, w, b)
    if b is None:
        return _Conv2dNoBias.apply(*inputs, stride=stride, padding=padding, groups=groups)
    return Conv2d.apply(*inputs, stride=stride, padding=padding, groups=groups)


class _Conv2dNoBias(Conv2d):
    def forward(self, x, w, stride=1, padding=0, groups=1):
        return super().forward(x, w, None, stride=stride, padding=padding, groups=groups)

    def backward(self, g):
        gx, gw, _ = super().backward(g)
        return gx, gw


class MaxPool2d(Function):
    def forward(self, x, k=2):
        B, C, H, W = x.shape
        if H % k or W % k:
            raise ShapeMismatch(f"max_pool2d: spatial dims {H}x{W} not divisible by {k}")
        blocks = x.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
        idx = blocks.argmax(axis=-1)
        self.save(x.shape, idx, k)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        shape, idx, k = self.saved
        B, C, H, W = shape
        blocks = np.zeros((B, C, H // k, W // k, k * k))
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        out = blocks.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return (out,)


class AvgPool2d(Function):
    def forward(self, x, k=2):
        B, C, H, W = x.shape
        if H % k or W % k:
            raise ShapeMismatch(f"avg_pool2d: spatial dims {H}x{W} not divisible by {k}")
        self.save(k)
        return x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(self, g):
        (k,) = self.saved
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)


class UpsampleNearest(Function):
    def forward(self, x, k=2):
        self.save(k)
        return np.repeat(np.repeat(x, k, axis=2), k, axis=3)

    def backward(self, g):
        (k,) = self.saved
        B, C, H, W = g.shape
        return (g.reshape(B, C, H // k, k, W // k, k).sum(axis=(3, 5)),)


def max_pool2d(x, k=2):
    return MaxPool2d.apply(x, k=k)


def avg_pool2d(x, k=2):
    return AvgPool2d.apply(x, k=k)


def upsample_nearest(x, k=2):
    return UpsampleNearest.apply(x, k=k)


def resize(x, size) -> Tensor:
    """Integer-factor resize: average pooling down, nearest-neighbour up."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    th, tw = size
    if (th, tw) == (h, w):
        return x
    if th < h:
        if h % th or w % tw or h // th != w // tw:
            raise ShapeMismatch(f"cannot resize {h}x{w} to {th}x{tw}")
        return avg_pool2d(x, h // th)
    if th % h or tw % w or th // h != tw // w:
        raise ShapeMismatch(f"cannot resize {h}x{w} to {th}x{tw}")
    return upsample_nearest(x, th // h)


def pixel_unshuffle(x, r: int) -> Tensor:
    """[B,C,H,W] -> [B,C*r*r,H/r,W/r] (space-to-depth)."""
    B, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeMismatch(f"pixel_unshuffle: {H}x{W} not divisible by {r}")
    y = reshape(x, (B, C, H // r, r, W // r, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (B, C * r * r, H // r, W // r))


def pixel_shuffle(x, r: int) -> Tensor:
    """[B,C*r*r,h,w] -> [B,C,h*r,w*r] (depth-to-space)."""
    B, Cr, h, w = x.shape
    if Cr % (r * r):
        raise ShapeMismatch(f"pixel_shuffle: {Cr} channels not divisible by {r * r}")
    C = Cr // (r * r)
    y = reshape(x, (B, C, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (B, C, h * r, w * r))
