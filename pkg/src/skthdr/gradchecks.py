"""Registered finite-difference checks for every differentiable operation.

Each check builds seeded 4-8 px inputs, evaluates a scalar function, and
returns the max relative error reported by :func:`~skthdr.autodiff.gradcheck`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .domain import RAW, demosaic_bilinear, domain_transfer, mu_law
from .histogram import HistogramSpec, histogram_loss, semantic_histogram_loss, soft_histogram
from .models import ORM, SPGRM, PriorFusionBlock, orm_forward, prior_fusion_block, spgrm_forward
from .objectives import (
    FeatureExtractor,
    LossWeights,
    ObjectiveInputs,
    content_loss,
    spg_loss,
    total_objective,
)
from .semantic import FpnParams, fpn_fuse
from .skam import SkamStage, skam_forward

TOLERANCE = 1e-4
REGISTRY: Dict[str, Callable[[], float]] = {}


def register(name: str):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng([sum(map(ord, name)), 17])


def _var(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weights(rng, shape) -> Tensor:
    # fixed random projection so elementwise ops are checked beyond their sum
    return Tensor(rng.normal(size=shape))


# -- engine primitives -------------------------------------------------------
def _binary(op):
    def check():
        rng = _rng(op.__name__)
        a, b = _var(rng, 3, 4), _var(rng, 4, lo=0.5, hi=1.5)
        w = _weights(rng, (3, 4))
        return gradcheck(lambda x, y: (op(x, y) * w).sum(), [a, b])
    return check


for _op in (ad.add, ad.sub, ad.mul, ad.div):
    register(_op.__name__)(_binary(_op))


def _unary(op, lo=-1.0, hi=1.0):
    def check():
        rng = _rng(op.__name__)
        x = _var(rng, 3, 5, lo=lo, hi=hi)
        w = _weights(rng, (3, 5))
        return gradcheck(lambda t: (op(t) * w).sum(), x)
    return check


register("exp")(_unary(ad.exp))
register("log")(_unary(ad.log, 0.2, 2.0))
register("log1p")(_unary(ad.log1p, -0.5, 2.0))
register("expm1")(_unary(ad.expm1))
register("square")(_unary(ad.square))
register("sqrt")(_unary(ad.sqrt, 0.2, 2.0))
register("abs")(_unary(ad.absolute))
register("sigmoid")(_unary(ad.sigmoid, -3, 3))
register("leaky_relu")(_unary(ad.leaky_relu))
register("clip")(_unary(lambda t: ad.clip(t, -0.5, 0.5), -1, 1))


@register("sum_mean")
def _check_reduce():
    rng = _rng("sum_mean")
    x = _var(rng, 2, 3, 4)
    w = _weights(rng, (2, 4))
    return gradcheck(lambda t: (t.sum(axis=1) * w).sum() + ad.mean(t * t), x)


@register("matmul")
def _check_matmul():
    rng = _rng("matmul")
    a, b = _var(rng, 3, 4), _var(rng, 4, 2)
    w = _weights(rng, (3, 2))
    return gradcheck(lambda x, y: ((x @ y) * w).sum(), [a, b])


@register("softmax")
def _check_softmax():
    rng = _rng("softmax")
    x = _var(rng, 5)
    w = _weights(rng, (5,))
    return gradcheck(lambda t: (ad.softmax(t) * w).sum(), x)


@register("conv2d")
def _check_conv():
    rng = _rng("conv2d")
    x, k, b = _var(rng, 1, 2, 5, 5), _var(rng, 3, 2, 3, 3), _var(rng, 3)
    w = _weights(rng, (1, 3, 5, 5))
    return gradcheck(lambda a, c, d: (ad.conv2d(a, c, d, padding=1) * w).sum(), [x, k, b])


@register("conv2d_depthwise")
def _check_dwconv():
    rng = _rng("conv2d_depthwise")
    x, k = _var(rng, 1, 4, 4, 4), _var(rng, 4, 1, 3, 3)
    w = _weights(rng, (1, 4, 4, 4))
    return gradcheck(lambda a, c: (ad.conv2d(a, c, padding=1, groups=4) * w).sum(), [x, k])


@register("pool_resample")
def _check_pool():
    rng = _rng("pool_resample")
    x = _var(rng, 1, 2, 4, 4)
    w = _weights(rng, (1, 2, 4, 4))
    return gradcheck(lambda t: (ad.upsample_nearest(ad.max_pool2d(t) + ad.avg_pool2d(t)) * w).sum()
                     + (ad.pixel_shuffle(ad.pixel_unshuffle(t, 2), 2) * w).sum(), x)


# -- domain transfer ---------------------------------------------------------
@register("mu_law")
def _check_mu_law():
    rng = _rng("mu_law")
    x = _var(rng, 3, 4, 4, lo=0.05, hi=0.95)
    target = rng.uniform(0, 1, size=(3, 4, 4))
    return gradcheck(lambda t: ad.mean(ad.absolute(mu_law(t) - target)), x)


@register("demosaic")
def _check_demosaic():
    rng = _rng("demosaic")
    x = _var(rng, 1, 6, 6, lo=0.1, hi=0.5)
    w = _weights(rng, (3, 6, 6))
    return gradcheck(lambda t: (demosaic_bilinear(t) * w).sum(), x)


@register("domain_transfer_raw")
def _check_domain_raw():
    rng = _rng("domain_transfer_raw")
    x = _var(rng, 1, 8, 8, lo=0.05, hi=0.6)
    return gradcheck(lambda t: domain_transfer(t, fmt=RAW).sum(), x)


# -- histograms --------------------------------------------------------------
@register("soft_histogram")
def _check_soft_hist():
    rng = _rng("soft_histogram")
    x = _var(rng, 2, 4, 4, lo=10, hi=245)
    spec = HistogramSpec(16, 0, 255, 30)
    w = _weights(rng, (2, 16))
    return gradcheck(lambda t: (soft_histogram(t, spec).hist * w).sum(), x)


@register("histogram_loss")
def _check_hist_loss():
    rng = _rng("histogram_loss")
    x = _var(rng, 3, 4, 4, lo=5, hi=250)
    b = rng.uniform(0, 255, size=(3, 4, 4))
    return gradcheck(lambda t: histogram_loss(t, b), x)


@register("semantic_histogram_loss")
def _check_sem_hist():
    rng = _rng("semantic_histogram_loss")
    x = _var(rng, 3, 6, 6, lo=5, hi=250)
    b = rng.uniform(0, 255, size=(3, 6, 6))
    labels = rng.integers(0, 3, size=(6, 6))
    masks = np.stack([labels == k for k in range(5)]).astype(float)
    return gradcheck(lambda t: semantic_histogram_loss(t, b, masks), x)


# -- models ------------------------------------------------------------------
@register("prior_fusion_block")
def _check_pfb():
    rng = _rng("prior_fusion_block")
    block = PriorFusionBlock(4, rng)
    F, p = _var(rng, 4, 4, 4), _var(rng, 4, 4, 4)
    w = _weights(rng, (4, 4, 4))
    return gradcheck(lambda a, b, g: (prior_fusion_block(a, b, block) * w).sum(), [F, p, block.gamma])


@register("fpn_fuse")
def _check_fpn():
    rng = _rng("fpn_fuse")
    chans = (6, 5, 4, 3)
    params = FpnParams(chans, inner=4, c_out=4, rng=rng)
    feats = [_var(rng, c, 2 ** i, 2 ** i) for i, c in enumerate(chans)]
    w = _weights(rng, (4, 4, 4))
    return gradcheck(lambda *f: (fpn_fuse(list(f), params, (4, 4)) * w).sum(), feats)


@register("orm")
def _check_orm():
    rng = _rng("orm")
    orm = ORM(3, 3, 8, 4, rng)
    orm.head.weight.data = rng.normal(0, 0.1, size=orm.head.weight.shape)
    frames = rng.uniform(0, 1, size=(1, 3, 3, 8, 8))
    target = rng.uniform(0, 1, size=(1, 3, 8, 8))
    params = [orm.embed.weight, orm.body[2].weight, orm.head.weight]
    return gradcheck(lambda *p: ad.mean(ad.absolute(mu_law(orm_forward(frames, [1, 4, 16], orm)[0]) - target)),
                     params)


@register("spgrm")
def _check_spgrm():
    rng = _rng("spgrm")
    net = SPGRM(3, 4, 4, rng)
    net.tail.weight.data = rng.normal(0, 0.1, size=net.tail.weight.shape)
    H_s = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)))
    p_f = _var(rng, 1, 4, 2, 2)
    gt = rng.uniform(0, 1, size=(1, 3, 8, 8))
    params = [p_f, net.modules[0].pfb.gamma, net.modules[1].pre.weight, net.tail.weight]
    return gradcheck(lambda *p: spg_loss(spgrm_forward(H_s, p_f, net)[0], gt), params)


@register("skam")
def _check_skam():
    rng = _rng("skam")
    stage = SkamStage(4, 4, 4, rng)
    F_S, F_T = _var(rng, 1, 4, 4, 4), Tensor(rng.normal(size=(1, 4, 4, 4)))
    mask = (rng.random((1, 4, 4, 4)) < 0.5).astype(float)
    return gradcheck(lambda a, w: skam_forward(a, F_T, stage, mask=mask)[1], [F_S, stage.encoder_s.first.weight])


@register("content_loss")
def _check_content():
    rng = _rng("content_loss")
    H_in = _var(rng, 3, 8, 8, lo=0.05, hi=0.9)
    H_hat = rng.uniform(0, 1, size=(3, 8, 8))
    return gradcheck(lambda t: content_loss(t, H_hat, FeatureExtractor()), H_in)


@register("total_objective")
def _check_total():
    rng = _rng("total_objective")
    B, C, H, W = 1, 3, 8, 8
    H_in = _var(rng, B, C, H, W, lo=0.05, hi=0.9)
    H_hat = Tensor(rng.uniform(0, 1, size=(B, C, H, W)))
    gt = rng.uniform(0, 1, size=(B, C, H, W))
    labels = rng.integers(0, 3, size=(H, W))
    masks = np.stack([labels == k for k in range(4)]).astype(float)[None]
    taps_s = [_var(rng, B, 4, 2, 2) for _ in range(3)]
    taps_t = [Tensor(rng.normal(size=(B, 4, 2, 2))) for _ in range(3)]
    stages = [SkamStage(4, 4, 4, rng) for _ in range(3)]
    lat = [(rng.random((B, 4, 2, 2)) < 0.5).astype(float) for _ in range(3)]
    fx = FeatureExtractor()

    def f(h, *taps):
        out = ObjectiveInputs(h, mu_law(h), H_hat, gt, masks, list(taps), taps_t)
        return total_objective(out, LossWeights(), fx, stages, masks_latent=lat)[0]

    return gradcheck(f, [H_in] + taps_s)


# -- runner ------------------------------------------------------------------
@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < TOLERANCE


def gradcheck_suite(names=None) -> List[CheckResult]:
    results = []
    for name in names or REGISTRY:
        t0 = time.perf_counter()
        try:
            err = float(REGISTRY[name]())
        except Exception:  # a crashing check is a failing check
            err = float("inf")
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op'.ljust(width)}  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_err:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
