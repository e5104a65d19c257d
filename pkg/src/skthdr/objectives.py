"""Training losses and the combined objective.

Every distillation term treats teacher tensors as constants, so the student
parameters are driven by ``org + lambda1*content + lambda2*color + feat`` and
the teacher parameters by ``spg`` alone, even though both are summed into a
single backward pass.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, absolute, as_tensor, leaky_relu, max_pool2d, mean, no_grad
from .domain import SRGB, TonemapParams, domain_transfer
from .errors import ShapeMismatch
from .histogram import HistogramSpec, semantic_histogram_loss
from .layers import Conv, Module
from .skam import multi_stage_loss


@dataclass(frozen=True)
class LossWeights:
    lambda_perc: float = 1e-2
    lambda1: float = 1e-3
    lambda2: float = 100.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


@dataclass
class LossReport:
    org: float = 0.0
    spg: float = 0.0
    content: float = 0.0
    color: float = 0.0
    feat: float = 0.0
    total: float = 0.0
    step: Optional[int] = None
    epoch: Optional[int] = None

    def recompose(self, w: LossWeights) -> float:
        return self.org + w.lambda1 * self.content + w.lambda2 * self.color + self.feat

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


TERMS = ("org", "spg", "content", "color", "feat", "total")


def mean_report(reports: Sequence[LossReport]) -> dict:
    if not reports:
        return {k: 0.0 for k in TERMS}
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in TERMS}


# ---------------------------------------------------------------------------
# frozen feature extractor
# ---------------------------------------------------------------------------
class FeatureExtractor(Module):
    """Frozen 4-conv stack: conv, pool, conv (tap 1), pool, conv, conv (tap 2).

    ``weights`` (four [O,I,3,3] arrays) replaces the fixed-seed random
    initialisation, e.g. to plug in pretrained filters.
    """

    def __init__(self, in_ch: int = 3, widths=(8, 16, 16, 16), seed: int = 4321,
                 weights: Optional[List[np.ndarray]] = None):
        rng = np.random.default_rng([seed, 11])
        chans = [in_ch] + list(widths)
        self._convs = [Conv(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]
        if weights is not None:
            if len(weights) != 4:
                raise ValueError("FeatureExtractor needs exactly four weight arrays")
            for conv, w in zip(self._convs, weights):
                w = np.asarray(w, dtype=np.float64)
                if w.shape != conv.weight.shape:
                    raise ShapeMismatch(f"weight shape {w.shape} != {conv.weight.shape}")
                conv.weight.data = w.copy()
        for conv in self._convs:
            conv.weight.requires_grad = False
            conv.bias.requires_grad = False

    def frozen_tensors(self) -> List[Tensor]:
        return [t for c in self._convs for t in (c.weight, c.bias)]

    def __call__(self, x) -> List[Tensor]:
        x = as_tensor(x)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        c1, c2, c3, c4 = self._convs
        tap1 = leaky_relu(c2(max_pool2d(leaky_relu(c1(x)), 2)))
        tap2 = leaky_relu(c4(leaky_relu(c3(max_pool2d(tap1, 2)))))
        return [tap1, tap2]


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------
def l1(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"L1 shapes differ: {a.shape} vs {b.shape}")
    return mean(absolute(a - b))


def spg_loss(H_hat, gt, p: Optional[TonemapParams] = None, fmt: str = SRGB) -> Tensor:
    """Mean absolute error between the teacher output and the tonemapped GT."""
    with no_grad():
        target = domain_transfer(gt, p, fmt)
    return l1(H_hat, target)


def content_loss(H_in, H_hat, fx: FeatureExtractor, lam: float = 1e-2,
                 p: Optional[TonemapParams] = None, fmt: str = SRGB) -> Tensor:
    """Pixel L1 plus ``lam`` times feature L1 summed over the extractor taps."""
    return content_terms(domain_transfer(H_in, p, fmt), H_hat, fx, lam)


def content_terms(student, H_hat, fx: FeatureExtractor, lam: float = 1e-2) -> Tensor:
    """:func:`content_loss` on an already tonemapped student image."""
    student = as_tensor(student)
    teacher = as_tensor(H_hat).detach()
    if student.shape != teacher.shape:
        raise ShapeMismatch(f"content loss shapes differ: {student.shape} vs {teacher.shape}")
    loss = l1(student, teacher)
    if lam == 0:
        return loss
    with no_grad():
        t_feats = fx(teacher)
    for fs, ft in zip(fx(student), t_feats):
        loss = loss + lam * l1(fs, ft)
    return loss


def color_loss(H_s, H_hat, masks, spec: HistogramSpec = HistogramSpec(), scale: float = 255.0,
               restrict_to_mask: bool = True) -> Tensor:
    """Batch mean of the semantic histogram loss on images scaled by ``scale``."""
    H_s = as_tensor(H_s)
    teacher = as_tensor(H_hat).detach()
    masks = np.asarray(masks)
    if H_s.ndim == 3:
        return semantic_histogram_loss(H_s * scale, teacher * scale, masks, spec, restrict_to_mask)
    total = None
    for b in range(H_s.shape[0]):
        term = semantic_histogram_loss(H_s[b] * scale, teacher[b] * scale, masks[b], spec, restrict_to_mask)
        total = term if total is None else total + term
    return total * (1.0 / H_s.shape[0])


@dataclass
class ObjectiveInputs:
    """Tensors of one synchronised forward pass (all batched [B,...])."""

    H_in: Tensor
    H_s: Tensor
    H_hat: Tensor
    gt: np.ndarray
    masks: np.ndarray
    taps_s: List[Tensor] = field(default_factory=list)
    taps_t: List[Tensor] = field(default_factory=list)


def total_objective(out: ObjectiveInputs, weights: LossWeights, fx: FeatureExtractor, stages,
                    rng=None, spec: HistogramSpec = HistogramSpec(),
                    p: Optional[TonemapParams] = None, fmt: str = SRGB,
                    restrict_to_mask: bool = True, masks_latent=None, return_terms: bool = False):
    """Return (student total, L_spg, LossReport[, term tensors]).

    ``org`` is the tonemapped-domain L1 of the student; ``spg`` supervises the
    teacher; the remaining three terms distil teacher into student.
    """
    with no_grad():
        target = domain_transfer(out.gt, p, fmt)
    org = l1(out.H_s, target)
    spg = l1(out.H_hat, target)
    content = content_terms(out.H_s, out.H_hat, fx, weights.lambda_perc)
    color = color_loss(out.H_s, out.H_hat, out.masks, spec, restrict_to_mask=restrict_to_mask)
    feat = multi_stage_loss(out.taps_s, out.taps_t, stages, rng, masks_latent)
    total = org + weights.lambda1 * content + weights.lambda2 * color + feat
    report = LossReport(org=org.item(), spg=spg.item(), content=content.item(), color=color.item(),
                        feat=feat.item(), total=total.item())
    if return_terms:
        terms = {"org": org, "content": content, "color": color, "feat": feat}
        return total, spg, report, terms
    return total, spg, report
