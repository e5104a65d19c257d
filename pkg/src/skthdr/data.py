"""Synthetic multi-exposure scenes.

A scene is a piecewise-smooth HDR radiance map built from random shapes over
a gradient background.  The shapes are the ground-truth instances.  Each
exposure shifts the scene by an integer offset (the reference frame stays
put), scales it by the exposure time, and adds read noise.  It then clips and
quantises to 8 bits.  Short frames come out dark and noisy; long frames come
out saturated and misaligned.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .domain import RAW, SRGB, bayer_masks
from .errors import ShapeMismatch
from .raster import read_named, write_named


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 3
    exposure_times: Optional[Tuple[float, ...]] = None
    min_instances: int = 3
    max_instances: int = 10
    dynamic_range: float = 3.5  # decades of radiance before normalisation
    min_span: float = 3.0  # guaranteed decades between darkest and brightest value
    max_shift: int = 2
    noise_sigma: float = 0.01
    smooth: bool = False

    def times(self) -> np.ndarray:
        if self.exposure_times is not None:
            t = np.asarray(self.exposure_times, dtype=np.float64)
            if len(t) != self.n_frames:
                raise ValueError("exposure_times length must equal n_frames")
        else:
            # 3 frames: 2 stops apart; more frames: 1 stop apart
            step = 4.0 if self.n_frames <= 3 else 2.0
            t = step ** np.arange(self.n_frames, dtype=np.float64)
        if np.any(np.diff(t) <= 0):
            raise ValueError("exposure times must be strictly increasing")
        return t


@dataclass
class SyntheticScene:
    hdr_gt: np.ndarray  # [3,H,W] linear radiance, max 1
    instances: np.ndarray  # [H,W] int labels 0..K-1
    exposure_times: np.ndarray
    motion: np.ndarray  # [n,2] integer (dy, dx) per frame
    noise_sigma: float
    seed: int
    reference: int = 1

    @property
    def n_instances(self) -> int:
        return int(self.instances.max()) + 1


@dataclass
class SdrStack:
    frames: np.ndarray  # [n,C,H,W] in [0,1]
    exposure_times: np.ndarray
    reference: int = 1
    format: str = SRGB

    @property
    def n(self) -> int:
        return self.frames.shape[0]


def _as_rng(rng) -> Tuple[np.random.Generator, int]:
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
        return np.random.default_rng(seed), seed
    seed = int(rng)
    return np.random.default_rng(seed), seed


def _shape_mask(rng, H, W, yy, xx) -> np.ndarray:
    cy, cx = rng.uniform(0.1, 0.9) * H, rng.uniform(0.1, 0.9) * W
    ry, rx = rng.uniform(0.08, 0.3) * H, rng.uniform(0.08, 0.3) * W
    kind = rng.integers(0, 3)
    if kind == 0:  # ellipse
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == 1:  # axis-aligned rectangle
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    theta = rng.uniform(0, np.pi)  # rotated rectangle
    u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    return (np.abs(u) <= ry) & (np.abs(v) <= rx)


def generate_scene(cfg: SceneConfig, rng: Union[int, np.random.Generator]) -> SyntheticScene:
    """Draw one scene; identical seeds give identical scenes."""
    rng, seed = _as_rng(rng)
    H, W = cfg.height, cfg.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dr = cfg.dynamic_range
    while True:
        target = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        # background: log-radiance gradient spanning the dark end of the range
        g0 = rng.uniform(-dr, -dr + 0.5)
        gy, gx = rng.uniform(-0.5, 0.5, size=2)
        log_rad = g0 + 1.0 + gy * (yy / H - 0.5) * 2 + gx * (xx / W - 0.5) * 2
        tint = np.ones((3, H, W)) * rng.uniform(0.6, 1.0, size=(3, 1, 1))
        labels = np.zeros((H, W), dtype=np.int64)
        levels = rng.uniform(-dr + 0.5, -0.3, size=max(target - 1, 0))
        if target > 1:
            levels[rng.integers(0, target - 1)] = 0.0  # one bright source pins the top
        for k in range(1, target):
            if cfg.smooth:
                break
            m = _shape_mask(rng, H, W, yy, xx)
            fy, fx, ph = rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.3)
            texture = levels[k - 1] - amp + amp * np.sin(fy * yy + fx * xx + ph)
            log_rad = np.where(m, texture, log_rad)
            tint = np.where(m[None], rng.uniform(0.5, 1.0, size=(3, 1, 1)), tint)
            labels[m] = k
        if cfg.smooth:
            log_rad = log_rad + 0.5 * np.sin(2 * np.pi * yy / H + rng.uniform(0, 6)) * np.cos(2 * np.pi * xx / W)
        present = np.unique(labels)
        relabel = np.zeros(labels.max() + 1, dtype=np.int64)
        relabel[present] = np.arange(len(present))
        labels = relabel[labels]
        if cfg.smooth or len(present) >= cfg.min_instances:
            break
    log_rgb = np.log10(tint) + log_rad
    span = log_rgb.max() - log_rgb.min()
    if span < cfg.min_span:
        # stretch about the brightest value so the scene covers the required decades
        top = log_rgb.max()
        log_rgb = top + (log_rgb - top) * (cfg.min_span / span * (1 + 1e-9))
    radiance = 10.0 ** (log_rgb - log_rgb.max())
    n = cfg.n_frames
    ref = n // 2
    motion = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=(n, 2)) if cfg.max_shift else np.zeros((n, 2), int)
    motion[ref] = 0
    return SyntheticScene(
        hdr_gt=radiance,
        instances=labels,
        exposure_times=cfg.times(),
        motion=np.asarray(motion, dtype=np.int64),
        noise_sigma=float(cfg.noise_sigma),
        seed=seed,
        reference=ref,
    )


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with edge replication."""
    if dy == 0 and dx == 0:
        return img
    H, W = img.shape[-2:]
    pad = [(0, 0)] * (img.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
    p = np.pad(img, pad, mode="edge")
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return p[..., y0:y0 + H, x0:x0 + W]


def expose(scene: SyntheticScene, i: int, rng: Optional[np.random.Generator] = None,
           quantize: bool = True) -> np.ndarray:
    dy, dx = scene.motion[i]
    frame = shift_image(scene.hdr_gt, int(dy), int(dx)) * scene.exposure_times[i]
    if rng is not None and scene.noise_sigma > 0:
        frame = frame + rng.normal(0.0, scene.noise_sigma, size=frame.shape)
    if not quantize:
        return frame
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0) / 255.0


def simulate_exposures(scene: SyntheticScene) -> SdrStack:
    rng = np.random.default_rng([scene.seed, 1])
    frames = np.stack([expose(scene, i, rng) for i in range(len(scene.exposure_times))])
    return SdrStack(frames=frames, exposure_times=scene.exposure_times.copy(), reference=scene.reference)


def mosaic(img: np.ndarray, pattern: str = "RGGB") -> np.ndarray:
    """Sample a [...,3,H,W] image on a Bayer grid -> [...,1,H,W]."""
    h, w = img.shape[-2:]
    if img.shape[-3] != 3:
        raise ShapeMismatch(f"mosaic needs 3 channels, got {img.shape}")
    if h % 2 or w % 2:
        raise ShapeMismatch(f"mosaic needs even dims, got {h}x{w}")
    return (img * bayer_masks(pattern, h, w)).sum(axis=-3, keepdims=True)


def to_raw_bayer(stack: SdrStack, pattern: str = "RGGB") -> SdrStack:
    return SdrStack(frames=mosaic(stack.frames, pattern), exposure_times=stack.exposure_times.copy(),
                    reference=stack.reference, format=RAW)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
@dataclass
class SceneSet:
    """Arrays for a split: frames [S,n,C,H,W], gt [S,C,H,W], labels [S,H,W]."""

    frames: np.ndarray
    gt: np.ndarray
    labels: np.ndarray
    exposure_times: np.ndarray
    seeds: List[int] = field(default_factory=list)
    reference: int = 1
    format: str = SRGB
    gt_rgb: Optional[np.ndarray] = None

    def __len__(self):
        return self.frames.shape[0]


def build_split(cfg: SceneConfig, seeds: Sequence[int], fmt: str = SRGB, pattern: str = "RGGB") -> SceneSet:
    frames, gts, labels, rgb = [], [], [], []
    for s in seeds:
        scene = generate_scene(cfg, int(s))
        stack = simulate_exposures(scene)
        gt = scene.hdr_gt
        if fmt == RAW:
            stack = to_raw_bayer(stack, pattern)
            gt = mosaic(gt, pattern)
        frames.append(stack.frames)
        gts.append(gt)
        labels.append(scene.instances)
        rgb.append(scene.hdr_gt)
    return SceneSet(
        frames=np.stack(frames), gt=np.stack(gts), labels=np.stack(labels),
        exposure_times=cfg.times(), seeds=[int(s) for s in seeds],
        reference=cfg.n_frames // 2, format=fmt, gt_rgb=np.stack(rgb),
    )


def save_scene(path, scene: SyntheticScene, stack: Optional[SdrStack] = None):
    stack = stack or simulate_exposures(scene)
    write_named(path, {
        "hdr_gt": scene.hdr_gt,
        "instances": scene.instances.astype(np.float64),
        "exposure_times": scene.exposure_times,
        "motion": scene.motion.astype(np.float64),
        "noise_sigma": np.array([scene.noise_sigma]),
        "seed": np.array([float(scene.seed)]),
        "reference": np.array([float(scene.reference)]),
        "frames": stack.frames,
    }, magic=b"SCN1")


def load_scene(path) -> Tuple[SyntheticScene, SdrStack]:
    t = read_named(path, magic=b"SCN1")
    scene = SyntheticScene(
        hdr_gt=t["hdr_gt"], instances=t["instances"].astype(np.int64),
        exposure_times=t["exposure_times"], motion=t["motion"].astype(np.int64),
        noise_sigma=float(t["noise_sigma"][0]), seed=int(t["seed"][0]),
        reference=int(t["reference"][0]),
    )
    stack = SdrStack(frames=t["frames"], exposure_times=t["exposure_times"], reference=scene.reference)
    return scene, stack


def write_manifest(path, splits: dict, cfg: SceneConfig, extra: Optional[dict] = None):
    doc = {"scene_config": asdict(cfg), "splits": splits}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
