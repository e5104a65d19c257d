"""Training loop, checkpoints, evaluation and teacher-free inference.

Two arms share data, batch order and student initialisation:

* ``baseline``: the student alone, trained on its reconstruction loss.
* ``distilled``: student and teacher trained together.  One backward pass of
  ``total + spg`` updates three disjoint parameter groups (student, teacher
  with its FPN, SKAM codecs).

Every random draw comes from a stream keyed by ``(seed, label, epoch, step)``
so a run resumed from an epoch checkpoint replays the uninterrupted run bit
for bit.
"""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .config import TrainConfig
from .data import SceneConfig, SceneSet, build_split, load_scene
from .domain import RAW, demosaic_bilinear, domain_transfer, mu_law_inverse
from .errors import CheckpointError, ConfigError, FormatError
from .metrics import MetricsRecord, evaluate_pair, mean_record, write_csv
from .models import ORM, SPGRM, orm_forward, spgrm_forward
from .objectives import (
    FeatureExtractor,
    LossReport,
    ObjectiveInputs,
    l1,
    mean_report,
    total_objective,
)
from .optim import Adam
from .raster import read_named, write_named
from .semantic import FpnParams, fpn_fuse, masks_from_labels, prior_features
from .skam import SkamStage

log = logging.getLogger(__name__)


def stream(seed: int, label: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``label`` at position ``keys``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode()), *map(int, keys)]))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
@dataclass
class Dataset:
    train: SceneSet
    test: SceneSet
    train_feats: List[np.ndarray]  # per level [S, C_i, h_i, w_i]
    test_feats: List[np.ndarray]


def scene_config(cfg: TrainConfig) -> SceneConfig:
    return SceneConfig(height=cfg.height, width=cfg.width, n_frames=cfg.n_frames,
                       noise_sigma=cfg.noise_sigma, max_shift=cfg.max_shift)


def split_seeds(cfg: TrainConfig, split: str, n: int) -> List[int]:
    ss = np.random.SeedSequence([cfg.data_seed, cfg.seed, zlib.crc32(split.encode())])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


def _stack_features(sset: SceneSet, cfg: TrainConfig) -> List[np.ndarray]:
    per_scene = [prior_features(rgb, mu=cfg.mu) for rgb in sset.gt_rgb]
    return [np.stack([f[i] for f in per_scene]) for i in range(4)]


_DATA_CACHE: Dict[tuple, Dataset] = {}


def build_dataset(cfg: TrainConfig) -> Dataset:
    key = (cfg.seed, cfg.data_seed, cfg.height, cfg.width, cfg.n_frames, cfg.format, cfg.bayer_pattern,
           cfg.n_train, cfg.n_test, cfg.noise_sigma, cfg.max_shift, cfg.mu)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    scfg = scene_config(cfg)
    train = build_split(scfg, split_seeds(cfg, "train", cfg.n_train), cfg.format, cfg.bayer_pattern)
    test = build_split(scfg, split_seeds(cfg, "test", cfg.n_test), cfg.format, cfg.bayer_pattern)
    ds = Dataset(train, test, _stack_features(train, cfg), _stack_features(test, cfg))
    if len(_DATA_CACHE) >= 2:
        _DATA_CACHE.pop(next(iter(_DATA_CACHE)))
    _DATA_CACHE[key] = ds
    return ds


def batches(n: int, batch_size: int, order: np.ndarray) -> List[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# models per arm
# ---------------------------------------------------------------------------
class Arm:
    """Parameter groups and optimisers of one training arm."""

    def __init__(self, name: str, cfg: TrainConfig):
        self.name = name
        self.orm = ORM(cfg.n_frames, cfg.channels, cfg.orm_width, cfg.space_to_depth, stream(cfg.seed, "init.orm"))
        self.opt_orm = self._adam(cfg, self.orm.parameters())
        self.spgrm = self.fpn = None
        self.stages: List[SkamStage] = []
        if name == "distilled":
            self.spgrm = SPGRM(3, cfg.spgrm_width, cfg.space_to_depth, stream(cfg.seed, "init.spgrm"))
            self.fpn = FpnParams(inner=cfg.fpn_inner, c_out=cfg.spgrm_width, rng=stream(cfg.seed, "init.fpn"))
            rng = stream(cfg.seed, "init.skam")
            self.stages = [SkamStage(cfg.orm_width, cfg.spgrm_width, cfg.skam_latent, rng)
                           for _ in range(cfg.skam_stages)]
            self.opt_teacher = self._adam(cfg, self.spgrm.parameters() + self.fpn.parameters())
            self.opt_skam = self._adam(cfg, [p for s in self.stages for p in s.parameters()])
        self.history: List[dict] = []
        self.epoch = 0

    @staticmethod
    def _adam(cfg, params):
        return Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)

    @property
    def distilled(self) -> bool:
        return self.spgrm is not None

    def optimizers(self) -> Dict[str, Adam]:
        if not self.distilled:
            return {"orm": self.opt_orm}
        return {"orm": self.opt_orm, "teacher": self.opt_teacher, "skam": self.opt_skam}

    def student_params(self) -> list:
        return self.orm.parameters()

    def teacher_params(self) -> list:
        return self.spgrm.parameters() + self.fpn.parameters() if self.distilled else []

    def zero_grad(self):
        for opt in self.optimizers().values():
            opt.zero_grad()

    def step(self):
        for opt in self.optimizers().values():
            opt.step()

    # -- checkpoints ------------------------------------------------------
    def tensors(self, cfg: TrainConfig) -> Dict[str, np.ndarray]:
        student = self.orm.state_dict()
        # the student header and weights lead the file so inference can stop
        # reading before any teacher or optimiser record
        out = {"meta.orm_shape": np.array([cfg.n_frames, cfg.channels, cfg.orm_width, cfg.space_to_depth], float),
               "meta.orm_count": np.array([float(len(student))])}
        out.update({f"orm.{k}": v for k, v in student.items()})
        out["meta.epoch"] = np.array([float(self.epoch)])
        if self.history:
            out["meta.history"] = np.array([[h[k] for k in _HISTORY_KEYS] for h in self.history])
        if self.distilled:
            out.update({f"spgrm.{k}": v for k, v in self.spgrm.state_dict().items()})
            out.update({f"fpn.{k}": v for k, v in self.fpn.state_dict().items()})
            for i, st in enumerate(self.stages):
                out.update({f"skam.{i}.{k}": v for k, v in st.state_dict().items()})
        for gname, opt in self.optimizers().items():
            out.update({f"adam.{gname}.{k}": v for k, v in opt.state_dict().items()})
        return out

    def restore(self, t: Dict[str, np.ndarray]):
        def section(prefix):
            return {k[len(prefix):]: v for k, v in t.items() if k.startswith(prefix)}

        self.orm.load_state_dict(section("orm."))
        if self.distilled:
            self.spgrm.load_state_dict(section("spgrm."))
            self.fpn.load_state_dict(section("fpn."))
            for i, st in enumerate(self.stages):
                st.load_state_dict(section(f"skam.{i}."))
        for gname, opt in self.optimizers().items():
            opt.load_state_dict(section(f"adam.{gname}."))
        self.epoch = int(t["meta.epoch"][0])
        hist = t.get("meta.history")
        self.history = [] if hist is None else [dict(zip(_HISTORY_KEYS, map(float, row))) for row in hist]


_HISTORY_KEYS = ("org", "spg", "content", "color", "feat", "total")


def checkpoint_path(out_dir, arm: str, epoch: Optional[int] = None) -> Path:
    name = f"{arm}_last.ckpt" if epoch is None else f"{arm}_epoch{epoch:03d}.ckpt"
    return Path(out_dir) / name


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------
class Toolkit:
    """Frozen helpers shared by every step of a run."""

    def __init__(self, cfg: TrainConfig):
        self.fx = FeatureExtractor()
        self.spec = cfg.hist_spec
        self.weights = cfg.weights
        self.tonemap = cfg.tonemap


def _batch(ds: Dataset, idx: np.ndarray, split: str = "train", K: int = 50):
    sset = ds.train if split == "train" else ds.test
    feats = ds.train_feats if split == "train" else ds.test_feats
    masks = np.stack([masks_from_labels(sset.labels[i], K) for i in idx])
    return sset.frames[idx], sset.gt[idx], masks, [f[idx] for f in feats]


def teacher_forward(arm: Arm, H_s: Tensor, feats, cfg: TrainConfig):
    r = cfg.space_to_depth
    p_f = fpn_fuse(feats, arm.fpn, (cfg.height // r, cfg.width // r))
    return spgrm_forward(H_s.detach(), p_f, arm.spgrm)


def _grad_max(params) -> float:
    return max((float(np.abs(p.grad).max()) for p in params if p.grad is not None), default=0.0)


@dataclass
class DetachmentCheck:
    teacher_grad_from_distill: float
    student_grad_from_spg: float

    @property
    def ok(self) -> bool:
        return self.teacher_grad_from_distill == 0.0 and self.student_grad_from_spg == 0.0


def distilled_step(arm: Arm, batch, times, cfg: TrainConfig, kit: Toolkit, rng, verify: bool = False):
    frames, gt, masks, feats = batch
    H_in, taps_s = orm_forward(frames, times, arm.orm)
    H_s = domain_transfer(H_in, kit.tonemap, cfg.format, cfg.bayer_pattern)
    H_hat, taps_t = teacher_forward(arm, H_s, feats, cfg)
    out = ObjectiveInputs(H_in, H_s, H_hat, gt, masks, taps_s, taps_t)
    total, spg, report, terms = total_objective(out, kit.weights, kit.fx, arm.stages, rng, kit.spec,
                                                kit.tonemap, cfg.format, cfg.restrict_to_mask,
                                                return_terms=True)
    check = None
    if verify:
        w = kit.weights
        distill = w.lambda1 * terms["content"] + w.lambda2 * terms["color"] + terms["feat"]
        arm.zero_grad()
        backward(distill, retain_graph=True)
        teacher_g = _grad_max(arm.teacher_params())
        arm.zero_grad()
        backward(spg, retain_graph=True)
        student_g = _grad_max(arm.student_params() + [p for s in arm.stages for p in s.parameters()])
        check = DetachmentCheck(teacher_g, student_g)
    arm.zero_grad()
    backward(total + spg)
    arm.step()
    return report, check


def baseline_step(arm: Arm, batch, times, cfg: TrainConfig, kit: Toolkit):
    frames, gt = batch[0], batch[1]
    H_in, _ = orm_forward(frames, times, arm.orm)
    H_s = domain_transfer(H_in, kit.tonemap, cfg.format, cfg.bayer_pattern)
    with no_grad():
        target = domain_transfer(gt, kit.tonemap, cfg.format, cfg.bayer_pattern)
    org = l1(H_s, target)
    arm.zero_grad()
    backward(org)
    arm.step()
    v = org.item()
    return LossReport(org=v, total=v), None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------
def to_linear_rgb(x: np.ndarray, fmt: str, pattern: str = "RGGB") -> np.ndarray:
    if fmt == RAW:
        return demosaic_bilinear(x, pattern).data
    return x


def evaluate_orm(orm: ORM, ds: Dataset, cfg: TrainConfig, prefix: str = "") -> List[MetricsRecord]:
    recs = []
    test = ds.test
    with no_grad():
        for idx in batches(len(test), cfg.batch_size, np.arange(len(test))):
            H_in, _ = orm_forward(test.frames[idx], test.exposure_times, orm)
            pred = to_linear_rgb(H_in.data, cfg.format, cfg.bayer_pattern)
            gt = to_linear_rgb(test.gt[idx], cfg.format, cfg.bayer_pattern)
            for j, i in enumerate(idx):
                recs.append(evaluate_pair(f"{prefix}{test.seeds[i]}", pred[j], gt[j], cfg.tonemap))
    return recs


def evaluate_teacher(arm: Arm, ds: Dataset, cfg: TrainConfig, prefix: str = "teacher/") -> List[MetricsRecord]:
    recs = []
    test = ds.test
    with no_grad():
        for idx in batches(len(test), cfg.batch_size, np.arange(len(test))):
            frames, gt, _, feats = _batch(ds, idx, "test", cfg.K)
            H_in, _ = orm_forward(frames, test.exposure_times, arm.orm)
            H_s = domain_transfer(H_in, cfg.tonemap, cfg.format, cfg.bayer_pattern)
            H_hat, _ = teacher_forward(arm, H_s, feats, cfg)
            pred = mu_law_inverse(H_hat.data, cfg.tonemap).data
            gt_lin = to_linear_rgb(gt, cfg.format, cfg.bayer_pattern)
            for j, i in enumerate(idx):
                recs.append(evaluate_pair(f"{prefix}{test.seeds[i]}", np.clip(pred[j], 0, 1), gt_lin[j],
                                          cfg.tonemap))
    return recs


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class RunReport:
    config: dict
    epochs: Dict[str, List[dict]]
    metrics: Dict[str, dict]
    detachment: Dict[str, dict] = field(default_factory=dict)
    # in-memory extras, not serialised
    step_log: Dict[str, List[LossReport]] = field(default_factory=dict, repr=False)
    checks: Dict[str, List[DetachmentCheck]] = field(default_factory=dict, repr=False)
    samples: List[MetricsRecord] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "epochs": self.epochs, "metrics": self.metrics,
                "detachment": self.detachment}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def psnr_mu(self, arm: str) -> float:
        return self.metrics[arm]["psnr_mu"]


def _metric_dict(rec: MetricsRecord) -> dict:
    d = asdict(rec)
    d.pop("sample_id")
    return d


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------
def train(cfg: TrainConfig, resume: bool = False, dataset: Optional[Dataset] = None) -> RunReport:
    """Train every configured arm and evaluate on the test split.

    With ``resume=True`` each arm continues from ``<out_dir>/<arm>_last.ckpt``.
    """
    cfg.validate()
    if resume and not cfg.out_dir:
        raise ConfigError("resume needs out_dir")
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    ds = dataset or build_dataset(cfg)
    kit = Toolkit(cfg)
    times = ds.train.exposure_times
    report = RunReport(config=_config_dict(cfg), epochs={}, metrics={})
    for name in cfg.arm_list():
        arm = Arm(name, cfg)
        if resume:
            path = checkpoint_path(out_dir, name)
            if not path.exists():
                raise CheckpointError(f"no checkpoint to resume from at {path}")
            arm.restore(read_named(path))
        steps, checks = [], []
        loss_file = open(out_dir / f"losses_{name}.jsonl", "a" if resume else "w") if out_dir else None
        try:
            for epoch in range(arm.epoch, cfg.epochs):
                order = stream(cfg.seed, "shuffle", epoch).permutation(len(ds.train))
                epoch_reports = []
                for step, idx in enumerate(batches(len(ds.train), cfg.batch_size, order)):
                    batch = _batch(ds, idx, "train", cfg.K)
                    if arm.distilled:
                        rng = stream(cfg.seed, "skam", epoch, step)
                        rep, chk = distilled_step(arm, batch, times, cfg, kit, rng, cfg.verify_detachment)
                    else:
                        rep, chk = baseline_step(arm, batch, times, cfg, kit)
                    rep.epoch, rep.step = epoch, step
                    epoch_reports.append(rep)
                    if chk is not None:
                        checks.append(chk)
                    if loss_file:
                        loss_file.write(rep.to_json() + "\n")
                steps.extend(epoch_reports)
                arm.history.append(mean_report(epoch_reports))
                arm.epoch = epoch + 1
                log.info("%s epoch %d: %s", name, epoch, arm.history[-1])
                if out_dir:
                    tensors = arm.tensors(cfg)
                    write_named(checkpoint_path(out_dir, name, epoch), tensors)
                    write_named(checkpoint_path(out_dir, name), tensors)
        finally:
            if loss_file:
                loss_file.close()
        report.epochs[name] = list(arm.history)
        report.step_log[name] = steps
        if checks:
            report.checks[name] = checks
            report.detachment[name] = {"steps_checked": len(checks),
                                       "violations": sum(not c.ok for c in checks)}
        recs = evaluate_orm(arm.orm, ds, cfg, prefix=f"{name}/")
        report.samples.extend(recs)
        report.metrics[name] = _metric_dict(mean_record(recs))
        if arm.distilled:
            trecs = evaluate_teacher(arm, ds, cfg)
            report.samples.extend(trecs)
            report.metrics["teacher"] = _metric_dict(mean_record(trecs))
    if out_dir:
        (out_dir / "report.json").write_text(report.to_json())
        write_csv(out_dir / "metrics.csv", report.samples)
    return report


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d.pop("out_dir")
    return d


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------
def load_student(ckpt) -> ORM:
    """Build the student from a checkpoint, reading only its own section."""
    def wanted(name):
        return name.startswith("orm.") or name in ("meta.orm_shape", "meta.orm_count")

    def complete(t):
        n = t.get("meta.orm_count")
        return n is not None and "meta.orm_shape" in t and len(t) == int(n[0]) + 2

    try:
        t = read_named(ckpt, select=wanted, stop=complete)
    except (OSError, FormatError) as exc:
        raise CheckpointError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    if "meta.orm_shape" not in t:
        raise CheckpointError("checkpoint lacks student metadata")
    if any(not (k.startswith("orm.") or k.startswith("meta.")) for k in t):
        raise CheckpointError("teacher tensors reached the inference path")
    t.pop("meta.orm_count", None)
    n, c, w, r = (int(v) for v in t.pop("meta.orm_shape"))
    orm = ORM(n, c, w, r)
    try:
        orm.load_state_dict({k[4:]: v for k, v in t.items()})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return orm


def infer(ckpt, frames, times, gt=None, fmt: Optional[str] = None, mu: float = 5000.0,
          pattern: str = "RGGB", orm: Optional[ORM] = None) -> Tuple[np.ndarray, Optional[MetricsRecord]]:
    """Run the student only; returns (H_in, metrics against ``gt`` if given)."""
    orm = orm or load_student(ckpt)
    with no_grad():
        H_in, _ = orm_forward(np.asarray(frames), np.asarray(times), orm)
    out = H_in.data
    rec = None
    if gt is not None:
        fmt = fmt or (RAW if orm.channels == 1 else None)
        single = out.ndim == 3
        pred = to_linear_rgb(out, fmt, pattern)
        ref = to_linear_rgb(np.asarray(gt), fmt, pattern)
        if single:
            rec = evaluate_pair("input", pred, ref, mu)
        else:
            rec = mean_record([evaluate_pair(i, a, b, mu) for i, (a, b) in enumerate(zip(pred, ref))])
    return out, rec


def infer_scene_file(ckpt, scene_file, mu: float = 5000.0, pattern: str = "RGGB"):
    scene, stack = load_scene(scene_file)
    orm = load_student(ckpt)
    frames = stack.frames
    gt = scene.hdr_gt
    fmt = None
    if orm.channels == 1:
        from .data import mosaic

        fmt = RAW
        if frames.shape[1] == 3:
            frames = mosaic(frames, pattern)
        gt = mosaic(gt, pattern)
    return infer(ckpt, frames, stack.exposure_times, gt, fmt, mu, pattern, orm=orm)
