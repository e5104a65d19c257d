"""Training configuration and its flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Tuple

from .domain import RAW, SRGB, TonemapParams
from .errors import ConfigError
from .histogram import HistogramSpec
from .objectives import LossWeights

_FORMATS = {"srgb": SRGB, SRGB.lower(): SRGB, "raw": RAW, RAW.lower(): RAW}


@dataclass
class TrainConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_frames: int = 3
    format: str = SRGB
    bayer_pattern: str = "RGGB"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_perc: float = 1e-2
    lambda1: float = 1e-3
    lambda2: float = 100.0
    hist_bins: int = 256
    hist_min: float = 0.0
    hist_max: float = 255.0
    hist_sigma: float = 400.0
    restrict_to_mask: bool = True
    mu: float = 5000.0
    K: int = 50
    skam_stages: int = 3
    skam_latent: int = 16
    orm_width: int = 32
    spgrm_width: int = 32
    fpn_inner: int = 16
    space_to_depth: int = 4
    n_train: int = 200
    n_test: int = 50
    data_seed: int = 1000
    noise_sigma: float = 0.01
    max_shift: int = 2
    arms: str = "baseline,distilled"
    verify_detachment: bool = False
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        fmt = _FORMATS.get(str(self.format).lower())
        if fmt is None:
            raise ConfigError(f"format must be sRGB or RAW, got {self.format!r}")
        self.format = fmt
        checks = [
            (self.height > 0 and self.width > 0, "image size must be positive"),
            (self.height % (2 * self.space_to_depth) == 0 and self.width % (2 * self.space_to_depth) == 0,
             "image size must be divisible by 2 * space_to_depth"),
            (self.height % 16 == 0 and self.width % 16 == 0, "image size must be divisible by 16"),
            (self.n_frames >= 2, "need at least two frames"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0,1)"),
            (min(self.lambda_perc, self.lambda1, self.lambda2) >= 0, "loss weights must be non-negative"),
            (self.mu > 0, "mu must be positive"),
            (self.K >= 1, "K must be >= 1"),
            (self.skam_stages == 3, "the student exposes exactly three taps"),
            (self.n_train >= 1 and self.n_test >= 1, "dataset sizes must be positive"),
            (self.hist_bins >= 2 and self.hist_max > self.hist_min and self.hist_sigma > 0,
             "invalid histogram settings"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        arms = self.arm_list()
        if not arms or any(a not in ("baseline", "distilled") for a in arms):
            raise ConfigError(f"arms must be drawn from baseline,distilled; got {self.arms!r}")

    # -- derived records ---------------------------------------------------
    def arm_list(self) -> Tuple[str, ...]:
        return tuple(a.strip() for a in self.arms.split(",") if a.strip())

    @property
    def channels(self) -> int:
        return 1 if self.format == RAW else 3

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_perc, self.lambda1, self.lambda2)

    @property
    def hist_spec(self) -> HistogramSpec:
        return HistogramSpec(self.hist_bins, self.hist_min, self.hist_max, self.hist_sigma)

    @property
    def tonemap(self) -> TonemapParams:
        return TonemapParams(self.mu)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    # -- text form ---------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kw[key] = _parse(value, types[key], key)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from exc
    return value
