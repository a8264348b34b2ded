"""Declarative run configuration (``key = value`` text files)."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataio import PhantomConfig
from .metrics import SWDConfig
from .nets import StagePlan
from .objectives import GradientPenaltyConfig
from .trainer import LossConfig, StageSchedule, TrainSchedule


class ConfigError(ValueError):
    pass


def _ints(v) -> list[int]:
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(" ", "").split(",") if x]


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    # data source (exactly one)
    phantom_count: int | None = None
    data_dir: str | None = None
    phantom_height: int = 64
    phantom_width: int = 64
    phantom_seed: int | None = None
    texture_strength: float = 0.25
    p_calcification: float = 0.2
    p_marker: float = 0.1
    pectoral_intensity: float = 0.35
    p_mlo: float = 0.5
    target_h: int | None = None
    target_w: int | None = None
    square: int | None = None
    # network
    base_h: int = 8
    base_w: int = 8
    channels: list[int] = field(default_factory=lambda: [128, 128, 64, 32])
    latent_dim: int = 128
    mbstd: bool = True
    # schedule
    images_stable: list[int] = field(default_factory=lambda: [20000])
    images_fade: list[int] = field(default_factory=lambda: [20000])
    batch_sizes: list[int] = field(default_factory=lambda: [16, 16, 8, 4])
    learning_rate: float = 0.0015
    n_critic: list[int] = field(default_factory=lambda: [1, 1, 3, 5])
    total_images_target: int | None = None
    log_interval: int = 1000
    sample_interval: int = 10000
    checkpoint_interval: int = 10000
    # losses
    gp_lambda: float = 10.0
    gp_beta: float = 1.0
    label_weight: float = 1.0
    drift: float = 0.001
    latent_prior: str = "normal"
    # metrics / selection
    swd_patch: int = 7
    swd_patches_per_image: int = 128
    swd_projections: int = 512
    swd_min_resolution: int = 16
    eval_count: int = 256
    select_best: bool = True
    # run
    seed: int = 0
    out: str = "runs/default"

    _LISTS = ("channels", "images_stable", "images_fade", "batch_sizes", "n_critic")

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(cls(), key)
            try:
                if key in cls._LISTS:
                    kw[key] = _ints(raw)
                elif isinstance(default, bool):
                    kw[key] = _bool(raw)
                elif key in ("phantom_count", "phantom_seed", "target_h", "target_w", "square", "total_images_target"):
                    kw[key] = None if str(raw).lower() in ("", "none") else int(raw)
                elif isinstance(default, int):
                    kw[key] = int(raw)
                elif isinstance(default, float):
                    kw[key] = float(raw)
                else:
                    kw[key] = None if str(raw).lower() == "none" else str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def validate(self) -> None:
        if (self.phantom_count is None) == (self.data_dir is None):
            raise ConfigError("exactly one data source required: phantom_count or data_dir")
        if self.phantom_count is not None and self.phantom_count <= 0:
            raise ConfigError("phantom_count must be positive")
        n = len(self.channels)
        for name in ("images_stable", "images_fade", "batch_sizes", "n_critic"):
            v = getattr(self, name)
            if len(v) not in (1, n):
                raise ConfigError(f"{name} needs 1 or {n} entries")
        try:
            self.plan()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def _per_stage(self, name: str) -> list[int]:
        v = getattr(self, name)
        return v * len(self.channels) if len(v) == 1 else list(v)

    def plan(self) -> StagePlan:
        return StagePlan.build((self.base_h, self.base_w), self.channels, self.latent_dim)

    def schedule(self) -> TrainSchedule:
        stable, fade, bs = self._per_stage("images_stable"), self._per_stage("images_fade"), self._per_stage("batch_sizes")
        ramp = list(enumerate(self._per_stage("n_critic")))
        return TrainSchedule([StageSchedule(s, f, b) for s, f, b in zip(stable, fade, bs)],
                             learning_rate=self.learning_rate, n_critic_ramp=ramp,
                             total_images_target=self.total_images_target, seed=self.seed,
                             log_interval=self.log_interval, sample_interval=self.sample_interval,
                             checkpoint_interval=self.checkpoint_interval)

    def losses(self) -> LossConfig:
        return LossConfig(GradientPenaltyConfig(self.gp_lambda, self.gp_beta), self.label_weight,
                          self.drift, self.latent_prior)

    def phantom(self) -> PhantomConfig:
        seed = self.seed if self.phantom_seed is None else self.phantom_seed
        return PhantomConfig(self.phantom_height, self.phantom_width, seed, self.texture_strength,
                             self.p_calcification, self.p_marker, self.pectoral_intensity, self.p_mlo)

    def swd(self) -> SWDConfig:
        return SWDConfig(self.swd_patch, self.swd_patches_per_image, self.swd_projections,
                         min_resolution=self.swd_min_resolution)
