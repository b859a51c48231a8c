"""Experiment configuration: nested dataclasses, JSON (de)serialisation and presets.

A config file is a JSON object whose keys mirror :class:`ExperimentConfig`.
It may name a ``"preset"`` to start from; every other key overrides that
preset section by section. See ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dsp import CLASSES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    classes: tuple[str, ...] = CLASSES
    clips_per_class: int = 200
    mixtures_per_source: int = 2
    clip_seconds: float = 1.0
    snr_range: tuple[float, float] = (-15.0, 15.0)
    lufs_range: tuple[float, float] = (-35.0, -25.0)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class DSPConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 160
    n_mels: int = 64
    griffin_lim_iters: int = 32


@dataclass(frozen=True)
class VAETrainConfig:
    widths: tuple[int, int] = (32, 64)
    latent_channels: int = 4
    steps: int = 20000
    batch: int = 8
    lr: float = 1e-3
    beta: float = 1e-3


@dataclass(frozen=True)
class FlowTrainConfig:
    widths: tuple[int, int, int] = (32, 64, 128)
    steps: int = 50000
    batch: int = 8
    lr: float = 5e-4
    sigma_min: float = 1e-5
    grad_clip: float = 1.0
    sample_steps: int = 10
    method: str = "euler"


@dataclass(frozen=True)
class DiffusionTrainConfig:
    widths: tuple[int, int, int] = (32, 64, 128)
    steps: int = 50000
    batch: int = 8
    lr: float = 5e-4
    grad_clip: float = 1.0
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class ClassifierConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    max_items: int = 0
    flow_steps: tuple[int, ...] = (1, 2, 5, 10, 25, 50, 100, 200)
    diffusion_steps: tuple[int, ...] = (10, 25, 50, 100, 200)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    preset: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    dsp: DSPConfig = field(default_factory=DSPConfig)
    vae: VAETrainConfig = field(default_factory=VAETrainConfig)
    flow: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    diffusion: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        validate(self)

    @property
    def frames(self) -> int:
        return int(round(self.data.clip_seconds * self.dsp.sample_rate)) // self.dsp.hop

    @property
    def clip_samples(self) -> int:
        return int(round(self.data.clip_seconds * self.dsp.sample_rate))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if len(d.classes) < 2:
        raise ConfigError("need at least 2 source classes")
    unknown = [c for c in d.classes if c not in CLASSES]
    if unknown:
        raise ConfigError(f"unknown source classes {unknown}; available: {list(CLASSES)}")
    lo, hi = d.snr_range
    if not -60 <= lo <= hi <= 60:
        raise ConfigError(f"snr_range {d.snr_range} must be ordered and within [-60, 60] dB")
    if not d.lufs_range[0] <= d.lufs_range[1] < 0:
        raise ConfigError(f"lufs_range {d.lufs_range} must be ordered and negative")
    if len(d.split_fractions) != 3 or abs(sum(d.split_fractions) - 1.0) > 1e-9 or min(d.split_fractions) <= 0:
        raise ConfigError("split_fractions must be three positive numbers summing to 1")
    if d.clips_per_class < 3 or d.mixtures_per_source < 1:
        raise ConfigError("clips_per_class must be >= 3 and mixtures_per_source >= 1")
    if cfg.frames % 4 or cfg.dsp.n_mels % 4:
        raise ConfigError(f"frame count {cfg.frames} and n_mels {cfg.dsp.n_mels} must be divisible by 4")
    if cfg.dsp.hop <= 0 or cfg.dsp.n_fft < cfg.dsp.hop:
        raise ConfigError("need 0 < hop <= n_fft")
    if not 0 <= cfg.flow.sigma_min < 1:
        raise ConfigError("flow.sigma_min must lie in [0, 1)")
    if cfg.flow.method not in ("euler", "midpoint"):
        raise ConfigError(f"unknown ODE method {cfg.flow.method!r}")
    for name in ("vae", "flow", "diffusion", "classifier"):
        sec = getattr(cfg, name)
        if sec.steps < 0 or sec.batch < 1 or sec.lr < 0:
            raise ConfigError(f"{name}: steps >= 0, batch >= 1 and lr >= 0 required")
    if min(cfg.eval.flow_steps, default=1) < 1:
        raise ConfigError("flow sampler step counts must be >= 1")
    if not all(1 <= n <= cfg.diffusion.diffusion_steps for n in cfg.eval.diffusion_steps):
        raise ConfigError("DDIM step counts must lie in [1, diffusion_steps]")
    if cfg.eval.split not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {cfg.eval.split!r}")


def _build(base, data: dict) -> dict:
    """Keyword overrides for dataclass ``base`` from plain JSON data."""
    cls = type(base)
    known = {f.name for f in fields(cls)}
    extra = set(data) - set(known)
    if extra:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(extra)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(base, name)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be a JSON object")
            kwargs[name] = _merge(default, value)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{cls.__name__}.{name} must be a JSON list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return kwargs


def _merge(base, overrides: dict):
    try:
        return replace(base, **_build(base, overrides))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


PRESETS: dict[str, dict] = {
    # documented defaults: 1 s clips, 6 classes, 2.4k mixtures, 50k flow steps
    "desk": {},
    # long clips and the full-scale schedule; a config preset only, far beyond a CPU budget
    "full": {
        "data": {"clip_seconds": 10.0},
        "vae": {"steps": 1000000},
        "flow": {"steps": 1000000, "lr": 5e-5},
        "diffusion": {"steps": 1000000, "lr": 5e-5},
    },
    # reduced schedule sized for the automated acceptance run on a single CPU core
    "ci": {
        "data": {"clips_per_class": 100, "mixtures_per_source": 2},
        "vae": {"widths": [16, 32], "steps": 3000, "batch": 8, "lr": 2e-3},
        "flow": {"widths": [32, 64, 128], "steps": 6000, "batch": 8, "lr": 1e-3},
        "diffusion": {"widths": [32, 64, 128], "steps": 6000, "batch": 8, "lr": 1e-3},
        "classifier": {"steps": 1500},
        "eval": {"max_items": 60},
    },
    # smallest end-to-end run, for smoke and reproducibility checks
    "tiny": {
        "data": {"clips_per_class": 6, "mixtures_per_source": 1},
        "vae": {"widths": [8, 16], "steps": 20, "batch": 4},
        "flow": {"widths": [8, 16, 32], "steps": 20, "batch": 4},
        "diffusion": {"widths": [8, 16, 32], "steps": 20, "batch": 4},
        "classifier": {"steps": 20, "batch": 8},
        "eval": {"max_items": 6, "flow_steps": [1, 2, 5], "diffusion_steps": [2, 5]},
    },
}


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    preset = data.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = ExperimentConfig(preset=preset)
    base = _merge(base, PRESETS[preset])
    return _merge(base, data)


def preset(name: str, **overrides) -> ExperimentConfig:
    return from_dict({"preset": name, **overrides})


def load(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return from_dict(data)
