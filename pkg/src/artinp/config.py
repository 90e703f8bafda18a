"""Pipeline configuration: defaults, presets, file/env overrides and the provenance hash."""
from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .gaps import MAX_WIDTH, MIN_WIDTH

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "ARTINP_"
PHASE_GEN, PHASE_DISC, PHASE_JOINT = 1, 2, 3
_UNHASHED = {"data_root", "out_root", "workers", "mode"}


@dataclass
class CompletionConfig:
    iters_phase1: int = 180_000
    iters_phase2: int = 20_000
    iters_phase3: int = 620_000
    alpha: float = 4e-4
    recon_loss: str = "mse"  # "mse" or "l1"
    lr: float = 1.0  # Adadelta
    batch_size: int = 1
    ckpt_every: int = 2000
    gen_base: int = 32
    disc_base: int = 64
    feature_dim: int = 1024
    dilations: tuple = (2, 4, 8, 16)
    frame_size: int = 160
    patch_size: int = 96
    min_width: int = MIN_WIDTH
    max_width: int = MAX_WIDTH
    seed: int = 0
    val_slices: int = 64
    log_every: int = 50

    @property
    def total_iters(self):
        return self.iters_phase1 + self.iters_phase2 + self.iters_phase3

    def phase_of(self, it: int) -> int:
        """Phase of 1-based iteration ``it``."""
        if it <= self.iters_phase1:
            return PHASE_GEN
        if it <= self.iters_phase1 + self.iters_phase2:
            return PHASE_DISC
        return PHASE_JOINT


@dataclass
class TranslationConfig:
    epochs: int = 60
    lr: float = 2e-4
    beta1: float = 0.5
    lam: float = 100.0
    batch_size: int = 1
    ckpt_every_epochs: int = 5
    num_downs: int = 8
    ngf: int = 64
    ndf: int = 64
    conditional: bool = True
    seed: int = 0
    val_slices: int = 64
    log_every: int = 100
    max_iters_per_epoch: int = 0  # 0 = full pass over the training slices


@dataclass
class GapConfig:
    min_width: int = 48
    max_width: int = 96
    test_seed: int = 1234


@dataclass
class MetricConfig:
    value_range: float = 4095.0
    i_max: float = 4095.0


@dataclass
class PipelineConfig:
    data_root: str = "data"
    out_root: str = "runs/artinp"
    seed: int = 7
    strict_spacing: bool = True
    sagittal_mode: str = "crop"
    frame_size: int = 160
    mode: str = "full"
    workers: int = 1
    blend_tol: float = 1e-6
    gap: GapConfig = field(default_factory=GapConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def out(self) -> Path:
        return Path(self.out_root)


def phantom_preset() -> PipelineConfig:
    """Desk-scale settings for 64^3 phantoms on a CPU."""
    cfg = PipelineConfig(sagittal_mode="resize")
    cfg.completion = CompletionConfig(iters_phase1=1500, iters_phase2=200, iters_phase3=1300,
                                      ckpt_every=500, gen_base=8, disc_base=8,
                                      val_slices=32, log_every=50)
    cfg.translation = TranslationConfig(epochs=2, num_downs=6, ngf=8, ndf=8,
                                        ckpt_every_epochs=1, val_slices=32, log_every=50)
    return cfg


def smoke_preset() -> PipelineConfig:
    """Tiny iteration counts for end-to-end plumbing checks."""
    cfg = phantom_preset()
    cfg.completion.iters_phase1, cfg.completion.iters_phase2, cfg.completion.iters_phase3 = 20, 6, 10
    cfg.completion.ckpt_every = 10
    cfg.completion.val_slices = 8
    cfg.translation.epochs = 1
    cfg.translation.max_iters_per_epoch = 20
    cfg.translation.val_slices = 8
    return cfg


PRESETS = {"clinical": PipelineConfig, "phantom": phantom_preset, "smoke": smoke_preset}


def _coerce(current, value):
    if isinstance(value, str):
        if isinstance(current, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            return value
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def apply_overrides(obj, overrides: dict, where="config"):
    names = {f.name for f in fields(obj)}
    for key, value in overrides.items():
        if key not in names:
            raise KeyError(f"unknown {where} key {key!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise TypeError(f"{where}.{key} must be a table")
            apply_overrides(current, value, f"{where}.{key}")
        else:
            setattr(obj, key, _coerce(current, value))
    return obj


def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)


def env_overrides(environ=None) -> dict:
    """``ARTINP_COMPLETION__ALPHA=1e-3`` -> ``{"completion": {"alpha": "1e-3"}}``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX) or key in ("ARTINP_PURE_PYTHON", "ARTINP_NO_EXT"):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def load_config(path=None, preset="clinical", overrides: dict | None = None, environ=None) -> PipelineConfig:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    if path:
        apply_overrides(cfg, read_config_file(path))
    apply_overrides(cfg, env_overrides(environ), "environment")
    if overrides:
        apply_overrides(cfg, overrides)
    if cfg.sagittal_mode not in ("crop", "resize"):
        raise ValueError(f"sagittal_mode must be 'crop' or 'resize', got {cfg.sagittal_mode!r}")
    if cfg.mode not in ("full", "no-completion"):
        raise ValueError(f"mode must be 'full' or 'no-completion', got {cfg.mode!r}")
    cfg.completion.frame_size = cfg.frame_size
    cfg.completion.min_width, cfg.completion.max_width = cfg.gap.min_width, cfg.gap.max_width
    return cfg
