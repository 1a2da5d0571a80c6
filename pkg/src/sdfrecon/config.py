"""Flat run configuration: defaults, key=value config files, CLI overrides.

Every hyperparameter of the pipeline lives here so runs can be echoed and
reproduced. Unknown keys or unparsable values are configuration errors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict

from .fields import FieldConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"   # compute dtype for training; tests use float64

    # fields
    geo_width: int = 128
    geo_depth: int = 4
    feature_width: int = 64
    color_width: int = 128
    color_depth: int = 2
    enc_levels_pos: int = 6
    enc_levels_dir: int = 4
    r_init: float = 0.6
    activation_sharpness: float = 100.0
    beta_init: float = 0.1
    color_decomposition: bool = True

    # renderer
    n_coarse: int = 32
    n_fine: int = 32
    ray_near: float = 1e-3

    # consistency
    rho: float = 0.25
    gc_live_grad: bool = True

    # masks
    epsilon: float = 0.95

    # losses
    w_rgb: float = 1.0
    w_normal: float = 0.05
    w_gc: float = 0.1
    w_pc: float = 0.1
    w_eik: float = 0.1
    eik_probes: int = 128

    # schedule / optimizer
    iters_stage1: int = 2000
    iters_gc_only: int = 6000
    iters_total: int = 15000
    batch_rays: int = 96
    lr: float = 5e-4
    lr_min: float = 5e-5
    snapshot_every: int = 250
    log_every: int = 1

    # ablation switches
    normal_only: bool = False
    disable_mask: bool = False
    disable_gc: bool = False
    disable_pc: bool = False

    # extraction
    grid_res: int = 128

    # evaluation
    eval_samples: int = 20000
    tau: float = 0.05

    # synthesis
    preset: str = "box-room"
    views: int = 48
    resolution: int = 96
    corruption_p: float = 0.0
    corruption_deg: float = 30.0
    specular: float = 0.0

    def field_config(self):
        return FieldConfig(
            geo_width=self.geo_width,
            geo_depth=self.geo_depth,
            feature_width=self.feature_width,
            color_width=self.color_width,
            color_depth=self.color_depth,
            enc_levels_pos=self.enc_levels_pos,
            enc_levels_dir=self.enc_levels_dir,
            r_init=self.r_init,
            softplus_sharpness=self.activation_sharpness,
            beta_init=self.beta_init,
            color_decomposition=self.color_decomposition,
        )

    def loss_weights(self):
        return LossWeights(rgb=self.w_rgb, normal=self.w_normal, gc=self.w_gc,
                           pc=self.w_pc, eik=self.w_eik)

    def validate(self):
        if not (self.iters_stage1 < self.iters_gc_only <= self.iters_total):
            raise ConfigError(
                "schedule requires iters_stage1 < iters_gc_only <= iters_total, "
                f"got {self.iters_stage1}/{self.iters_gc_only}/{self.iters_total}")
        if self.batch_rays < 1:
            raise ConfigError("batch_rays must be positive")
        if self.n_coarse < 2:
            raise ConfigError("n_coarse must be at least 2")
        if not 0.0 <= self.corruption_p <= 1.0:
            raise ConfigError("corruption_p must lie in [0, 1]")
        if self.rho < 0:
            raise ConfigError("rho must be nonnegative")
        if self.grid_res < 8:
            raise ConfigError("grid_res must be at least 8")
        try:
            self.loss_weights().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key, raw):
    ftype = _TYPES[key]
    raw = raw.strip()
    try:
        if ftype == "bool" or ftype is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "int" or ftype is int:
            return int(raw)
        if ftype == "float" or ftype is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key}: {e}") from None


def apply_overrides(cfg: RunConfig, pairs):
    """Apply key=value overrides in order; unknown keys are errors."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config_file(path, cfg=None):
    """key = value lines; # starts a comment; blank lines ignored."""
    cfg = cfg or RunConfig()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in _TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _parse_value(key, raw))
    return cfg


def config_text(cfg: RunConfig):
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def full_scale(cfg: RunConfig = None):
    """Paper-scale preset: larger nets, denser sampling, long schedule."""
    cfg = cfg or RunConfig()
    cfg.geo_width, cfg.geo_depth, cfg.feature_width = 256, 8, 256
    cfg.color_width, cfg.color_depth = 256, 4
    cfg.n_coarse = cfg.n_fine = 64
    cfg.batch_rays = 1024
    cfg.iters_stage1, cfg.iters_gc_only, cfg.iters_total = 25000, 75000, 200000
    cfg.grid_res = 512
    cfg.eval_samples = 100000
    return cfg
