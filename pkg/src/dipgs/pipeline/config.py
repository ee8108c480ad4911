"""Hyperparameters for the staged fit, with per-dataset presets."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

DEFAULT_SIGMAS = (0.0333, 0.01, 0.005, 0.002)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        if not sig:
            raise ConfigError("schedule needs at least one stage")
        if any(s < 0 for s in sig):
            raise ConfigError("noise levels must be non-negative")
        if any(b > a for a, b in zip(sig, sig[1:])):
            raise ConfigError(f"noise levels must be non-increasing, got {list(sig)}")

    def __len__(self) -> int:
        return len(self.sigmas)


@dataclass(frozen=True)
class StageConfig:
    # iteration counts
    iters_init: int = 3000
    iters_cd: int = 3000
    iters_scale: int = 3000
    iters_dip: int = 4000
    iters_post: int = 2000
    # generator optimisation
    lr_mu: float = 2e-4
    lr_other: float = 1e-3
    lr_cd: float = 5e-3
    lr_scale_fit: float = 1e-3
    weight_decay: float = 1e-5
    # plain Gaussian optimisation (initial estimate and post-processing)
    lr_means: float = 1e-3
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-2
    lr_sh: float = 5e-3
    init_count: int = 1000
    init_opacity: float = 0.1
    # regularisation weights: initial estimate, DIP fit, post-processing
    beta_init: float = 0.1
    gamma_init: float = 0.0
    delta_init: float = 0.0
    beta: float = 0.02
    gamma: float = 0.0
    delta: float = 0.0
    beta_post: float = 0.05
    gamma_post: float = 0.0
    delta_post: float = 0.0
    lambda_ssim: float = 0.2
    d_min: float | None = None  # None: 0.2 x median camera distance to the scene centre
    # post-processing
    dominance: float = 0.1
    pseudo_views_per_train: int = 2
    pseudo_jitter_deg: float = 5.0
    pseudo_from_test_poses: bool = False  # post-process on renders at data.target_poses
    # grid sizing and pruning
    grid_ratio: float = 0.75
    prune_opacity: float = 0.005
    # densification
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: float = 0.5  # fraction of the run
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    max_gaussians: int = 4000
    # ablation / variant switches
    init_means: bool = True
    init_scales: bool = True
    fresh_noise_per_stage: bool = False
    s_unit: float = 1.0

    def __post_init__(self):
        for name in ("iters_init", "iters_cd", "iters_scale", "iters_dip", "iters_post"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive")
        if self.dominance < 0:
            raise ConfigError("dominance factor must be non-negative")
        if not 0 < self.grid_ratio <= 1:
            raise ConfigError("grid_ratio must lie in (0, 1]")
        for name in ("beta_init", "gamma_init", "delta_init", "beta", "gamma", "delta",
                     "beta_post", "gamma_post", "delta_post", "lambda_ssim", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.d_min is not None and self.d_min <= 0:
            raise ConfigError("d_min must be positive")
        if self.init_count < 2:
            raise ConfigError("init_count must be at least 2")

    def with_(self, **changes) -> "StageConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


# per-dataset regularisation weights
PRESETS: dict[str, dict] = {
    "blender": dict(beta_init=0.05, gamma_init=0.0, delta_init=0.0,
                    beta=0.02, gamma=0.0, delta=0.0,
                    beta_post=0.02, gamma_post=0.0, delta_post=0.0),
    "llff": dict(beta_init=0.1, gamma_init=0.0, delta_init=0.0,
                 beta=0.02, gamma=0.0, delta=0.0,
                 beta_post=0.05, gamma_post=0.0, delta_post=0.0),
    "dtu": dict(beta_init=0.1, gamma_init=0.1, delta_init=20.0,
                beta=0.02, gamma=0.01, delta=20.0,
                beta_post=0.05, gamma_post=0.01, delta_post=20.0),
}
PRESETS["synthetic"] = dict(PRESETS["llff"])


def preset(name: str, **overrides) -> StageConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return StageConfig(**{**base, **overrides})
