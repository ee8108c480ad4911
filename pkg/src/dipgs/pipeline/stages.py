"""Coarse-to-fine orchestration of the full fit."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .. import diffkit as dk
from ..generator import GeneratorWeights, NoisePyramid, generate, grid_side, grid_to_gaussians, sample_noise
from ..losses import LossWeights
from ..render import render
from ..scene import Camera, GaussianSet, SceneBounds
from . import data as streams
from .config import Schedule, StageConfig
from .data import TrainingData, View, substream
from .dip import fit_means, fit_scales, optimize_dip
from .gaussians import TrainingDiverged, optimize_gaussians, prune, run_vanilla_gs

log = logging.getLogger(__name__)


def pseudo_probability(p: float) -> float:
    if p < 0:
        raise ValueError("dominance factor must be non-negative")
    return p / (1.0 + p)


def choose_pseudo(rng: np.random.Generator, p: float) -> bool:
    """True with probability ``p / (1 + p)``: supervise on a pseudo view this iteration."""
    return p > 0 and rng.random() < pseudo_probability(p)


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    omega = np.arccos(np.clip(a @ b, -1.0, 1.0))
    if omega < 1e-9:
        return a
    return (np.sin((1 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)


def pseudo_cameras(train: list[Camera], bounds: SceneBounds, count: int, rng: np.random.Generator,
                   jitter_deg: float = 5.0) -> list[Camera]:
    """Poses slerped between consecutive training cameras plus a small orbit jitter."""
    out = []
    offsets = [c.center - bounds.center for c in train]
    for i in range(count):
        a = offsets[i % len(offsets)]
        b = offsets[(i + 1) % len(offsets)]
        t = rng.uniform(0.25, 0.75)
        radius = (1 - t) * np.linalg.norm(a) + t * np.linalg.norm(b)
        direction = _slerp(a, b, t)
        az, el = np.radians(rng.uniform(-jitter_deg, jitter_deg, size=2))
        x, y, zc = direction
        theta = np.arctan2(y, x) + az
        phi = np.clip(np.arcsin(np.clip(zc, -1, 1)) + el, -1.4, 1.4)
        direction = np.array([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)])
        tmpl = train[i % len(train)]
        cam = Camera.look_at(bounds.center + radius * direction, bounds.center,
                             width=tmpl.width, height=tmpl.height, near=tmpl.near)
        out.append(replace(cam, fx=tmpl.fx, fy=tmpl.fy, cx=tmpl.cx, cy=tmpl.cy))
    return out


def postprocess_gs(initial: GaussianSet, data: TrainingData, pseudo: list[Camera], p: float,
                   config: StageConfig, rng: np.random.Generator,
                   history: list | None = None) -> GaussianSet:
    """Plain Gaussian optimisation mixing training views with frozen pseudo views."""
    with dk.no_grad():
        pseudo_views = [View(c, render(initial, c, data.background).pixels.copy()) for c in pseudo]

    def sample(_it):
        pool = pseudo_views if (pseudo_views and choose_pseudo(rng, p)) else data.views
        v = pool[int(rng.integers(len(pool)))]
        return v.camera, v.image

    weights = LossWeights(config.beta_post, config.gamma_post, config.delta_post,
                          config.d_min or data.default_d_min(), config.lambda_ssim)
    return optimize_gaussians(initial, sample, config.iters_post, weights, data.cameras, config, rng,
                              data.background, data.bounds.extent, history=history, label="post")


@dataclass(eq=False)
class StageResult:
    index: int
    sigma: float
    grid_side: int
    count_in: int
    dip_gaussians: GaussianSet
    gaussians: GaussianSet
    weights: GeneratorWeights
    losses: dict[str, list[float]] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def record(self) -> dict:
        return {
            "stage": self.index,
            "sigma": self.sigma,
            "grid_side": self.grid_side,
            "gaussians_in": self.count_in,
            "gaussians_dip": len(self.dip_gaussians),
            "gaussians": len(self.gaussians),
            "losses": self.losses,
            "metrics": self.metrics,
        }


@dataclass(eq=False)
class FitResult:
    initial: GaussianSet
    stages: list[StageResult]
    init_losses: list[float]

    @property
    def final(self) -> GaussianSet:
        return self.stages[-1].gaussians if self.stages else self.initial


def run_stage(index: int, sigma: float, current: GaussianSet, data: TrainingData, config: StageConfig,
              seed: int) -> StageResult:
    """Mean fit, scale fit, rendering fit, then post-processing for one noise level."""
    start = time.perf_counter()
    current = prune(current, config.prune_opacity)
    if len(current) < 2:
        raise ValueError(f"stage {index}: fewer than two Gaussians survive pruning")
    if config.pseudo_from_test_poses and not data.target_poses:
        raise ValueError("pseudo_from_test_poses needs target poses in the training data")
    n = grid_side(len(current), config.grid_ratio)
    noise_key = index if config.fresh_noise_per_stage else 0
    z = sample_noise(int(substream(seed, streams.STREAM_NOISE, noise_key).integers(2 ** 63)), n)
    theta = GeneratorWeights.initialize(substream(seed, streams.STREAM_WEIGHTS, index))
    losses: dict[str, list[float]] = {"chamfer": [], "scale": [], "dip": [], "post": []}
    if config.init_means:
        fit_means(theta, z, current.means, data.bounds, config, sigma,
                  substream(seed, streams.STREAM_CD, index), losses["chamfer"])
    if config.init_scales:
        fit_scales(theta, z, data.bounds, config, sigma,
                   substream(seed, streams.STREAM_SCALE, index), losses["scale"])
    weights = LossWeights(config.beta, config.gamma, config.delta,
                          config.d_min or data.default_d_min(), config.lambda_ssim)
    optimize_dip(theta, z, data, sigma, weights, config, substream(seed, streams.STREAM_DIP, index),
                 history=losses["dip"])
    with dk.no_grad():
        dip_set = grid_to_gaussians(generate(theta, z, data.bounds, config.s_unit)).numpy()
    if config.pseudo_from_test_poses:
        pseudo = list(data.target_poses)
    else:
        pseudo = pseudo_cameras(data.cameras, data.bounds, config.pseudo_views_per_train * len(data.views),
                                substream(seed, streams.STREAM_PSEUDO, index), config.pseudo_jitter_deg)
    post = postprocess_gs(dip_set, data, pseudo, config.dominance, config,
                          substream(seed, streams.STREAM_POST, index), losses["post"])
    return StageResult(index, sigma, n, len(current), dip_set, post, theta, losses,
                       seconds=time.perf_counter() - start)


def run_coarse_to_fine(data: TrainingData, schedule: Schedule, config: StageConfig, seed: int,
                       initial: GaussianSet | None = None,
                       on_stage: Callable[[StageResult], None] | None = None,
                       on_initial: Callable[[GaussianSet, list[float]], None] | None = None,
                       evaluator: Callable[[GaussianSet], dict] | None = None) -> FitResult:
    """Initial estimate followed by one DIP + post-process stage per noise level."""
    if not isinstance(schedule, Schedule):
        schedule = Schedule(tuple(schedule))
    init_losses: list[float] = []
    if initial is None:
        try:
            initial = run_vanilla_gs(data, config, substream(seed, streams.STREAM_INIT), history=init_losses)
        except (TrainingDiverged, dk.NonFiniteError) as exc:
            raise TrainingDiverged(f"stage 0: {exc}") from exc
    if on_initial is not None:
        on_initial(initial, init_losses)
    current = initial
    stages = []
    for k, sigma in enumerate(schedule.sigmas, start=1):
        log.info("stage %d: sigma=%g, %d gaussians in", k, sigma, len(current))
        try:
            result = run_stage(k, sigma, current, data, config, seed)
        except (TrainingDiverged, dk.NonFiniteError) as exc:
            raise TrainingDiverged(f"stage {k}: {exc}") from exc
        if evaluator is not None:
            result.metrics = evaluator(result.gaussians)
        if on_stage is not None:
            on_stage(result)
        stages.append(result)
        current = result.gaussians
    return FitResult(initial, stages, init_losses)


def total_iterations(config: StageConfig, stages: int) -> int:
    per_stage = config.iters_post + config.iters_dip
    per_stage += config.iters_cd if config.init_means else 0
    per_stage += config.iters_scale if config.init_scales else 0
    return config.iters_init + stages * per_stage
