"""Direct optimisation of Gaussian sets: the initial estimate and the post-process."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import diffkit as dk
from ..diffkit import Tensor
from ..losses import LossWeights, occlusion_reg, opacity_reg, photometric, scale_reg
from ..render import render
from ..scene import Camera, GaussianSet, color_to_sh, knn_mean_distance, quaternion_to_rotation
from .config import StageConfig
from .data import TrainingData
from .optim import Adam

log = logging.getLogger(__name__)

OPACITY_EPS = 1e-6


class TrainingDiverged(FloatingPointError):
    pass


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, OPACITY_EPS, 1.0 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


@dataclass(eq=False)
class GaussianParams:
    """Unconstrained parameters: log-scales and opacity logits."""

    means: Tensor
    log_scales: Tensor
    rotations: Tensor
    logits: Tensor
    sh: Tensor

    @classmethod
    def from_set(cls, g: GaussianSet) -> "GaussianParams":
        g = g.numpy()
        return cls(Tensor(g.means, True), Tensor(np.log(g.scales), True), Tensor(g.rotations, True),
                   Tensor(_logit(g.opacities), True), Tensor(g.sh, True))

    def tensors(self) -> list[Tensor]:
        return [self.means, self.log_scales, self.rotations, self.logits, self.sh]

    def to_set(self) -> GaussianSet:
        return GaussianSet(self.means, dk.safe_exp(self.log_scales), self.rotations,
                           dk.sigmoid(self.logits), self.sh)

    def numpy(self) -> GaussianSet:
        with dk.no_grad():
            return self.to_set().numpy()

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass(eq=False)
class DensifyResult:
    gaussians: GaussianSet
    origin: np.ndarray  # parent index in the input set for every output Gaussian
    fresh: np.ndarray  # True where the output Gaussian was created by this call


def densify_and_prune(gaussians: GaussianSet, grad_norms: np.ndarray, config: StageConfig,
                      rng: np.random.Generator, extent: float) -> DensifyResult:
    """Clone small / split large high-gradient Gaussians, then drop near-transparent ones."""
    g = gaussians.numpy()
    n = len(g)
    grad_norms = np.asarray(grad_norms, dtype=np.float64).reshape(n)
    selected = grad_norms >= config.grad_threshold
    room = config.max_gaussians - n
    if selected.sum() > max(room, 0):
        # keep the strongest candidates within the budget
        ranked = np.argsort(-grad_norms, kind="stable")
        allowed = np.zeros(n, dtype=bool)
        allowed[ranked[:max(room, 0)]] = True
        selected &= allowed
    large = g.scales.max(axis=1) > config.percent_dense * extent
    clone = np.flatnonzero(selected & ~large)
    split = np.flatnonzero(selected & large)

    keep = np.setdiff1d(np.arange(n), split)
    parts = [g.subset(keep), g.subset(clone)]
    origin = [keep, clone]
    fresh = [np.zeros(keep.size, dtype=bool), np.ones(clone.size, dtype=bool)]
    if split.size:
        parent = g.subset(np.repeat(split, 2))
        rot = quaternion_to_rotation(parent.rotations).data
        offsets = np.einsum("nij,nj->ni", rot, parent.scales * rng.standard_normal((parent.means.shape[0], 3)))
        parts.append(GaussianSet(parent.means + offsets, parent.scales / config.split_factor,
                                 parent.rotations, parent.opacities, parent.sh))
        origin.append(np.repeat(split, 2))
        fresh.append(np.ones(2 * split.size, dtype=bool))
    merged = GaussianSet(*(np.concatenate([getattr(p, f) for p in parts]) for f in GaussianSet.fields()))
    origin = np.concatenate(origin)
    fresh = np.concatenate(fresh)

    alive = np.flatnonzero(merged.opacities[:, 0] >= config.prune_opacity)
    return DensifyResult(merged.subset(alive), origin[alive], fresh[alive])


def prune(gaussians: GaussianSet, threshold: float) -> GaussianSet:
    g = gaussians.numpy()
    return g.subset(np.flatnonzero(g.opacities[:, 0] >= threshold))


def _remap_state(opt: Adam, result: DensifyResult) -> None:
    st = opt.state
    for i in range(len(st.m)):
        for buf in (st.m, st.v):
            moved = buf[i][result.origin]
            moved[result.fresh] = 0.0
            buf[i] = moved


def optimize_gaussians(init: GaussianSet, sampler: Callable[[int], tuple[Camera, np.ndarray]],
                       iters: int, weights: LossWeights, occlusion_cameras: list[Camera],
                       config: StageConfig, rng: np.random.Generator, background: np.ndarray,
                       extent: float, densify: bool = True,
                       history: list | None = None, label: str = "gs") -> GaussianSet:
    """Adam on raw Gaussian parameters with periodic densification; opacities are never reset."""
    params = GaussianParams.from_set(init)

    def make_opt(p: GaussianParams) -> Adam:
        return Adam([([p.means], config.lr_means), ([p.log_scales], config.lr_scales),
                     ([p.rotations], config.lr_rotations), ([p.logits], config.lr_opacities),
                     ([p.sh], config.lr_sh)])

    opt = make_opt(params)
    grad_acc = np.zeros(len(params))
    seen = np.zeros(len(params))
    densify_stop = int(config.densify_until * iters)
    for it in range(iters):
        camera, target = sampler(it)
        try:
            gs = params.to_set()
            out = render(gs, camera, background)
            mean2d = out.splats.mean2d.retain_grad() if out.splats is not None else None
            loss = photometric(out.image, target, weights.lambda_ssim)
            if weights.beta:
                loss = loss + weights.beta * opacity_reg(gs.opacities)
            if weights.gamma:
                loss = loss + weights.gamma * scale_reg(gs.scales)
            if weights.delta:
                loss = loss + weights.delta * occlusion_reg(gs, occlusion_cameras, weights.d_min)
        except dk.NonFiniteError as exc:
            raise TrainingDiverged(f"{label}: non-finite value at iteration {it}: {exc}") from exc
        grads = dk.backward(loss, params.tensors())
        if mean2d is not None and mean2d.grad is not None:
            ndc = mean2d.grad * np.array([0.5 * camera.width, 0.5 * camera.height])
            src = out.splats.source_index
            grad_acc[src] += np.linalg.norm(ndc, axis=1)
            seen[src] += 1
        opt.step(grads)
        if history is not None:
            history.append(float(loss.item()))
        step = it + 1
        if (densify and step >= config.densify_from and step % config.densify_interval == 0
                and step <= densify_stop):
            result = densify_and_prune(params.numpy(), grad_acc / np.maximum(seen, 1), config, rng, extent)
            state = opt.state
            params = GaussianParams.from_set(result.gaussians)
            opt = make_opt(params)
            opt.state = state
            _remap_state(opt, result)
            grad_acc = np.zeros(len(params))
            seen = np.zeros(len(params))
        if step % 100 == 0:
            log.info("%s iter %d/%d loss %.5f gaussians %d", label, step, iters, loss.item(), len(params))
    return params.numpy()


def random_init(bounds, count: int, opacity: float, rng: np.random.Generator) -> GaussianSet:
    means = bounds.sample(rng, count)
    dist = knn_mean_distance(means, 3)
    scales = np.repeat(np.maximum(dist, 1e-7)[:, None], 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    opac = np.full((count, 1), opacity)
    sh = color_to_sh(rng.uniform(0.0, 1.0, size=(count, 3)))
    return GaussianSet(means, scales, rotations, opac, sh)


def random_view_sampler(data: TrainingData, rng: np.random.Generator):
    def sample(_it):
        v = data.views[int(rng.integers(len(data.views)))]
        return v.camera, v.image
    return sample


def run_vanilla_gs(data: TrainingData, config: StageConfig, rng: np.random.Generator,
                   iters: int | None = None, history: list | None = None) -> GaussianSet:
    """Initial estimate from random points in the scene box."""
    init = random_init(data.bounds, config.init_count, config.init_opacity, rng)
    weights = LossWeights(config.beta_init, config.gamma_init, config.delta_init,
                          config.d_min or data.default_d_min(), config.lambda_ssim)
    return optimize_gaussians(init, random_view_sampler(data, rng), iters or config.iters_init, weights,
                              data.cameras, config, rng, data.background, data.bounds.extent,
                              history=history, label="init")
