"""Generator-side optimisation: mean fit, scale fit, rendering fit."""
from __future__ import annotations

import logging

import numpy as np

from .. import diffkit as dk
from ..generator import (
    GeneratorWeights,
    NoisePyramid,
    generate,
    generate_head,
    grid_to_gaussians,
    perturb,
)
from ..losses import LossWeights, chamfer, occlusion_reg, opacity_reg, photometric, scale_reg
from ..render import render
from ..scene import SceneBounds, knn_mean_distance
from .config import StageConfig
from .data import TrainingData
from .gaussians import TrainingDiverged
from .optim import Adam

log = logging.getLogger(__name__)


def _flat(t):
    return t.reshape((t.shape[0] * t.shape[1], t.shape[2]))


def fit_means(theta: GeneratorWeights, z: NoisePyramid, mu_init: np.ndarray, bounds: SceneBounds,
              config: StageConfig, sigma: float, rng: np.random.Generator,
              history: list | None = None) -> GeneratorWeights:
    """Chamfer fit of the mean network to a target point cloud; only the mean head moves."""
    mu_init = np.asarray(mu_init, dtype=np.float64)
    if mu_init.shape[0] == 0:
        raise ValueError("empty target cloud")
    params = theta.parameters("mu")
    opt = Adam([(params, config.lr_cd)])
    for it in range(config.iters_cd):
        mu = _flat(generate_head(theta, "mu", perturb(z, sigma, rng), bounds))
        loss = chamfer(mu, mu_init)
        opt.step(dk.backward(loss, params))
        if history is not None:
            history.append(float(loss.item()))
        if (it + 1) % 100 == 0:
            log.info("mean fit iter %d/%d chamfer %.6f", it + 1, config.iters_cd, loss.item())
    return theta


def scale_targets(theta: GeneratorWeights, z: NoisePyramid, bounds: SceneBounds) -> np.ndarray:
    """Mean distance to the 3 nearest generated means, repeated over the 3 axes."""
    with dk.no_grad():
        mu = _flat(generate_head(theta, "mu", z, bounds)).data
    est = knn_mean_distance(mu, 3)
    return np.repeat(est[:, None], 3, axis=1)


def fit_scales(theta: GeneratorWeights, z: NoisePyramid, bounds: SceneBounds, config: StageConfig,
               sigma: float, rng: np.random.Generator, history: list | None = None) -> GeneratorWeights:
    """Fit the scale network to nearest-neighbour spacing of the generated means."""
    target = scale_targets(theta, z, bounds)
    params = theta.parameters("scale")
    opt = Adam([(params, config.lr_scale_fit)])
    for it in range(config.iters_scale):
        s = _flat(generate_head(theta, "scale", perturb(z, sigma, rng), bounds, config.s_unit))
        diff = s - target
        loss = dk.mean(diff * diff)
        opt.step(dk.backward(loss, params))
        if history is not None:
            history.append(float(loss.item()))
        if (it + 1) % 100 == 0:
            log.info("scale fit iter %d/%d mse %.6g", it + 1, config.iters_scale, loss.item())
    return theta


def dip_loss(theta: GeneratorWeights, z_tilde: NoisePyramid, data: TrainingData, view_index: int,
             weights: LossWeights, bounds: SceneBounds, s_unit: float = 1.0):
    gs = grid_to_gaussians(generate(theta, z_tilde, bounds, s_unit))
    view = data.views[view_index]
    image = render(gs, view.camera, data.background).image
    loss = photometric(image, view.image, weights.lambda_ssim)
    if weights.beta:
        loss = loss + weights.beta * opacity_reg(gs.opacities)
    if weights.gamma:
        loss = loss + weights.gamma * scale_reg(gs.scales)
    if weights.delta:
        loss = loss + weights.delta * occlusion_reg(gs, data.cameras, weights.d_min)
    return loss


def optimize_dip(theta: GeneratorWeights, z: NoisePyramid, data: TrainingData, sigma: float,
                 weights: LossWeights, config: StageConfig, rng: np.random.Generator,
                 iters: int | None = None, history: list | None = None) -> GeneratorWeights:
    """AdamW on all five networks against the training views, one view per step (cycled)."""
    groups = [(theta.parameters("mu"), config.lr_mu)]
    groups += [(theta.parameters(h), config.lr_other) for h in ("opacity", "scale", "rotation", "sh")]
    opt = Adam(groups, weight_decay=config.weight_decay)
    params = opt.params
    n_iters = config.iters_dip if iters is None else iters
    for it in range(n_iters):
        try:
            loss = dip_loss(theta, perturb(z, sigma, rng), data, it % len(data.views), weights,
                            data.bounds, config.s_unit)
        except dk.NonFiniteError as exc:
            raise TrainingDiverged(f"DIP fit (sigma={sigma}): non-finite value at iteration {it}: {exc}") from exc
        opt.step(dk.backward(loss, params))
        if history is not None:
            history.append(float(loss.item()))
        if (it + 1) % 100 == 0:
            log.info("DIP fit iter %d/%d loss %.5f", it + 1, n_iters, loss.item())
    return theta
