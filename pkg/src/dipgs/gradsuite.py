"""Finite-difference verification of every differentiable operation.

Each group builds a small random problem from the seed, compares the reverse-mode
gradient against central differences at 64-bit precision and reports the worst
relative error. The generator has thousands of weights, so it is checked along
random directions rather than coordinate by coordinate.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor
from .generator import GeneratorWeights, generate, grid_to_gaussians, sample_noise
from .losses import chamfer, occlusion_reg, opacity_reg, photometric, scale_reg, ssim
from .render import RenderSettings, camera_points, composite, conic, render, splat_covariance
from .scene import Camera, GaussianSet, SceneBounds, covariance3d

TOLERANCE = 1e-4
RENDER_STEP = 1e-6


@dataclass
class GroupResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _p(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _small_set(rng, n=3, spread=0.4) -> GaussianSet:
    return GaussianSet(
        means=_p(rng.uniform(-spread, spread, size=(n, 3))),
        scales=_p(rng.uniform(0.15, 0.35, size=(n, 3))),
        rotations=_p(rng.normal(size=(n, 4))),
        opacities=_p(rng.uniform(0.4, 0.9, size=(n, 1))),
        sh=_p(rng.normal(0.0, 0.5, size=(n, 3))),
    )


def _camera(size=8) -> Camera:
    return Camera.look_at([0.3, -3.0, 0.8], [0.0, 0.0, 0.0], width=size, height=size, fov_deg=40.0)


def _worst(fn, params, step=1e-4) -> float:
    return max(dk.check_gradients(fn, params, step))


def _conv(rng):
    x, k, b = _p(rng.normal(size=(6, 6, 2))), _p(rng.normal(size=(3, 3, 2, 3))), _p(rng.normal(size=3))
    w1, w2 = rng.normal(size=(6, 6, 3)), rng.normal(size=(3, 3, 3))
    return max(_worst(lambda: dk.tsum(dk.conv2d(x, k, b) * w1), [x, k, b]),
               _worst(lambda: dk.tsum(dk.conv2d(x, k, b, stride=2) * w2), [x, k, b]))


def _normalize(rng):
    x, g, b = _p(rng.normal(size=(4, 4, 3))), _p(rng.normal(size=3)), _p(rng.normal(size=3))
    w = rng.normal(size=(4, 4, 3))
    return _worst(lambda: dk.tsum(dk.normalize(x, g, b) * w), [x, g, b])


def _activations(rng):
    x = _p(rng.uniform(-3, 3, size=(4, 5)))
    x.data[np.abs(x.data) < 1e-2] = 0.5  # keep away from the leaky kink
    w = rng.normal(size=(4, 5))
    return max(_worst(lambda: dk.tsum(dk.activation(x, kind) * w), [x])
               for kind in ("leaky_relu", "sigmoid", "tanh", "exp"))


def _upsample(rng):
    x = _p(rng.normal(size=(3, 4, 2)))
    w = rng.normal(size=(6, 8, 2))
    return _worst(lambda: dk.tsum(dk.upsample_bilinear(x) * w), [x])


def _projection(rng):
    cam = _camera()
    mu = _p(rng.uniform(-0.5, 0.5, size=(4, 3)))
    w = rng.normal(size=(4, 2))

    def fn():
        p = camera_points(mu, cam)
        z = p[:, 2]
        uv = dk.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=-1)
        return dk.tsum(uv * w)

    return _worst(fn, [mu], RENDER_STEP)


def _splatting(rng):
    cam = _camera()
    s, q = _p(rng.uniform(0.1, 0.5, size=(3, 3))), _p(rng.normal(size=(3, 4)))
    p_cam = _p(rng.uniform(-0.5, 0.5, size=(3, 3)) + [0.0, 0.0, 3.0])
    w, wc = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 3))

    def fn():
        cov2d = splat_covariance(covariance3d(s, q), cam, p_cam)
        return dk.tsum(conic(cov2d) * wc) + dk.tsum(cov2d * w)

    return _worst(fn, [s, q, p_cam], RENDER_STEP)


def _compositing(rng):
    k, size = 4, 8
    mean2d = _p(rng.uniform(1.0, size - 2.0, size=(k, 2)))
    cov = rng.uniform(1.5, 4.0, size=k)
    conics = _p(np.stack([1 / cov, rng.uniform(-0.05, 0.05, size=k), 1 / cov], axis=1))
    opacity = _p(rng.uniform(0.3, 0.9, size=k))
    color = _p(rng.uniform(0.0, 1.0, size=(k, 3)))
    bg = rng.uniform(0, 1, size=3)
    w = rng.normal(size=(size, size, 3))
    settings = RenderSettings(cutoff=False)
    return _worst(lambda: dk.tsum(composite(mean2d, conics, opacity, color, bg, size, size,
                                            None, settings) * w),
                  [mean2d, conics, opacity, color], RENDER_STEP)


def _render(rng):
    g = _small_set(rng)
    cam = _camera()
    w = rng.normal(size=(8, 8, 3))
    errs = []
    for settings in (RenderSettings(cutoff=False), RenderSettings()):
        errs.append(_worst(lambda: dk.tsum(render(g, cam, (0.1, 0.2, 0.3), settings).image * w),
                           [getattr(g, f) for f in g.fields()], RENDER_STEP))
    return max(errs)


def _photometric(rng):
    gt = rng.uniform(0.2, 0.8, size=(12, 12, 3))
    # keep every residual clear of the L1 kink
    pred = _p(gt + rng.choice([-1.0, 1.0], size=gt.shape) * rng.uniform(0.01, 0.2, size=gt.shape))
    small = _p(rng.uniform(0, 1, size=(5, 5, 3)))
    return max(_worst(lambda: photometric(pred, gt), [pred]),
               _worst(lambda: ssim(small, gt[:5, :5]), [small]))


def _chamfer(rng):
    a = _p(rng.normal(size=(7, 3)))
    b = rng.normal(size=(5, 3))
    return _worst(lambda: chamfer(a, b), [a])


def _regularizers(rng):
    o = _p(rng.uniform(0.1, 0.9, size=(6, 1)))
    s = _p(rng.uniform(0.1, 0.9, size=(6, 3)))
    return max(_worst(lambda: opacity_reg(o), [o]), _worst(lambda: scale_reg(s), [s]))


def _occlusion(rng):
    g = _small_set(rng, n=4, spread=0.3)
    cams = [_camera(), Camera.look_at([2.0, 1.0, 0.5], [0, 0, 0], width=8, height=8)]
    # d_min chosen so some boxes are inside the penalised band and some are not
    return _worst(lambda: occlusion_reg(g, cams, d_min=3.0), [getattr(g, f) for f in g.fields()], RENDER_STEP)


def _generator(rng):
    theta = GeneratorWeights.initialize(rng)
    # move off the initial point: zero biases put 1x1 bottleneck activations exactly on the leaky kink
    for t in theta.parameters():
        t.data += rng.normal(0.0, 0.05, size=t.shape)
    z = sample_noise(int(rng.integers(2 ** 31)), 8)
    bounds = SceneBounds(np.zeros(3), np.full(3, 0.5))
    cam = _camera(8)
    w = rng.normal(size=(8, 8, 3))

    def fn():
        grids = generate(theta, z, bounds, s_unit=0.05)
        g = grid_to_gaussians(grids)
        return (dk.tsum(render(g, cam, (0.0, 0.0, 0.0), RenderSettings(cutoff=False)).image * w)
                + opacity_reg(g.opacities) + scale_reg(g.scales) + dk.tsum(g.rotations * 0.01))

    return max(dk.check_directional(fn, theta.parameters(head), rng, directions=2, step=1e-6)
               for head in ("mu", "opacity", "scale", "rotation", "sh"))


GROUPS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": _conv,
    "normalize": _normalize,
    "activations": _activations,
    "upsample": _upsample,
    "projection": _projection,
    "splatting": _splatting,
    "compositing": _compositing,
    "render": _render,
    "photometric": _photometric,
    "chamfer": _chamfer,
    "regularizers": _regularizers,
    "occlusion": _occlusion,
    "generator": _generator,
}


def run_suite(seed: int = 0, groups=None) -> list[GroupResult]:
    out = []
    for i, name in enumerate(groups or GROUPS):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        err = GROUPS[name](rng)
        out.append(GroupResult(name, float(err), time.perf_counter() - start))
    return out
