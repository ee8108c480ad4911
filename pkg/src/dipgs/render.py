"""Differentiable splatting renderer.

Projection and covariance splatting are composed from diffkit operations;
front-to-back compositing is a single diffkit primitive with a hand-written
backward pass over the list of (pixel, Gaussian) pairs that survive the
screen-space cutoff.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor
from .scene import Camera, GaussianSet, covariance3d, sh_to_color


@dataclass(frozen=True)
class RenderSettings:
    dilation: float = 0.3
    alpha_max: float = 0.99
    alpha_cull: float = 1.0 / 255.0
    t_stop: float = 1e-4
    cutoff: bool = True
    cutoff_sigma: float = 3.0


DEFAULT_SETTINGS = RenderSettings()


@dataclass(eq=False)
class SplattedGaussians:
    """Screen-space Gaussians of one view, sorted front to back."""

    mean2d: Tensor  # K x 2 (u, v) in pixels
    cov2d: Tensor  # K x 2 x 2
    depth: np.ndarray  # K
    color: Tensor  # K x 3
    opacity: Tensor  # K
    source_index: np.ndarray  # K, index into the input set


@dataclass(eq=False)
class RenderTarget:
    image: Tensor  # H x W x 3
    background: np.ndarray
    splats: SplattedGaussians | None = None

    @property
    def pixels(self) -> np.ndarray:
        return self.image.data


def project(mu, camera: Camera):
    """Pinhole projection of one point; ``None`` when it lies in front of the near plane."""
    p = camera.rotation @ np.asarray(mu, dtype=np.float64) + camera.translation
    if p[2] <= camera.near:
        return None
    return (camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy, float(p[2]))


def camera_points(means, camera: Camera) -> Tensor:
    """World points ``N x 3`` to camera space."""
    return dk.matmul(dk.as_tensor(means), camera.rotation.T) + camera.translation


def projection_jacobian(p_cam: Tensor, camera: Camera) -> Tensor:
    """``N x 2 x 3`` Jacobian of the pinhole map at camera-space points."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    zero = dk.Tensor(np.zeros(x.shape))
    inv_z = 1.0 / z
    row1 = dk.stack([camera.fx * inv_z, zero, -camera.fx * x * inv_z * inv_z], axis=-1)
    row2 = dk.stack([zero, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z], axis=-1)
    return dk.stack([row1, row2], axis=1)


def splat_covariance(cov3d, camera: Camera, p_cam, dilation: float = DEFAULT_SETTINGS.dilation) -> Tensor:
    """``J W Sigma W^T J^T + dilation * I`` for ``N x 3 x 3`` covariances."""
    cov3d, p_cam = dk.as_tensor(cov3d), dk.as_tensor(p_cam)
    single = cov3d.ndim == 2
    if single:
        cov3d, p_cam = cov3d.reshape((1, 3, 3)), p_cam.reshape((1, 3))
    t = dk.matmul(projection_jacobian(p_cam, camera), camera.rotation)
    cov2d = t @ cov3d @ dk.transpose(t, (0, 2, 1)) + dilation * np.eye(2)
    return cov2d.reshape((2, 2)) if single else cov2d


def splat(gaussians: GaussianSet, camera: Camera, settings: RenderSettings = DEFAULT_SETTINGS):
    """Cull, depth-sort and project a Gaussian set into one view."""
    means = dk.as_tensor(gaussians.means)
    n = len(gaussians)
    if n == 0:
        return None
    depth_all = means.data @ camera.rotation[2] + camera.translation[2]
    keep = np.flatnonzero(depth_all > camera.near)
    if keep.size == 0:
        return None
    # stable front-to-back order, ties broken by source index
    order = keep[np.lexsort((keep, depth_all[keep]))]
    mu = means[order]
    p_cam = camera_points(mu, camera)
    cov3d = covariance3d(dk.as_tensor(gaussians.scales)[order], dk.as_tensor(gaussians.rotations)[order])
    cov2d = splat_covariance(cov3d, camera, p_cam, settings.dilation)
    z = p_cam[:, 2]
    u = camera.fx * p_cam[:, 0] / z + camera.cx
    v = camera.fy * p_cam[:, 1] / z + camera.cy
    mean2d = dk.stack([u, v], axis=-1)
    color = sh_to_color(dk.as_tensor(gaussians.sh)[order])
    opacity = dk.as_tensor(gaussians.opacities)[order, 0]
    return SplattedGaussians(mean2d, cov2d, p_cam.data[:, 2].copy(), color, opacity, order)


def conic(cov2d: Tensor) -> Tensor:
    """Upper triangle ``(a, b, c)`` of the inverse of each 2x2 covariance."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return dk.stack([c / det, -b / det, a / det], axis=-1)


def screen_radii(cov2d: np.ndarray, k_sigma: float) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    return k_sigma * np.sqrt(lam)


def _pixel_pairs(mean2d: np.ndarray, radii: np.ndarray | None, width: int, height: int):
    k = mean2d.shape[0]
    if radii is None:
        gk = np.repeat(np.arange(k), width * height)
        pix = np.tile(np.arange(width * height), k)
        return gk, pix % width, pix // width
    u, v = mean2d[:, 0], mean2d[:, 1]
    x0 = np.maximum(np.ceil(u - radii), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u + radii), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - radii), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v + radii), height - 1).astype(np.int64)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    counts = w * h
    gk = np.repeat(np.arange(k), counts)
    local = np.arange(gk.size) - np.repeat(np.cumsum(counts) - counts, counts)
    wk = w[gk]
    return gk, x0[gk] + local % wk, y0[gk] + local // wk


def composite(mean2d, conics, opacity, color, background, width: int, height: int,
              radii: np.ndarray | None = None, settings: RenderSettings = DEFAULT_SETTINGS) -> Tensor:
    """Front-to-back alpha compositing of depth-sorted screen-space Gaussians.

    ``radii=None`` evaluates every Gaussian at every pixel.
    """
    mean2d, conics, opacity, color = (dk.as_tensor(t) for t in (mean2d, conics, opacity, color))
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    k = mean2d.shape[0]
    npix = width * height
    gk, px, py = _pixel_pairs(mean2d.data, radii, width, height)
    packed = np.concatenate([mean2d.data, conics.data, opacity.data[:, None]], axis=1)

    def pair_terms(gk, px, py):
        p = packed[gk]
        dx = px - p[:, 0]
        dy = py - p[:, 1]
        ca, cb, cc = p[:, 2], p[:, 3], p[:, 4]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        gauss = np.exp(np.minimum(power, 0.0))
        return dx, dy, ca, cb, cc, power, gauss, p[:, 5] * gauss

    # culled pairs multiply T by exactly one and carry no gradient: drop them up front
    *_, power, _, raw = pair_terms(gk, px, py)
    sel = (raw >= settings.alpha_cull) & (power <= 0.0)
    gk = gk[sel]
    pid = py[sel] * width + px[sel]
    # pairs arrive grouped by Gaussian in depth order, so a stable sort on pixel keeps depth order
    order = np.argsort(pid, kind="stable")
    gk, pid = gk[order], pid[order]
    dx, dy, ca, cb, cc, _, gauss, raw = pair_terms(gk, pid % width, pid // width)
    alpha = np.minimum(raw, settings.alpha_max)
    live = np.ones(gk.size, dtype=bool)

    # per-pixel rank so compositing runs as a row-wise cumprod
    npairs = gk.size
    if npairs:
        starts = np.flatnonzero(np.r_[True, pid[1:] != pid[:-1]])
        seg_len = np.diff(np.r_[starts, npairs])
        rank = np.arange(npairs) - np.repeat(starts, seg_len)
        depth_len = int(rank.max()) + 1
    else:
        rank = np.zeros(0, dtype=np.int64)
        depth_len = 1
    keep_mat = np.ones((npix, depth_len))
    keep_mat[pid, rank] = 1.0 - alpha
    t_incl = np.cumprod(keep_mat, axis=1)
    t_before = np.ones(npairs)
    inner = rank > 0
    t_before[inner] = t_incl[pid[inner], rank[inner] - 1]
    active = t_before >= settings.t_stop
    alpha = np.where(active, alpha, 0.0)
    live &= active
    keep_mat[pid, rank] = 1.0 - alpha
    t_incl = np.cumprod(keep_mat, axis=1)
    t_final = t_incl[:, -1]

    weight = t_before * alpha
    col = color.data[gk]
    image = np.empty((npix, 3))
    for ch in range(3):
        image[:, ch] = np.bincount(pid, weights=weight * col[:, ch], minlength=npix) + t_final * bg[ch]
    image = image.reshape(height, width, 3)

    def bw(g):
        g = g.reshape(npix, 3)
        gpair = g[pid]
        g_color = weight[:, None] * gpair
        dot_c = (gpair * col).sum(axis=1)
        q = weight * dot_c
        qmat = np.zeros((npix, depth_len))
        qmat[pid, rank] = q
        # sum of contributions strictly behind each pair
        suffix = np.cumsum(qmat[:, ::-1], axis=1)[:, ::-1]
        behind = np.zeros(npairs)
        last = rank + 1 < depth_len
        behind[last] = suffix[pid[last], rank[last] + 1]
        behind += t_final[pid] * (g[pid] @ bg)
        g_alpha = t_before * dot_c - behind / (1.0 - alpha)
        g_raw = np.where(live & (raw < settings.alpha_max), g_alpha, 0.0)
        g_opacity = g_raw * gauss
        g_power = g_raw * raw
        g_u = g_power * (ca * dx + cb * dy)
        g_v = g_power * (cb * dx + cc * dy)
        g_a = g_power * (-0.5 * dx * dx)
        g_b = g_power * (-dx * dy)
        g_c = g_power * (-0.5 * dy * dy)

        def acc(w):
            return np.bincount(gk, weights=w, minlength=k)

        return (
            np.stack([acc(g_u), acc(g_v)], axis=1),
            np.stack([acc(g_a), acc(g_b), acc(g_c)], axis=1),
            acc(g_opacity),
            np.stack([acc(g_color[:, ch]) for ch in range(3)], axis=1),
        )

    return dk.make(image, (mean2d, conics, opacity, color), bw, "composite")


def render(gaussians: GaussianSet, camera: Camera, background=(0.0, 0.0, 0.0),
           settings: RenderSettings = DEFAULT_SETTINGS) -> RenderTarget:
    """Render one view; the result is differentiable w.r.t. every tensor attribute."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    splats = splat(gaussians, camera, settings)
    if splats is None:
        image = Tensor(np.broadcast_to(bg, (camera.height, camera.width, 3)).copy())
        return RenderTarget(image, bg, None)
    radii = screen_radii(splats.cov2d.data, settings.cutoff_sigma) if settings.cutoff else None
    image = composite(splats.mean2d, conic(splats.cov2d), splats.opacity, splats.color, bg,
                      camera.width, camera.height, radii, settings)
    return RenderTarget(image, bg, splats)
