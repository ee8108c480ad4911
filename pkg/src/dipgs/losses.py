"""Training objectives and image metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor
from .scene import Camera, GaussianSet, bbox_corners, pairwise_sq_dists

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.0  # opacity L1
    gamma: float = 0.0  # scale L1
    delta: float = 0.0  # occlusion
    d_min: float = 0.6
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if min(self.beta, self.gamma, self.delta, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


@lru_cache(maxsize=32)
def _window_matrix(n: int) -> np.ndarray:
    """Valid-mode Gaussian filter along one axis as an ``(n - 10) x n`` matrix."""
    half = SSIM_WINDOW // 2
    taps = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2 * SSIM_SIGMA ** 2))
    taps /= taps.sum()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = taps
    m.setflags(write=False)
    return m


def ssim(a, b) -> Tensor:
    """Mean structural similarity of two ``H x W x C`` images with range 1.

    Uses an 11x11 Gaussian window (sigma 1.5) without padding; images smaller
    than the window fall back to whole-image statistics.
    """
    a, b = dk.as_tensor(a), dk.as_tensor(b)
    _check_shapes(a, b)
    h, w = a.shape[:2]
    if h >= SSIM_WINDOW and w >= SSIM_WINDOW:
        rows, cols = _window_matrix(h), _window_matrix(w)

        def blur(x):
            return dk.separable_map(x, rows, cols)
    else:
        def blur(x):
            return dk.mean(x, axis=(0, 1), keepdims=True)
    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (2.0 * mu_ab + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return dk.mean(num / den)


def photometric(pred, gt, lambda_ssim: float = 0.2) -> Tensor:
    """``(1 - l) * L1 + l * (1 - SSIM)``."""
    pred, gt = dk.as_tensor(pred), dk.as_tensor(gt)
    _check_shapes(pred, gt)
    l1 = dk.mean(dk.absolute(pred - gt))
    if lambda_ssim == 0:
        return l1
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(pred, gt))


def psnr(a, b, cap: float | None = PSNR_CAP) -> float:
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    value = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    return value if cap is None else min(value, cap)


def nearest_indices(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Index into ``b`` of the nearest point for every row of ``a``."""
    out = np.empty(len(a), dtype=np.int64)
    for start in range(0, len(a), chunk):
        out[start:start + chunk] = np.argmin(pairwise_sq_dists(a[start:start + chunk], b), axis=1)
    return out


def chamfer(a, b) -> Tensor:
    """Symmetric mean squared nearest-neighbour distance between point clouds."""
    a, b = dk.as_tensor(a), dk.as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    ab = nearest_indices(a.data, b.data)
    ba = nearest_indices(b.data, a.data)
    d_ab = a - b[ab]
    d_ba = b - a[ba]
    return _exact_mean(dk.tsum(d_ab * d_ab, axis=1)) + _exact_mean(dk.tsum(d_ba * d_ba, axis=1))


def _exact_mean(x: Tensor) -> Tensor:
    """Mean of a vector with a correctly rounded sum, so the value is order independent."""
    n = x.shape[0]
    return dk.make(np.float64(math.fsum(x.data) / n), (x,), lambda g: (np.full(x.shape, g / n),), "exact_mean")


def opacity_reg(o) -> Tensor:
    return dk.mean(dk.absolute(o))


def scale_reg(s) -> Tensor:
    return dk.mean(dk.absolute(s))


def corner_depths(gaussians: GaussianSet, cameras: list[Camera], k_sigma: float = 3.0) -> Tensor:
    """Camera-space depth of the nearest bounding-box corner, ``N x V``."""
    corners = bbox_corners(gaussians.means, gaussians.scales, gaussians.rotations, k_sigma)
    view_z = np.stack([c.rotation[2] for c in cameras], axis=1)  # 3 x V
    offset = np.array([c.translation[2] for c in cameras])
    depth = dk.matmul(corners, view_z) + offset  # N x 8 x V
    return dk.amin(depth, axis=1)


def occlusion_reg(gaussians: GaussianSet, cameras: list[Camera], d_min: float) -> Tensor:
    """Mean over Gaussians and views of ``o * relu(1 - d / d_min)``."""
    if not cameras:
        raise ValueError("occlusion_reg needs at least one camera")
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    if len(gaussians) == 0:
        return Tensor(0.0)
    d = corner_depths(gaussians, cameras)
    o = dk.as_tensor(gaussians.opacities)  # N x 1, broadcasts over views
    return dk.mean(o * dk.relu(1.0 - d / d_min))
