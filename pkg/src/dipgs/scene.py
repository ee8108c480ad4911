"""Gaussians, cameras, bounds and the geometric primitives shared by every stage."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor

SH_C0 = 0.28209479177387814
CORNER_SIGNS = np.array(list(product((-1.0, 1.0), repeat=3)))  # 8 x 3


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """N Gaussians; attributes are numpy arrays or (for optimisation) diffkit tensors.

    Rotations are stored as raw quaternions and normalised where used.
    """

    means: np.ndarray | Tensor
    scales: np.ndarray | Tensor
    rotations: np.ndarray | Tensor
    opacities: np.ndarray | Tensor
    sh: np.ndarray | Tensor

    def __post_init__(self):
        for name in ("means", "scales", "rotations", "opacities", "sh"):
            v = getattr(self, name)
            if not isinstance(v, Tensor):
                object.__setattr__(self, name, np.asarray(v, dtype=np.float64))
        n = len(self)
        expected = {"means": 3, "scales": 3, "rotations": 4, "opacities": 1, "sh": 3}
        for name, width in expected.items():
            shape = _values(getattr(self, name)).shape
            if shape != (n, width):
                raise ValueError(f"{name} has shape {shape}, expected ({n}, {width})")
        if n:
            if not (_values(self.scales) > 0).all():
                raise ValueError("scales must be strictly positive")
            o = _values(self.opacities)
            if not ((o >= 0) & (o <= 1)).all():
                raise ValueError("opacities must lie in [0, 1]")
            if not (np.linalg.norm(_values(self.rotations), axis=1) > 0).all():
                raise ValueError("zero quaternion")

    def __len__(self) -> int:
        return _values(self.means).shape[0]

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 1)), np.zeros((0, 3)))

    def numpy(self) -> "GaussianSet":
        """Detached copy holding plain arrays."""
        return GaussianSet(*(np.array(_values(getattr(self, f)), copy=True) for f in self.fields()))

    @staticmethod
    def fields() -> tuple[str, ...]:
        return ("means", "scales", "rotations", "opacities", "sh")

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(*(_values(getattr(self, f))[idx] for f in self.fields()))

    def normalized(self) -> "GaussianSet":
        r = _values(self.rotations)
        return GaussianSet(_values(self.means), _values(self.scales),
                           r / np.linalg.norm(r, axis=1, keepdims=True),
                           _values(self.opacities), _values(self.sh))

    def equals(self, other: "GaussianSet") -> bool:
        return all(np.array_equal(_values(getattr(self, f)), _values(getattr(other, f)))
                   for f in self.fields())


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera looking down +z in its own frame (x right, y down)."""

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        w = np.array(self.world_to_camera, dtype=np.float64)
        object.__setattr__(self, "world_to_camera", w)
        if w.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        rot = w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-8) or abs(np.linalg.det(rot) - 1.0) > 1e-8:
            raise ValueError("rotation block of world_to_camera is not a proper rotation")
        if not np.allclose(w[3], [0, 0, 0, 1]):
            raise ValueError("last row of world_to_camera must be (0, 0, 0, 1)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if self.near <= 0:
            raise ValueError("near must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
                fov_deg: float = 40.0, near: float = 0.01) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(w2c, f, f, width / 2.0, height / 2.0, width, height, near)


@dataclass(frozen=True, eq=False)
class SceneBounds:
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    half_extent: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        h = np.asarray(self.half_extent, dtype=np.float64).reshape(3)
        if not (h > 0).all():
            raise ValueError("half_extent must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extent", h)

    @property
    def extent(self) -> float:
        """Diagonal length of the box."""
        return float(2.0 * np.linalg.norm(self.half_extent))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.center + self.half_extent * rng.uniform(-1.0, 1.0, size=(n, 3))


# ---------------------------------------------------------------------------
# geometry (vectorised over a leading axis, differentiable when given tensors)
# ---------------------------------------------------------------------------

def quaternion_to_rotation(r) -> Tensor:
    """``(..., 4)`` quaternions (w, x, y, z) to ``(..., 3, 3)`` rotation matrices."""
    r = dk.as_tensor(r)
    if not (np.linalg.norm(r.data, axis=-1) > 0).all():
        raise ValueError("zero quaternion")
    q = r / dk.sqrt(dk.tsum(r * r, axis=-1, keepdims=True))
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    flat = dk.stack(rows, axis=-1)
    return flat.reshape(flat.shape[:-1] + (3, 3))


def covariance3d(s, r) -> Tensor:
    """``R S S^T R^T`` for scales ``(..., 3)`` and quaternions ``(..., 4)``."""
    s = dk.as_tensor(s)
    rot = quaternion_to_rotation(r)
    m = rot * s.reshape(s.shape[:-1] + (1, 3))
    return m @ dk.transpose(m, tuple(range(m.ndim - 2)) + (m.ndim - 1, m.ndim - 2))


def bbox_corners(means, scales, rotations, k_sigma: float = 3.0) -> Tensor:
    """Corners of the oriented ``k_sigma`` box of each Gaussian, shape ``N x 8 x 3``."""
    means, scales = dk.as_tensor(means), dk.as_tensor(scales)
    rot = quaternion_to_rotation(rotations)
    axes = rot * (scales * k_sigma).reshape(scales.shape[:-1] + (1, 3))
    offsets = dk.matmul(CORNER_SIGNS, dk.transpose(axes, (0, 2, 1)))
    return offsets + means.reshape((means.shape[0], 1, 3))


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distances, summed x then y then z."""
    d = a[:, None, 0] - b[None, :, 0]
    out = d * d
    d = a[:, None, 1] - b[None, :, 1]
    out += d * d
    d = a[:, None, 2] - b[None, :, 2]
    out += d * d
    return out


def knn_mean_distance(points, k: int = 3, chunk: int = 1024) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest other points."""
    pts = np.asarray(_values(points), dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("knn_mean_distance needs at least two points")
    k = min(k, n - 1)
    out = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d = np.sqrt(pairwise_sq_dists(pts[start:stop], pts))
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        nearest = np.sort(np.partition(d, k - 1, axis=1)[:, :k], axis=1)
        out[start:stop] = nearest.mean(axis=1)
    return out


def sh_to_color(sh) -> Tensor:
    """Zeroth-order SH coefficients to clamped RGB."""
    return dk.clip(dk.as_tensor(sh) * SH_C0 + 0.5, 0.0, 1.0)


def color_to_sh(color: np.ndarray) -> np.ndarray:
    return (np.asarray(color) - 0.5) / SH_C0
