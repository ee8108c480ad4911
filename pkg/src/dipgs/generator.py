"""Deep-image-prior generator: five U-Nets turning a fixed noise pyramid into a Gaussian grid."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor
from .scene import GaussianSet, SceneBounds

INPUT_DIM = 32
INJECT_DIMS = (4, 4, 4)
ENCODER_CHANNELS = (16, 32, 64)
HEAD_CHANNELS = {"mu": 3, "opacity": 1, "scale": 3, "rotation": 4, "sh": 3}
SCALE_CLAMP = (-15.0, 8.0)
NOISE_HIGH = 0.1

CHECKPOINT_MAGIC = b"DIPW"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class NoisePyramid:
    levels: list[np.ndarray]
    seed: int | None = None

    @property
    def side(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(z.shape[2] for z in self.levels)


def grid_side(count: int, ratio: float = 0.75) -> int:
    """Smallest multiple of 8 whose square is at least ``ratio * count``."""
    if count < 1:
        raise ValueError("need at least one Gaussian to size the grid")
    n = 8 * max(1, math.ceil(math.sqrt(ratio * count) / 8))
    while (n - 8) >= 8 and (n - 8) ** 2 >= ratio * count:
        n -= 8
    while n * n < ratio * count:
        n += 8
    return n


def sample_noise(seed: int, n: int, dims=(INPUT_DIM,) + INJECT_DIMS) -> NoisePyramid:
    if n <= 0 or n % 8:
        raise ValueError(f"grid side must be a positive multiple of 8, got {n}")
    if len(dims) != 4:
        raise ValueError("need four level dimensions")
    rng = np.random.default_rng(seed)
    levels = [rng.uniform(0.0, NOISE_HIGH, size=(n >> i, n >> i, d)) for i, d in enumerate(dims)]
    return NoisePyramid(levels, seed)


def perturb(z: NoisePyramid, sigma: float, rng: np.random.Generator) -> NoisePyramid:
    """``z + sigma * u`` with fresh standard-normal ``u`` per level."""
    if sigma < 0:
        raise ValueError("noise scale must be non-negative")
    if sigma == 0:
        return NoisePyramid([lvl.copy() for lvl in z.levels], z.seed)
    return NoisePyramid([lvl + sigma * rng.standard_normal(lvl.shape) for lvl in z.levels], z.seed)


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

def _conv_param(rng, kh, cin, cout, gain):
    std = gain / math.sqrt(kh * kh * cin)
    return Tensor(rng.normal(0.0, std, size=(kh, kh, cin, cout)), requires_grad=True)


def init_unet(rng: np.random.Generator, out_channels: int,
              dims=(INPUT_DIM,) + INJECT_DIMS, channels=ENCODER_CHANNELS) -> dict[str, Tensor]:
    """He-style initialised weights for one U-Net, keyed by layer name."""
    gain = math.sqrt(2.0 / (1.0 + dk.nn.LEAKY_SLOPE ** 2))
    w: dict[str, Tensor] = {}

    def block(name, k, cin, cout):
        w[f"{name}.w"] = _conv_param(rng, k, cin, cout, gain)
        w[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        w[f"{name}.g"] = Tensor(np.ones(cout), requires_grad=True)
        w[f"{name}.beta"] = Tensor(np.zeros(cout), requires_grad=True)

    c1, c2, c3 = channels
    block("enc1.down", 3, dims[0], c1)
    block("enc1.conv", 3, c1, c1)
    block("enc2.down", 3, c1 + dims[1], c2)
    block("enc2.conv", 3, c2, c2)
    block("enc3.down", 3, c2 + dims[2], c3)
    block("enc3.conv", 3, c3, c3)
    block("dec3", 3, c3 + dims[3] + c2, c3)
    block("dec2", 3, c3 + c1, c2)
    block("dec1", 3, c2 + dims[0], c1)
    w["head.w"] = _conv_param(rng, 1, c1, out_channels, 1.0)
    w["head.b"] = Tensor(np.zeros(out_channels), requires_grad=True)
    return w


def _block(w, name, x, stride=1):
    y = dk.conv2d(x, w[f"{name}.w"], w[f"{name}.b"], stride=stride, padding="same")
    y = dk.normalize(y, w[f"{name}.g"], w[f"{name}.beta"])
    return dk.leaky_relu(y)


def unet_forward(w: dict[str, Tensor], z: NoisePyramid, out_channels: int | None = None) -> Tensor:
    """Encoder with noise injected at every scale, concatenating skips, 1x1 head."""
    z1, z2, z3, z4 = z.levels
    e1 = _block(w, "enc1.conv", _block(w, "enc1.down", z1, stride=2))
    e2 = _block(w, "enc2.conv", _block(w, "enc2.down", dk.concat([e1, z2], axis=2), stride=2))
    e3 = _block(w, "enc3.conv", _block(w, "enc3.down", dk.concat([e2, z3], axis=2), stride=2))
    d = dk.upsample_bilinear(dk.concat([e3, z4], axis=2))
    d = _block(w, "dec3", dk.concat([d, e2], axis=2))
    d = _block(w, "dec2", dk.concat([dk.upsample_bilinear(d), e1], axis=2))
    d = _block(w, "dec1", dk.concat([dk.upsample_bilinear(d), z1], axis=2))
    out = dk.conv2d(d, w["head.w"], w["head.b"], stride=1, padding="same")
    if out_channels is not None and out.shape[2] != out_channels:
        raise ValueError(f"head produces {out.shape[2]} channels, expected {out_channels}")
    return out


@dataclass(eq=False)
class GeneratorWeights:
    mu: dict[str, Tensor]
    opacity: dict[str, Tensor]
    scale: dict[str, Tensor]
    rotation: dict[str, Tensor]
    sh: dict[str, Tensor]

    @classmethod
    def initialize(cls, seed_or_rng, dims=(INPUT_DIM,) + INJECT_DIMS) -> "GeneratorWeights":
        rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
        return cls(**{head: init_unet(rng, c, dims) for head, c in HEAD_CHANNELS.items()})

    def heads(self) -> dict[str, dict[str, Tensor]]:
        return {h: getattr(self, h) for h in HEAD_CHANNELS}

    def parameters(self, head: str | None = None) -> list[Tensor]:
        if head is not None:
            return list(getattr(self, head).values())
        return [t for h in HEAD_CHANNELS for t in getattr(self, h).values()]

    def flat(self) -> dict[str, np.ndarray]:
        return {f"{h}.{k}": t.data for h, ws in self.heads().items() for k, t in ws.items()}

    @classmethod
    def from_flat(cls, flat: dict[str, np.ndarray]) -> "GeneratorWeights":
        heads: dict[str, dict[str, Tensor]] = {h: {} for h in HEAD_CHANNELS}
        for key, arr in flat.items():
            head, _, name = key.partition(".")
            if head not in heads:
                raise ValueError(f"unknown head in weight name {key!r}")
            heads[head][name] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
        return cls(**heads)


@dataclass(eq=False)
class ParameterGrids:
    mu: Tensor  # n x n x 3
    opacity: Tensor  # n x n x 1
    scale: Tensor  # n x n x 3
    rotation: Tensor  # n x n x 4
    sh: Tensor  # n x n x 3


def generate(theta: GeneratorWeights, z: NoisePyramid, bounds: SceneBounds,
             s_unit: float = 1.0) -> ParameterGrids:
    raw = {h: unet_forward(w, z, HEAD_CHANNELS[h]) for h, w in theta.heads().items()}
    mu = dk.tanh(raw["mu"]) * bounds.half_extent + bounds.center
    opacity = dk.sigmoid(raw["opacity"])
    scale = dk.exp(dk.clip(raw["scale"], *SCALE_CLAMP)) * s_unit
    return ParameterGrids(mu, opacity, scale, raw["rotation"], raw["sh"])


def generate_head(theta: GeneratorWeights, head: str, z: NoisePyramid, bounds: SceneBounds,
                  s_unit: float = 1.0) -> Tensor:
    """One activated head, for stages that fit a single network."""
    raw = unet_forward(getattr(theta, head), z, HEAD_CHANNELS[head])
    if head == "mu":
        return dk.tanh(raw) * bounds.half_extent + bounds.center
    if head == "opacity":
        return dk.sigmoid(raw)
    if head == "scale":
        return dk.exp(dk.clip(raw, *SCALE_CLAMP)) * s_unit
    return raw


def grid_to_gaussians(grids: ParameterGrids) -> GaussianSet:
    """Row-major split: grid entry ``(i, j)`` becomes Gaussian ``i * n + j``."""
    n = grids.mu.shape[0]

    def flat(t):
        return t.reshape((n * n, t.shape[2]))

    return GaussianSet(flat(grids.mu), flat(grids.scale), flat(grids.rotation),
                       flat(grids.opacity), flat(grids.sh))


def gaussians_to_grids(gaussians: GaussianSet) -> ParameterGrids:
    n = math.isqrt(len(gaussians))
    if n * n != len(gaussians):
        raise ValueError("Gaussian count is not a perfect square")

    def grid(x):
        return dk.as_tensor(x).reshape((n, n, -1))

    return ParameterGrids(grid(gaussians.means), grid(gaussians.opacities), grid(gaussians.scales),
                          grid(gaussians.rotations), grid(gaussians.sh))


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def save_weights(path, weights: GeneratorWeights | dict[str, np.ndarray]) -> None:
    """Binary layout: ``DIPW``, u32 version, then per tensor: u32 name length,
    UTF-8 name, u32 rank, u64 dims, float64 little-endian values."""
    flat = weights.flat() if isinstance(weights, GeneratorWeights) else weights
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(flat):
        arr = np.asarray(flat[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a DIPW checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ValueError(f"truncated checkpoint at byte {pos}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint at byte {pos}") from exc
    return out
