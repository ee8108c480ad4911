from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..scene import Camera, SceneBounds


@dataclass(eq=False)
class View:
    camera: Camera
    image: np.ndarray  # H x W x 3 in [0, 1]


@dataclass(eq=False)
class TrainingData:
    views: list[View]
    bounds: SceneBounds
    background: np.ndarray
    # known poses of the views to be synthesised; images are never used
    target_poses: list[Camera] = field(default_factory=list)

    def __post_init__(self):
        if not self.views:
            raise ValueError("at least one training view is required")
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        for v in self.views:
            if v.image.shape != (v.camera.height, v.camera.width, 3):
                raise ValueError("view image does not match its camera size")

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    def default_d_min(self) -> float:
        dists = [np.linalg.norm(c.center - self.bounds.center) for c in self.cameras]
        return 0.2 * float(np.median(dists))


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one purpose: ``SeedSequence([seed, *keys])``."""
    return np.random.default_rng([int(seed), *map(int, keys)])


# substream keys
STREAM_INIT = 1
STREAM_NOISE = 2
STREAM_WEIGHTS = 3
STREAM_CD = 4
STREAM_SCALE = 5
STREAM_DIP = 6
STREAM_POST = 7
STREAM_PSEUDO = 8
