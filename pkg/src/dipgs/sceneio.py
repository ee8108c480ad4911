"""Synthetic scenes, file formats and held-out evaluation.

Scene and Gaussian files are UTF-8 JSON documents whose floats are written as
hexadecimal strings (``float.hex``) so that a save/load round trip is exact.
Images are binary PPM (P6, 8 bit).
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import psnr, ssim
from .render import render
from .scene import Camera, GaussianSet, SceneBounds, color_to_sh

SCENE_FORMAT = "dipgs-scene"
GAUSSIAN_FORMAT = "dipgs-gaussians"
REPORT_FORMAT = "dipgs-eval"
CONFIG_FORMAT = "dipgs-config"
FORMAT_VERSION = 1

CAMERA_RADIUS = 3.0
CAMERA_FOV_DEG = 40.0
TRAIN_ARC_DEG = 90.0


class FormatError(ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


@dataclass(eq=False)
class SyntheticScene:
    truth: GaussianSet
    train_cameras: list[Camera]
    test_cameras: list[Camera]
    background: np.ndarray
    bounds: SceneBounds
    seed: int

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class EvalReport:
    psnr: list[float]
    ssim: list[float]
    gaussians: int
    seconds: float
    mean_psnr: float = field(init=False)
    mean_ssim: float = field(init=False)

    def __post_init__(self):
        self.mean_psnr = float(np.mean(self.psnr)) if self.psnr else float("nan")
        self.mean_ssim = float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "version": FORMAT_VERSION, "psnr": self.psnr, "ssim": self.ssim,
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
                "gaussians": self.gaussians, "seconds": self.seconds}

    def table(self) -> str:
        lines = [f"{'view':>6} {'PSNR':>9} {'SSIM':>8}"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim)):
            lines.append(f"{i:>6d} {p:>9.3f} {s:>8.4f}")
        lines.append(f"{'mean':>6} {self.mean_psnr:>9.3f} {self.mean_ssim:>8.4f}")
        lines.append(f"gaussians: {self.gaussians}  time: {self.seconds:.2f}s")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _orbit_camera(azimuth_deg: float, elevation_deg: float, size: int, bounds: SceneBounds) -> Camera:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = bounds.center + CAMERA_RADIUS * np.array([math.cos(el) * math.cos(az),
                                                     math.cos(el) * math.sin(az), math.sin(el)])
    return Camera.look_at(eye, bounds.center, width=size, height=size, fov_deg=CAMERA_FOV_DEG, near=0.1)


def synth_scene(seed: int, count: int = 200, train_views: int = 3, test_views: int = 8,
                size: int = 64) -> SyntheticScene:
    """Random Gaussians in a unit cube, seen by few clustered training cameras.

    Training azimuths share a 90 degree arc; test azimuths cover the whole circle.
    """
    if count < 1 or train_views < 1 or test_views < 0 or size < 1:
        raise ValueError("invalid scene parameters")
    rng = np.random.default_rng(seed)
    bounds = SceneBounds(np.zeros(3), np.full(3, 0.5))
    means = bounds.sample(rng, count)
    scales = np.exp(rng.uniform(np.log(0.02), np.log(0.1), size=(count, 3)))
    rotations = rng.standard_normal((count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = rng.uniform(0.5, 0.95, size=(count, 1))
    sh = color_to_sh(rng.uniform(0.0, 1.0, size=(count, 3)))
    truth = GaussianSet(means, scales, rotations, opacities, sh)

    arc_start = rng.uniform(0.0, 360.0)
    step = TRAIN_ARC_DEG / max(train_views - 1, 1)
    train = [_orbit_camera(arc_start + i * step + rng.uniform(-5, 5), rng.uniform(15.0, 35.0), size, bounds)
             for i in range(train_views)]
    offset = rng.uniform(0.0, 360.0)
    test = [_orbit_camera(offset + 360.0 * i / max(test_views, 1), rng.uniform(10.0, 40.0), size, bounds)
            for i in range(test_views)]
    return SyntheticScene(truth, train, test, np.zeros(3), bounds, seed)


def render_truth(scene: SyntheticScene, cameras: list[Camera] | None = None) -> list[np.ndarray]:
    cams = scene.test_cameras if cameras is None else cameras
    return [render(scene.truth, c, scene.background).pixels for c in cams]


# ---------------------------------------------------------------------------
# text documents with hexadecimal floats
# ---------------------------------------------------------------------------

def _hex(a) -> list | str:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        return float(arr).hex()
    return [_hex(x) for x in arr]


def _unhex(x) -> np.ndarray:
    def conv(v):
        if isinstance(v, list):
            return [conv(e) for e in v]
        if not isinstance(v, str):
            raise FormatError(f"expected a hexadecimal float string, got {v!r}")
        return float.fromhex(v)
    return np.array(conv(x), dtype=np.float64)


def _camera_doc(c: Camera) -> dict:
    return {"w2c": _hex(c.world_to_camera), "fx": float(c.fx).hex(), "fy": float(c.fy).hex(),
            "cx": float(c.cx).hex(), "cy": float(c.cy).hex(), "width": int(c.width),
            "height": int(c.height), "near": float(c.near).hex()}


def _camera_from(d: dict) -> Camera:
    return Camera(_unhex(d["w2c"]), float.fromhex(d["fx"]), float.fromhex(d["fy"]), float.fromhex(d["cx"]),
                  float.fromhex(d["cy"]), int(d["width"]), int(d["height"]), float.fromhex(d["near"]))


def _gaussians_doc(g: GaussianSet) -> dict:
    g = g.numpy()
    return {name: _hex(getattr(g, name)) for name in GaussianSet.fields()}


def _gaussians_from(d: dict) -> GaussianSet:
    arrays = []
    for name, width in zip(GaussianSet.fields(), (3, 3, 4, 1, 3)):
        a = _unhex(d[name])
        arrays.append(a.reshape(-1, width) if a.size else np.zeros((0, width)))
    return GaussianSet(*arrays)


def _write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def dump_document(doc: dict) -> bytes:
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")


def parse_document(raw: bytes, expected_format: str) -> dict:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"invalid UTF-8 at byte offset {exc.start}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        if exc.msg.startswith("Unterminated") or exc.pos >= len(text.rstrip()):
            raise FormatError(f"truncated document: unexpected end of data at byte offset {len(raw)}") from exc
        offset = len(text[:exc.pos].encode("utf-8"))
        raise FormatError(f"parse error at byte offset {offset}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise FormatError(f"not a {expected_format} document")
    if doc.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported {expected_format} version {doc.get('version')!r}")
    return doc


def scene_document(scene: SyntheticScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": FORMAT_VERSION,
        "seed": int(scene.seed),
        "background": _hex(scene.background),
        "bounds": {"center": _hex(scene.bounds.center), "half_extent": _hex(scene.bounds.half_extent)},
        "gaussians": _gaussians_doc(scene.truth),
        "cameras": {"train": [_camera_doc(c) for c in scene.train_cameras],
                    "test": [_camera_doc(c) for c in scene.test_cameras]},
    }


def save_scene(path, scene: SyntheticScene) -> None:
    _write_atomic(path, dump_document(scene_document(scene)))


def load_scene(path) -> SyntheticScene:
    doc = parse_document(Path(path).read_bytes(), SCENE_FORMAT)
    try:
        return SyntheticScene(
            truth=_gaussians_from(doc["gaussians"]),
            train_cameras=[_camera_from(c) for c in doc["cameras"]["train"]],
            test_cameras=[_camera_from(c) for c in doc["cameras"]["test"]],
            background=_unhex(doc["background"]),
            bounds=SceneBounds(_unhex(doc["bounds"]["center"]), _unhex(doc["bounds"]["half_extent"])),
            seed=int(doc["seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"missing or malformed field: {exc}") from exc


def save_gaussians(path, gaussians: GaussianSet) -> None:
    doc = {"format": GAUSSIAN_FORMAT, "version": FORMAT_VERSION, "count": len(gaussians),
           "gaussians": _gaussians_doc(gaussians)}
    _write_atomic(path, dump_document(doc))


def load_gaussians(path) -> GaussianSet:
    doc = parse_document(Path(path).read_bytes(), GAUSSIAN_FORMAT)
    try:
        return _gaussians_from(doc["gaussians"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"missing or malformed field: {exc}") from exc


def save_report(path, report: EvalReport) -> None:
    _write_atomic(path, dump_document(report.to_dict()))


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------

def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    h, w = img.shape[:2]
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_image(path, image: np.ndarray) -> None:
    _write_atomic(path, encode_ppm(image))


def decode_ppm(raw: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PPM header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError("only 8-bit PPM images are supported")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise FormatError(f"PPM pixel data truncated at byte offset {pos + len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(gaussians: GaussianSet, scene: SyntheticScene, truth_images: list[np.ndarray] | None = None) -> EvalReport:
    """PSNR / SSIM of the candidate against truth renders at every test camera."""
    start = time.perf_counter()
    if truth_images is None:
        truth_images = render_truth(scene)
    ps, ss = [], []
    for cam, gt in zip(scene.test_cameras, truth_images):
        img = render(gaussians, cam, scene.background).pixels
        ps.append(psnr(img, gt))
        ss.append(float(ssim(img, gt).item()))
    return EvalReport(ps, ss, len(gaussians), time.perf_counter() - start)
