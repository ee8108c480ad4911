"""Command-line entry point: ``dipgs {synth,fit,render,eval,gradcheck}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

from . import gradsuite, sceneio
from .generator import save_weights
from .pipeline import (
    DEFAULT_SIGMAS,
    PRESETS,
    ConfigError,
    Schedule,
    StageConfig,
    TrainingData,
    TrainingDiverged,
    View,
    run_coarse_to_fine,
)
from .render import render

log = logging.getLogger("dipgs")

SCENE_FILE = "scene.json"
MANIFEST = "manifest.jsonl"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _scene_path(path: str) -> Path:
    p = Path(path)
    return p / SCENE_FILE if p.is_dir() else p


def _load_scene(path: str) -> sceneio.SyntheticScene:
    p = _scene_path(path)
    if not p.is_file():
        raise UsageError(f"no scene file at {p}")
    return sceneio.load_scene(p)


def _image_name(split: str, i: int) -> str:
    return f"{split}_{i:03d}.ppm"


def _training_data(scene: sceneio.SyntheticScene, scene_dir: Path) -> TrainingData:
    """Training images from the scene directory when present, else rendered from the truth set."""
    views = []
    for i, cam in enumerate(scene.train_cameras):
        f = scene_dir / _image_name("train", i)
        img = sceneio.read_image(f) if f.is_file() else render(scene.truth, cam, scene.background).pixels
        views.append(View(cam, img))
    return TrainingData(views, scene.bounds, scene.background, list(scene.test_cameras))


def _config_value(v):
    if isinstance(v, str):
        try:
            return float.fromhex(v)
        except ValueError:
            raise ConfigError(f"config value {v!r} is not a number") from None
    return v


def load_config_file(path) -> tuple[str | None, dict, list[float] | None]:
    """``(preset, overrides, sigmas)`` from a config document; floats may be hex strings."""
    doc = sceneio.parse_document(Path(path).read_bytes(), sceneio.CONFIG_FORMAT)
    values = {k: _config_value(v) for k, v in doc.get("config", {}).items()}
    sigmas = doc.get("sigmas")
    if sigmas is not None:
        sigmas = [float(_config_value(s)) for s in sigmas]
    return doc.get("preset"), values, sigmas


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("stage configuration overrides")
    for f in dataclasses.fields(StageConfig):
        kind = type(f.default) if f.default is not None else float
        if kind is bool:
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", action=argparse.BooleanOptionalAction,
                               default=None)
        else:
            group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=kind, default=None,
                               metavar=kind.__name__.upper())


def resolve_config(args) -> tuple[str, StageConfig, Schedule]:
    """Built-in preset < config file < command-line flags."""
    preset_name, file_values, file_sigmas = None, {}, None
    if args.config:
        preset_name, file_values, file_sigmas = load_config_file(args.config)
    name = args.preset or preset_name or "synthetic"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    values.update(file_values)
    for f in dataclasses.fields(StageConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values[f.name] = v
    config = StageConfig.from_dict(values)
    sigmas = list(args.sigma) if args.sigma else (file_sigmas or list(DEFAULT_SIGMAS))
    if args.stages is not None:
        if args.stages < 1:
            raise ConfigError("--stages must be at least 1")
        if args.stages > len(sigmas):
            raise ConfigError(f"--stages {args.stages} exceeds the {len(sigmas)} noise levels given")
        sigmas = sigmas[:args.stages]
    return name, config, Schedule(tuple(sigmas))


def _jsonl(records) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode("utf-8")


def _prepare_out(out: Path, force: bool) -> None:
    owned = [out / "init.gs", out / "final.gs", out / MANIFEST, *out.glob("stage*")]
    existing = [p for p in owned if p.exists()]
    if existing and not force:
        raise UsageError(f"{out} already holds a run; pass --force to overwrite")
    for p in existing:
        if p.is_dir():
            shutil.rmtree(p)
        else:
            p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"{out} is not writable")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.gaussians < 1 or args.train_views < 1 or args.test_views < 0 or args.size < 1:
        raise UsageError("--gaussians, --train-views and --size must be positive; --test-views >= 0")
    scene = sceneio.synth_scene(args.seed, args.gaussians, args.train_views, args.test_views, args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sceneio.save_scene(out / SCENE_FILE, scene)
    for split, cams in (("train", scene.train_cameras), ("test", scene.test_cameras)):
        for i, img in enumerate(sceneio.render_truth(scene, cams)):
            sceneio.write_image(out / _image_name(split, i), img)
    print(f"wrote {out / SCENE_FILE} and {len(scene.train_cameras) + len(scene.test_cameras)} images")
    return 0


def cmd_fit(args) -> int:
    preset_name, config, schedule = resolve_config(args)
    scene = _load_scene(args.scene)
    data = _training_data(scene, _scene_path(args.scene).parent)
    out = Path(args.out)
    _prepare_out(out, args.force)
    truth = sceneio.render_truth(scene) if scene.test_cameras else None

    header = {"record": "run", "seed": args.seed, "preset": preset_name,
              "sigmas": list(schedule.sigmas), "config": config.to_dict(),
              "train_views": len(data.views), "test_views": len(scene.test_cameras)}
    records = [header]

    def metrics(gaussians):
        if truth is None:
            return {}
        rep = sceneio.evaluate(gaussians, scene, truth)
        return {"psnr": rep.mean_psnr, "ssim": rep.mean_ssim}

    def on_initial(gaussians, losses):
        sceneio.save_gaussians(out / "init.gs", gaussians)
        records.append({"record": "stage", "stage": 0, "gaussians": len(gaussians),
                        "losses": {"init": losses}, "metrics": metrics(gaussians)})
        (out / MANIFEST).write_bytes(_jsonl(records))

    def on_stage(result):
        d = out / f"stage{result.index}"
        sceneio.save_gaussians(d / "gaussians.gs", result.gaussians)
        sceneio.save_gaussians(d / "dip.gs", result.dip_gaussians)
        save_weights(d / "generator.dipw", result.weights)
        rec = {"record": "stage", **result.record()}
        (d / MANIFEST).write_bytes(_jsonl([rec]))
        records.append(rec)
        (out / MANIFEST).write_bytes(_jsonl(records))
        print(f"stage {result.index}: sigma={result.sigma:g} gaussians={len(result.gaussians)} "
              + " ".join(f"{k}={v:.3f}" for k, v in result.metrics.items()), file=sys.stderr)

    try:
        fit = run_coarse_to_fine(data, schedule, config, args.seed, on_stage=on_stage,
                                 on_initial=on_initial, evaluator=metrics)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    sceneio.save_gaussians(out / "final.gs", fit.final)
    print(f"wrote {out / 'final.gs'} ({len(fit.final)} gaussians)")
    return 0


def cmd_render(args) -> int:
    scene = _load_scene(args.scene)
    gaussians = sceneio.load_gaussians(args.model)
    cams = scene.test_cameras if args.split == "test" else scene.train_cameras
    if not 0 <= args.view_id < len(cams):
        raise UsageError(f"view-id {args.view_id} out of range: scene has {len(cams)} {args.split} views")
    img = render(gaussians, cams[args.view_id], scene.background).pixels
    sceneio.write_image(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene = _load_scene(args.scene)
    report = sceneio.evaluate(sceneio.load_gaussians(args.model), scene)
    if args.out:
        sceneio.save_report(args.out, report)
    print(report.table())
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(args.seed)
    print(f"{'group':<14} {'max rel err':>12} {'time':>7}  status")
    for r in results:
        print(f"{r.name:<14} {r.error:>12.3e} {r.seconds:>6.2f}s  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)} (tolerance {gradsuite.TOLERANCE:g})")
        return 1
    print(f"all {len(results)} groups below {gradsuite.TOLERANCE:g}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dipgs", description="Sparse-view Gaussian splatting with a deep image prior.")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene and its ground-truth images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--train-views", type=int, default=3)
    p.add_argument("--test-views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="run the coarse-to-fine fit on a scene")
    p.add_argument("--scene", required=True, help="scene directory or scene file")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--config", help="config document (preset < config file < flags)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=int, default=None, help="run only the first N noise levels")
    p.add_argument("--sigma", type=float, nargs="+", default=None, help="noise level per stage")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render one scene view of a model to PPM")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--view-id", type=int, required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="held-out PSNR/SSIM of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("DIPGS_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DIPGS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DIPGS_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dipgs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (sceneio.FormatError, OSError) as exc:
        print(f"dipgs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
