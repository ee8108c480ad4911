import json
import subprocess
import sys

import numpy as np
import pytest

from dipgs import cli, sceneio

TINY_FLAGS = ["--iters-init", "20", "--iters-cd", "10", "--iters-scale", "10", "--iters-dip", "5",
              "--iters-post", "5", "--init-count", "30", "--max-gaussians", "80", "--densify-from", "10",
              "--densify-interval", "10"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert cli.main(["-q", "synth", "--seed", "2", "--gaussians", "20", "--train-views", "2",
                     "--test-views", "2", "--size", "12", "--out", str(out)]) == 0
    return out


def fit(scene_dir, out, *extra):
    return cli.main(["-q", "fit", "--scene", str(scene_dir), "--out", str(out), "--seed", "1",
                     "--sigma", "0.02", "0.01", *TINY_FLAGS, *extra])


@pytest.fixture(scope="module")
def run_dir(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert fit(scene_dir, out) == 0
    return out


class TestSynth:
    def test_writes_scene_and_images(self, tmp_path):
        assert cli.main(["-q", "synth", "--seed", "0", "--gaussians", "10", "--size", "8",
                         "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["scene.json"] + [f"test_{i:03d}.ppm" for i in range(8)] + [
            f"train_{i:03d}.ppm" for i in range(3)]
        scene = sceneio.load_scene(tmp_path / "scene.json")
        img = sceneio.read_image(tmp_path / "train_001.ppm")
        truth = sceneio.render_truth(scene, scene.train_cameras)[1]
        assert np.abs(img - truth).max() <= 1 / 510 + 1e-12

    def test_repeatable_bytes(self, tmp_path):
        for d in ("a", "b"):
            cli.main(["-q", "synth", "--seed", "3", "--gaussians", "10", "--size", "8",
                      "--out", str(tmp_path / d)])
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_zero_train_views(self, tmp_path, capsys):
        assert cli.main(["synth", "--train-views", "0", "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err


class TestFit:
    def test_layout(self, run_dir):
        names = {p.name for p in run_dir.iterdir()}
        assert {"init.gs", "final.gs", "manifest.jsonl", "stage1", "stage2"} <= names
        for k in (1, 2):
            assert {p.name for p in (run_dir / f"stage{k}").iterdir()} == {
                "gaussians.gs", "dip.gs", "generator.dipw", "manifest.jsonl"}
        final = sceneio.load_gaussians(run_dir / "final.gs")
        stage2 = sceneio.load_gaussians(run_dir / "stage2" / "gaussians.gs")
        assert np.array_equal(final.means, stage2.means)

    def test_manifest(self, run_dir):
        lines = [json.loads(x) for x in (run_dir / "manifest.jsonl").read_text().splitlines()]
        assert lines[0]["record"] == "run" and lines[0]["sigmas"] == [0.02, 0.01]
        assert lines[0]["config"]["iters_dip"] == 5 and lines[0]["seed"] == 1
        assert [r["stage"] for r in lines[1:]] == [0, 1, 2]
        assert set(lines[2]["metrics"]) == {"psnr", "ssim"}
        assert len(lines[2]["losses"]["dip"]) == 5

    def test_deterministic(self, scene_dir, run_dir, tmp_path):
        assert fit(scene_dir, tmp_path) == 0
        for name in ("final.gs", "manifest.jsonl", "stage1/generator.dipw"):
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()

    def test_refuses_existing_run(self, scene_dir, run_dir, capsys):
        before = (run_dir / "final.gs").read_bytes()
        assert fit(scene_dir, run_dir) == 2
        assert "--force" in capsys.readouterr().err
        assert (run_dir / "final.gs").read_bytes() == before

    def test_force_replaces_only_owned(self, scene_dir, tmp_path):
        (tmp_path / "stage9").mkdir()
        (tmp_path / "notes.txt").write_text("keep")
        assert fit(scene_dir, tmp_path, "--stages", "1", "--force") == 0
        assert (tmp_path / "notes.txt").read_text() == "keep"
        assert not (tmp_path / "stage9").exists() and not (tmp_path / "stage2").exists()

    @pytest.mark.parametrize("extra", [["--sigma", "0.01", "0.02"], ["--stages", "0"], ["--stages", "5"],
                                       ["--dominance=-1"]])
    def test_bad_configuration(self, scene_dir, tmp_path, extra):
        assert fit(scene_dir, tmp_path, *extra) == 2

    def test_unknown_preset(self, scene_dir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            fit(scene_dir, tmp_path, "--preset", "nerf")
        assert exc.value.code == 2

    def test_missing_scene(self, tmp_path):
        assert cli.main(["-q", "fit", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


class TestConfigResolution:
    def args(self, *argv):
        return cli.build_parser().parse_args(["fit", "--scene", "s", "--out", "o", *argv])

    def test_preset_default(self):
        name, cfg, sched = cli.resolve_config(self.args())
        assert name == "synthetic" and len(sched) == 4

    def test_precedence(self, tmp_path):
        doc = {"format": "dipgs-config", "version": 1, "preset": "dtu",
               "config": {"iters_dip": 11, "lr_mu": (1e-4).hex(), "gamma": 0.5}, "sigmas": [0.03, 0.01]}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        name, cfg, sched = cli.resolve_config(self.args("--config", str(path), "--gamma", "0.25"))
        assert name == "dtu" and cfg.delta == 20.0          # from the preset
        assert cfg.iters_dip == 11 and cfg.lr_mu == 1e-4     # from the file
        assert cfg.gamma == 0.25                             # flag wins
        assert sched.sigmas == (0.03, 0.01)
        name, cfg, _ = cli.resolve_config(self.args("--config", str(path), "--preset", "blender"))
        assert name == "blender" and cfg.iters_dip == 11

    def test_stages_truncates(self):
        _, _, sched = cli.resolve_config(self.args("--stages", "2"))
        assert sched.sigmas == (0.0333, 0.01)

    def test_bool_flag(self):
        _, cfg, _ = cli.resolve_config(self.args("--no-init-means"))
        assert cfg.init_means is False


class TestRenderEval:
    def test_eval_truth(self, scene_dir, tmp_path, capsys):
        scene = sceneio.load_scene(scene_dir / "scene.json")
        sceneio.save_gaussians(tmp_path / "truth.gs", scene.truth)
        assert cli.main(["eval", "--model", str(tmp_path / "truth.gs"), "--scene", str(scene_dir),
                         "--out", str(tmp_path / "r.json")]) == 0
        assert "99.000" in capsys.readouterr().out
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["psnr"] == [99.0, 99.0]

    def test_render_matches_truth_image(self, scene_dir, tmp_path):
        scene = sceneio.load_scene(scene_dir / "scene.json")
        sceneio.save_gaussians(tmp_path / "truth.gs", scene.truth)
        assert cli.main(["-q", "render", "--model", str(tmp_path / "truth.gs"), "--scene", str(scene_dir),
                         "--view-id", "1", "--out", str(tmp_path / "v.ppm")]) == 0
        assert (tmp_path / "v.ppm").read_bytes() == (scene_dir / "test_001.ppm").read_bytes()

    def test_render_index_error(self, scene_dir, run_dir, tmp_path, capsys):
        assert cli.main(["render", "--model", str(run_dir / "final.gs"), "--scene", str(scene_dir),
                         "--view-id", "5", "--out", str(tmp_path / "x.ppm")]) == 2
        assert "out of range" in capsys.readouterr().err

    def test_corrupt_model(self, scene_dir, tmp_path):
        (tmp_path / "bad.gs").write_text("{")
        assert cli.main(["-q", "eval", "--model", str(tmp_path / "bad.gs"), "--scene", str(scene_dir)]) == 1


def test_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "generator" in out and "FAIL" not in out


def test_bad_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv("DIPGS_THREADS", "zero")
    assert cli.main(["-q", "synth", "--out", str(tmp_path), "--size", "4", "--gaussians", "2"]) == 2


def test_console_script_module():
    proc = subprocess.run([sys.executable, "-m", "dipgs.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
