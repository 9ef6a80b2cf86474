import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from helpers import write_toy_dataset
from splatstream import modelstore
from splatstream.cli import main, model_hash
from splatstream.core import SplatCloud
from splatstream.imgio import load_png
from splatstream.trainer import TrainConfig

FAST_CFG = dict(iterations=120, densify_start=40, densify_stop=100,
                densify_interval=30, opacity_reset_interval=0,
                sh_degree_promote_interval=50, max_sh_degree=1,
                position_lr_max_steps=120)


def write_cfg(path, **overrides):
    cfg = dict(FAST_CFG)
    cfg.update(overrides)
    TrainConfig(**cfg).to_file(path)
    return str(path)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    rng = np.random.default_rng(200)
    colmap, images, gt, views = write_toy_dataset(root, rng, n_gaussians=25,
                                                  n_views=6, size=48)
    return {"root": root, "colmap": colmap, "images": images}


class TestTrainCommand:
    def test_deterministic_model_hash(self, toy, tmp_path):
        cfg = write_cfg(tmp_path / "t.cfg", seed=5)
        out1 = tmp_path / "a.splm"
        out2 = tmp_path / "b.splm"
        for out in (out1, out2):
            code = main(["train", "--colmap-dir", toy["colmap"],
                         "--images-dir", toy["images"], "--out", str(out),
                         "--config", cfg])
            assert code == 0
        assert model_hash(out1) == model_hash(out2)

    def test_missing_points_file_exit_2(self, toy, tmp_path, capsys):
        broken = tmp_path / "broken"
        broken.mkdir()
        for name in ("cameras.txt", "images.txt"):
            (broken / name).write_text(
                open(os.path.join(toy["colmap"], name)).read())
        code = main(["train", "--colmap-dir", str(broken),
                     "--images-dir", toy["images"],
                     "--out", str(tmp_path / "x.splm")])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error: input:")
        assert "points3D.txt" in err

    def test_report_written(self, toy, tmp_path):
        cfg = write_cfg(tmp_path / "t.cfg", seed=1, iterations=60,
                        densify_start=20, densify_stop=50)
        report = tmp_path / "metrics.txt"
        code = main(["train", "--colmap-dir", toy["colmap"],
                     "--images-dir", toy["images"],
                     "--out", str(tmp_path / "m.splm"),
                     "--config", cfg, "--report", str(report)])
        assert code == 0
        lines = report.read_text().strip().splitlines()
        assert len(lines) == 6
        assert all(line.startswith("view=") for line in lines)


class TestRenderCommand:
    def test_empty_model_renders_background(self, toy, tmp_path):
        empty = SplatCloud(sh_degree=0)
        empty.revision = 1
        model = tmp_path / "empty.splm"
        modelstore.save(empty, model)
        out_dir = tmp_path / "renders"
        code = main(["render", "--model", str(model),
                     "--colmap-dir", toy["colmap"],
                     "--out-dir", str(out_dir),
                     "--background", "0.25,0.5,0.75"])
        assert code == 0
        images = sorted(os.listdir(out_dir))
        assert len(images) == 6
        img = load_png(out_dir / images[0])
        assert np.allclose(img[0, 0], [0.25, 0.5, 0.75], atol=1 / 255)

    def test_renders_byte_identical(self, toy, tmp_path):
        cfg = write_cfg(tmp_path / "t.cfg", seed=2, iterations=40,
                        densify_start=10, densify_stop=30)
        model = tmp_path / "m.splm"
        main(["train", "--colmap-dir", toy["colmap"],
              "--images-dir", toy["images"], "--out", str(model),
              "--config", cfg])
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            assert main(["render", "--model", str(model),
                         "--colmap-dir", toy["colmap"],
                         "--out-dir", str(out)]) == 0
        for name in os.listdir(out1):
            b1 = (out1 / name).read_bytes()
            b2 = (out2 / name).read_bytes()
            assert b1 == b2


class TestEvalCommand:
    def test_summary_roundtrip(self, tmp_path, capsys):
        report = tmp_path / "r.txt"
        report.write_text("view=a psnr=30.0 ssim=0.9\n"
                          "view=b psnr=40.0 ssim=0.8\n")
        code = main(["eval", "--mode", "summary", "--report", str(report)])
        assert code == 0
        out = capsys.readouterr().out
        assert "mean_psnr=35.000" in out
        assert "mean_ssim=0.8500" in out

    def test_trajectory_self_is_zero(self, toy, capsys):
        code = main(["eval", "--mode", "trajectory",
                     "--est-colmap", toy["colmap"],
                     "--ref-colmap", toy["colmap"]])
        assert code == 0
        out = capsys.readouterr().out
        assert "ate_rmse=0.000000" in out

    def test_missing_args_exit_2(self, capsys):
        assert main(["eval", "--mode", "trajectory"]) == 2


class TestServeCommand:
    def test_conformance_against_served_model(self, toy, tmp_path):
        cloud = SplatCloud.from_arrays(
            positions=np.random.default_rng(1).normal(size=(20, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (20, 1)),
            log_scales=np.full((20, 3), -2.0),
            sh=np.random.default_rng(2).normal(size=(20, 1, 3)),
            opacity_logits=np.zeros(20), sh_degree=0)
        cloud.revision = 3
        model = tmp_path / "serve.splm"
        modelstore.save(cloud, model)
        code = main(["serve", "--model", str(model),
                     "--address", "127.0.0.1:0", "--conformance"])
        assert code == 0


class TestLiveCommand:
    def test_sigterm_leaves_loadable_model(self, toy, tmp_path):
        from splatstream.imgio import png_bytes
        from splatstream.ingest import (FramePayload, Modality, TimedSample,
                                        write_capture)

        capture = tmp_path / "capture"
        rng = np.random.default_rng(201)
        samples = [TimedSample(Modality.FRAME, int(i * 0.2e9),
                               FramePayload(i, png_bytes(rng.random((16, 16, 3)))))
                   for i in range(50)]
        write_capture(capture, samples)

        gt_model = tmp_path / "seed.splm"
        cloud = SplatCloud.from_arrays(
            positions=rng.normal(size=(10, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (10, 1)),
            log_scales=np.full((10, 3), -2.0),
            sh=rng.normal(size=(10, 1, 3)),
            opacity_logits=np.zeros(10), sh_degree=0)
        cloud.revision = 1
        modelstore.save(cloud, gt_model)
        out_model = tmp_path / "live_out.splm"

        proc = subprocess.Popen(
            [sys.executable, "-m", "splatstream.cli", "live",
             "--listen", "127.0.0.1:0", "--model", str(gt_model),
             "--out", str(out_model), "--passthrough"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
        try:
            line = proc.stdout.readline()
            assert "ingest on" in line
            address = line.split("ingest on ")[1].split(",")[0].strip()
            from splatstream.ingest import restream
            restream(capture, address, rate_multiplier=20.0)
            time.sleep(0.5)
            proc.send_signal(signal.SIGTERM)
            proc.wait(timeout=10)
        finally:
            if proc.poll() is None:
                proc.kill()
        assert out_model.exists()
        again = modelstore.load(out_model)
        assert len(again) == 10


class TestConfigPrecedence:
    def test_flag_overrides_env_overrides_file(self, tmp_path, monkeypatch):
        from splatstream.cli import _load_train_config, build_parser
        cfg = write_cfg(tmp_path / "t.cfg", seed=1, iterations=10,
                        densify_start=2, densify_stop=8, densify_interval=4)
        monkeypatch.setenv("SPST_ITERATIONS", "20")
        args = build_parser().parse_args(
            ["train", "--colmap-dir", "x", "--images-dir", "y", "--out", "z",
             "--config", cfg, "--iterations", "30"])
        assert _load_train_config(args).iterations == 30

    def test_env_overrides_file(self, toy, tmp_path, monkeypatch):
        from splatstream.cli import _load_train_config, build_parser
        cfg = write_cfg(tmp_path / "t.cfg", seed=1, iterations=10,
                        densify_start=2, densify_stop=8)
        monkeypatch.setenv("SPST_SEED", "77")
        args = build_parser().parse_args(
            ["train", "--colmap-dir", "x", "--images-dir", "y", "--out", "z",
             "--config", cfg])
        parsed = _load_train_config(args)
        assert parsed.seed == 77
        assert parsed.iterations == 10

    def test_bind_env_precedence(self, monkeypatch):
        from splatstream.ingest import resolve_bind_address
        monkeypatch.setenv("SPST_BIND", "127.0.0.1:9000")
        assert resolve_bind_address(None) == ("127.0.0.1", 9000)
        assert resolve_bind_address("127.0.0.1:9001") == ("127.0.0.1", 9001)
        monkeypatch.delenv("SPST_BIND")
        assert resolve_bind_address(None)[1] == 7504
