import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from fluidgn import cli, net, sim
from fluidgn.config import ConfigError, RunConfig, config_from_dict, load_config, snapshot

GOLDEN = Path(__file__).parent / "golden" / "default_config.json"


class TestConfig:
    def test_defaults_match_golden_snapshot(self):
        got = snapshot(RunConfig())
        want = json.loads(GOLDEN.read_text())
        assert got == want

    def test_reference_constants(self):
        cfg = RunConfig()
        assert cfg.graph.r_l == 0.12
        assert cfg.graph.r_ol == 0.19
        assert cfg.net.num_blocks == 10
        assert cfg.net.latent == 128 and cfg.net.hidden == 128
        assert cfg.train.noise_sigma == 0.00067
        assert cfg.train.lr_start == 1e-4 and cfg.train.lr_end == 1e-6
        assert cfg.train.batch_size == 20

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            config_from_dict({"train": {"learning_rate": 0.1}})

    def test_unknown_root_key(self):
        with pytest.raises(ConfigError, match="trian"):
            config_from_dict({"trian": {}})

    def test_invalid_value_reported_with_section(self):
        with pytest.raises(ConfigError, match="train"):
            config_from_dict({"train": {"lr_start": 1e-9}})

    def test_yaml_roundtrip(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 9\ngraph: {r_l: 0.2}\nnet: {num_blocks: 3}\n")
        cfg = load_config(path)
        assert cfg.seed == 9
        assert cfg.graph.r_l == 0.2
        assert cfg.net.num_blocks == 3
        assert cfg.graph.r_ol == 0.19  # untouched default

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: [unclosed\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(path)


TINY = {
    "seed": 3,
    "datagen": {
        "train_episodes": 2,
        "test_episodes": 1,
        "frames": 16,
        "n_particles": 27,
        "calibration_samples": 1,
    },
    "net": {"num_blocks": 1, "latent": 12, "hidden": 12},
    "train": {"max_steps": 1200, "batch_size": 1, "norm_sample_windows": 12},
}


def run_cli(*args):
    return cli.main(list(args))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One tiny datagen + short training shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    assert run_cli("datagen", "--config", str(cfg_path), "--out", str(root / "data")) == 0
    assert (
        run_cli(
            "train", "--config", str(cfg_path), "--data", str(root / "data/manifest.json"),
            "--out", str(root / "run"), "--steps", "60", "--save-every", "30",
        )
        == 0
    )
    return root, cfg_path


class TestDatagenCmd:
    def test_outputs(self, tiny_run):
        root, _ = tiny_run
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        assert len(manifest["episodes"]) == 3
        assert manifest["config"]["graph"]["r_l"] == 0.12  # snapshot embedded
        assert (root / "data" / "calibration_r_ol.csv").exists()
        for entry in manifest["episodes"]:
            assert (root / "data" / entry["file"]).exists()
            for rel in entry["meshes"]:
                assert (root / "data" / rel).exists()

    def test_deterministic_regeneration(self, tiny_run, tmp_path):
        root, cfg_path = tiny_run
        assert run_cli("datagen", "--config", str(cfg_path), "--out", str(tmp_path / "d2")) == 0
        a = json.loads((root / "data" / "manifest.json").read_text())
        b = json.loads((tmp_path / "d2" / "manifest.json").read_text())
        assert a == b
        fa = (root / "data" / "ep_000.fltj").read_bytes()
        fb = (tmp_path / "d2" / "ep_000.fltj").read_bytes()
        assert fa == fb

    def test_invalid_scenario_kind_is_config_error(self, tmp_path, capsys):
        bad = dict(TINY)
        bad["datagen"] = dict(TINY["datagen"], scenario_mix={"wobble": 1.0})
        cfg_path = tmp_path / "bad.yaml"
        cfg_path.write_text(yaml.safe_dump(bad))
        code = run_cli("datagen", "--config", str(cfg_path), "--out", str(tmp_path / "x"))
        assert code == cli.EXIT_CONFIG
        assert "wobble" in capsys.readouterr().err


class TestTrainCmd:
    def test_metrics_monotone_and_checkpoint_loads(self, tiny_run):
        root, _ = tiny_run
        rows = (root / "run" / "metrics.csv").read_text().strip().splitlines()[1:]
        steps = [int(r.split(",")[0]) for r in rows]
        assert steps == sorted(steps) and len(steps) == 60
        model = sim.load_model(root / "run" / "checkpoint.fgn")
        assert model.config["step"] == 60
        assert model.norm.frozen

    def test_loss_decreases_on_overfit(self, tmp_path):
        # single-episode overfit run: final loss well under a tenth of initial
        cfg = dict(TINY)
        cfg["datagen"] = dict(TINY["datagen"], train_episodes=1, test_episodes=0)
        cfg["net"] = {"num_blocks": 2, "latent": 24, "hidden": 24}
        cfg["train"] = {"max_steps": 4000, "batch_size": 1, "norm_sample_windows": 10,
                        "noise_sigma": 0.0, "lr_end": 2.0e-5}
        cfg_path = tmp_path / "overfit.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        assert run_cli("datagen", "--config", str(cfg_path), "--out", str(tmp_path / "d")) == 0
        assert (
            run_cli(
                "train", "--config", str(cfg_path), "--data",
                str(tmp_path / "d/manifest.json"), "--out", str(tmp_path / "run"),
                "--steps", "4000",
            )
            == 0
        )
        rows = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()[1:]
        losses = [float(r.split(",")[1]) for r in rows]
        initial = np.mean(losses[:30])
        final = np.mean(losses[-30:])
        assert final < 0.1 * initial

    def test_resume_continues_step_counter(self, tiny_run, tmp_path):
        root, cfg_path = tiny_run
        out = tmp_path / "resume"
        shutil.copytree(root / "run", out)
        assert (
            run_cli(
                "train", "--config", str(cfg_path), "--data",
                str(root / "data/manifest.json"), "--out", str(out), "--steps", "90",
                "--resume", str(out / "checkpoint.fgn"),
            )
            == 0
        )
        model = sim.load_model(out / "checkpoint.fgn")
        assert model.config["step"] == 90
        rows = (out / "metrics.csv").read_text().strip().splitlines()[1:]
        assert int(rows[-1].split(",")[0]) == 89

    def test_resume_matches_uninterrupted(self, tiny_run, tmp_path):
        # batch sampling is keyed on (seed, global step), so stop-and-resume
        # reproduces the uninterrupted parameter bytes exactly
        root, cfg_path = tiny_run
        straight = tmp_path / "straight"
        assert (
            run_cli(
                "train", "--config", str(cfg_path), "--data",
                str(root / "data/manifest.json"), "--out", str(straight), "--steps", "90",
            )
            == 0
        )
        resumed = tmp_path / "resumed"
        shutil.copytree(root / "run", resumed)  # trained to step 60
        assert (
            run_cli(
                "train", "--config", str(cfg_path), "--data",
                str(root / "data/manifest.json"), "--out", str(resumed), "--steps", "90",
                "--resume", str(resumed / "checkpoint.fgn"),
            )
            == 0
        )
        _, t_straight = net.read_tensor_file(straight / "checkpoint.fgn")
        _, t_resumed = net.read_tensor_file(resumed / "checkpoint.fgn")
        for key in t_straight:
            if key.startswith("model."):
                assert np.array_equal(t_straight[key], t_resumed[key]), key

    def test_missing_data_path(self, tmp_path, capsys):
        code = run_cli(
            "train", "--data", str(tmp_path / "nope/manifest.json"), "--out", str(tmp_path)
        )
        assert code == cli.EXIT_IO
        assert "nope" in capsys.readouterr().err


class TestRolloutEvalCmd:
    def test_rollout_files(self, tiny_run, tmp_path):
        root, _ = tiny_run
        out = tmp_path / "ro"
        assert (
            run_cli(
                "rollout", "--checkpoint", str(root / "run/checkpoint.fgn"),
                "--data", str(root / "data/manifest.json"), "--split", "test",
                "--out", str(out),
            )
            == 0
        )
        traj = sim.load_trajectory(out / "rollout_000.fltj")
        assert traj.num_frames == TINY["datagen"]["frames"]
        assert traj.meta["status"] == "ok"

    def test_eval_table(self, tiny_run, tmp_path):
        root, _ = tiny_run
        out = tmp_path / "ev"
        assert (
            run_cli(
                "eval", "--checkpoint", str(root / "run/checkpoint.fgn"),
                "--data", str(root / "data/manifest.json"), "--split", "test",
                "--out", str(out), "--curves",
            )
            == 0
        )
        lines = (out / "chamfer.csv").read_text().strip().splitlines()
        assert lines[0] == "episode,chamfer,status"
        per_episode = [line for line in lines[1:] if not line.startswith("aggregate")]
        values = [float(line.split(",")[1]) for line in per_episode]
        agg = [line for line in lines if line.startswith("aggregate")][0]
        assert float(agg.split(",")[1]) == pytest.approx(np.mean(values), rel=1e-6)
        curve = (out / "curve_000.csv").read_text().strip().splitlines()
        assert len(curve) == TINY["datagen"]["frames"] + 1  # header + rows

    def test_radii_mismatch_warns(self, tiny_run, tmp_path, capsys):
        root, _ = tiny_run
        model = sim.load_model(root / "run/checkpoint.fgn")
        model.graph_cfg.r_l = 0.09
        bad_ckpt = tmp_path / "bad.fgn"
        sim.save_model(bad_ckpt, model, extra={"step": 0})
        run_cli(
            "rollout", "--checkpoint", str(bad_ckpt),
            "--data", str(root / "data/manifest.json"), "--split", "test",
            "--out", str(tmp_path / "o"),
        )
        assert "radii differ" in capsys.readouterr().err


class TestInspectCmd:
    def test_checkpoint_header(self, tiny_run, capsys):
        root, _ = tiny_run
        assert run_cli("inspect", str(root / "run/checkpoint.fgn")) == 0
        out = capsys.readouterr().out
        assert "checkpoint container" in out and "step" in out

    def test_trajectory_header(self, tiny_run, capsys):
        root, _ = tiny_run
        assert run_cli("inspect", str(root / "data/ep_000.fltj")) == 0
        out = capsys.readouterr().out
        assert "trajectory" in out and "N=27" in out

    def test_unknown_file(self, tmp_path, capsys):
        p = tmp_path / "x.bin"
        p.write_bytes(b"ABCD1234")
        assert run_cli("inspect", str(p)) == cli.EXIT_IO


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "fluidgn.cli", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "datagen" in proc.stdout and "mpc" in proc.stdout
