import json
import struct
from pathlib import Path

import numpy as np
import pytest

from miru import config as cfgmod
from miru.cli import main
from miru.network import load_checkpoint

CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture
def idx_dir(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    for prefix, n in (("train", 96), ("t10k", 48)):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        images = rng.integers(0, 60, (n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(labels):
            images[i, 2 * c] = 255
        (d / f"{prefix}-images-idx3-ubyte").write_bytes(
            struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes())
        (d / f"{prefix}-labels-idx1-ubyte").write_bytes(
            struct.pack(">II", 0x801, n) + labels.tobytes())
    return d


def small(out, *extra):
    return ["--set", "model.n_h=8", "--set", "train.batch_size=16", "--out", str(out), *extra]


class TestConfig:
    def test_defaults_validate(self):
        cfg = cfgmod.load()
        assert cfg["model"]["cell"] == "miru2" and cfg["optimizer"]["kind"] == "rmsprop"

    @pytest.mark.parametrize("name", ["mnist", "imdb", "dil_a", "dil_b", "dil_c", "dil_d"])
    def test_shipped_configs(self, name):
        cfgmod.load(CONFIGS / f"{name}.toml")

    def test_mnist_config_values(self):
        cfg = cfgmod.load(CONFIGS / "mnist.toml")
        m = cfgmod.model_config(cfg)
        assert (m.n_x, m.n_h, m.n_y, m.kind.value, m.sparsity) == (28, 128, 10, "miru2", None)
        c = cfgmod.coeff_spec(cfg)
        assert (c.lam, c.beta, c.random) == (0.8, 0.55, False)
        assert cfg["train"]["epochs"] == 15 and cfg["train"]["batch_size"] == 32

    def test_dil_d_values(self):
        cfg = cfgmod.load(CONFIGS / "dil_d.toml")
        assert cfgmod.model_config(cfg).active_units == 64
        assert cfg["continual"]["k"] == 1 and cfg["optimizer"]["kind"] == "adam"

    def test_unknown_key_and_section(self, tmp_path):
        with pytest.raises(cfgmod.ConfigError, match="model.bogus"):
            cfgmod.load(overrides=["model.bogus=1"])
        (tmp_path / "c.toml").write_text("[extras]\na = 1\n")
        with pytest.raises(cfgmod.ConfigError, match="extras"):
            cfgmod.load(tmp_path / "c.toml")

    def test_type_checks(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(overrides=["model.n_h=true"])
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(overrides=["model.n_h=1.5"])
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(overrides=["optimizer.kind=lbfgs"])
        assert cfgmod.load(overrides=["optimizer.lr=1"])["optimizer"]["lr"] == 1.0

    def test_range_checks(self):
        for bad in ("model.sparsity=1.0", "continual.k=64", "train.train_fraction=0",
                    "coefficients.update=1.2", "model.cell=lstm"):
            with pytest.raises(cfgmod.ConfigError):
                cfgmod.load(overrides=[bad])

    def test_override_parsing(self):
        assert cfgmod.parse_override("continual.seeds=[1, 2]") == ("continual", "seeds", [1, 2])
        assert cfgmod.parse_override("data.dir=/x/y") == ("data", "dir", "/x/y")
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.parse_override("nokey")

    def test_hash_stable_and_sensitive(self):
        a = cfgmod.load()
        assert cfgmod.config_hash(a) == cfgmod.config_hash(cfgmod.load())
        assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.load(overrides=["train.seed=1"]))
        assert cfgmod.config_hash(a) == cfgmod.config_hash(cfgmod.load(overrides=["output.dir=x"]))


class TestTrainCommand:
    def test_runs_and_writes_outputs(self, idx_dir, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--data", str(idx_dir),
                     *small(out, "--set", "train.epochs=2")]) == 0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(r)["epoch"] for r in lines] == [0, 1, 2]
        for name in ("checkpoint.bin", "optimizer.bin", "summary.csv", "timings.jsonl"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert {"config_hash", "seeds", "code_version"} <= set(manifest)
        p, m, extra = load_checkpoint(out / "checkpoint.bin")
        assert m.n_h == 8 and extra["epochs"] == 2

    def test_zero_epochs_initial_record_only(self, idx_dir, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--data", str(idx_dir),
                     *small(out, "--set", "train.epochs=0")]) == 0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["epoch"] == 0

    def test_same_seed_identical_metrics(self, idx_dir, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--data", str(idx_dir),
                         *small(tmp_path / name, "--set", "train.epochs=2")]) == 0
        for f in ("metrics.jsonl", "checkpoint.bin", "optimizer.bin", "summary.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert ma["config_hash"] == mb["config_hash"]
        assert ma["code_version"] == mb["code_version"]

    def test_data_from_environment(self, idx_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("MIRU_DATA", str(idx_dir))
        assert main(["train", *small(tmp_path / "r", "--set", "train.epochs=0")]) == 0

    def test_preflight_errors(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("MIRU_DATA", raising=False)
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2
        assert main(["train", "--set", "model.whatever=1"]) == 2
        assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
        assert "error" in capsys.readouterr().err

    def test_eval(self, idx_dir, tmp_path):
        out = tmp_path / "run"
        main(["train", "--data", str(idx_dir), *small(out, "--set", "train.epochs=1")])
        assert main(["eval", str(out / "checkpoint.bin"), "--data", str(idx_dir),
                     "--out", str(tmp_path / "ev")]) == 0
        res = json.loads((tmp_path / "ev" / "eval.json").read_text())
        last = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
        assert res["accuracy"] == last["test_acc"]
        assert main(["eval", str(tmp_path / "nope.bin"), "--data", str(idx_dir)]) == 2


class TestClCommand:
    def test_single_task_matrix(self, idx_dir, tmp_path):
        out = tmp_path / "cl"
        assert main(["cl", "--data", str(idx_dir), *small(out), "--set", "continual.tasks=1",
                     "--set", "train.epochs=1", "--set", "continual.seeds=[0]"]) == 0
        R = np.loadtxt(out / "matrix_seed0.csv", delimiter=",", ndmin=2)
        assert R.shape == (1, 1)
        assert (out / "log.jsonl").exists() and (out / "summary.json").exists()

    def test_replay_and_inhibition(self, idx_dir, tmp_path):
        out = tmp_path / "cl"
        assert main(["cl", "-c", str(CONFIGS / "dil_d.toml"), "--data", str(idx_dir),
                     *small(out), "--set", "continual.tasks=2", "--set", "train.epochs=1",
                     "--set", "continual.seeds=[0, 1]"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seeds"] == [0, 1] and len(summary["final_mean"]) == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["capacity_per_task"] == 6          # k=1 x 6 batches
        rows = [json.loads(r) for r in (out / "log.jsonl").read_text().splitlines()]
        assert all({"seed", "task", "epoch"} <= set(r) for r in rows)


class TestGradcheckCommand:
    def test_default_suite_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "PASS: 15/15" in capsys.readouterr().out

    def test_corrupted_gradient_named(self, capsys):
        assert main(["gradcheck", "--kinds", "gru", "--seeds", "0",
                     "--corrupt", "cell.z.U"]) == 1
        assert "failing: cell.z.U" in capsys.readouterr().out

    def test_single_step_edge(self, tmp_path):
        assert main(["gradcheck", "--size", "5x7x3x1x2", "--seeds", "0",
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "manifest.json").exists()

    def test_with_inhibition(self):
        assert main(["gradcheck", "--sparsity", "0.5", "--seeds", "0,1"]) == 0


class TestResourcesCommand:
    def test_reference_size(self, capsys):
        assert main(["resources", "--json"]) == 0
        reps = json.loads(capsys.readouterr().out)
        assert [r["kind"] for r in reps] == ["gru", "miru1", "miru2"]
        refs = [r["reference_deltas"]["parameters"]["reference"] for r in reps]
        assert refs == [61_696, 41_472, 21_386]

    def test_custom_size_text(self, capsys, tmp_path):
        assert main(["resources", "--size", "10x20x3", "--out", str(tmp_path)]) == 0
        assert "10x20x3" in capsys.readouterr().out
        reps = json.loads((tmp_path / "resources.json").read_text())
        assert reps[0]["parameters"] > reps[1]["parameters"] > reps[2]["parameters"]

    def test_empty_list(self, capsys):
        assert main(["resources", "--models", ""]) == 0
        assert "no models" in capsys.readouterr().out


class TestGateHistCommand:
    def test_untrained_gru(self, idx_dir, tmp_path):
        out = tmp_path / "gh"
        assert main(["gate-hist", "--data", str(idx_dir), "--set", "model.cell=gru",
                     "--set", "model.n_h=8", "--out", str(out), "--samples", "10"]) == 0
        rows = (out / "gate_hist_z.csv").read_text().splitlines()
        assert len(rows) == 51
        assert sum(int(r.split(",")[-1]) for r in rows[1:]) == 8 * 28 * 10

    def test_wrong_kind_is_config_error(self, idx_dir, tmp_path):
        assert main(["gate-hist", "--data", str(idx_dir), "--out", str(tmp_path)]) == 2
