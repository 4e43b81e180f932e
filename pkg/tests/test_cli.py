import json

import numpy as np
import pytest

from snode_dmd import cli, core, model, train
from snode_dmd.core import read_array

SMALL = {"train_config": {"net": {"mode_hidden": [16, 16], "enc_hidden": [12, 12],
                                  "drift_hidden": [8, 8]},
                          "substeps": 2, "window": 4, "batch_size": 4, "L": 2}}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "synth"
    assert run("simulate", "--system", "synthetic", "--seed", 7, "--out", d, "--grid", 16,
               "--T", 12) == 0
    return d


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def trained(data_dir, small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", data_dir, "--out", out, "--epochs", 3,
               "--config", small_cfg) == 0
    return out


def _manifest(d):
    return json.loads((d / cli.RUN_MANIFEST).read_text())


class TestSimulate:
    def test_identical_reruns(self, tmp_path):
        for name in ("a", "b"):
            assert run("simulate", "--system", "synthetic", "--seed", 7, "--out",
                       tmp_path / name, "--T", 5) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for f in files:
            a, b = (tmp_path / "a" / f).read_bytes(), (tmp_path / "b" / f).read_bytes()
            if f == cli.RUN_MANIFEST:
                ma, mb = json.loads(a), json.loads(b)
                for m in (ma, mb):
                    m.pop("wall_time_s"), m.pop("outputs"), m["config"].pop("out")
                assert ma == mb
            else:
                assert a == b, f

    def test_sensor_count(self, tmp_path):
        assert run("simulate", "--system", "synthetic", "--sensor-frac", 0.1,
                   "--out", tmp_path, "--T", 3) == 0
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert len(man["sensor_indices"]) == 102

    def test_unsupported_system(self, tmp_path, capsys):
        assert run("simulate", "--system", "cylinder", "--out", tmp_path) == 2
        assert "unsupported system" in capsys.readouterr().err

    def test_missing_flag(self, tmp_path):
        assert run("simulate", "--out", tmp_path) == 2

    def test_no_command(self):
        assert run() == 2

    def test_realizations(self, tmp_path):
        cfg = tmp_path / "v.json"
        cfg.write_text(json.dumps({"sim_config": {"grid": 16, "dt": 0.01, "save_every": 5}}))
        assert run("simulate", "--system", "vorticity", "--realizations", 2, "--T", 3,
                   "--out", tmp_path / "v", "--config", cfg) == 0
        assert (tmp_path / "v/r000/manifest.json").exists()
        assert (tmp_path / "v/r001/manifest.json").exists()
        assert len(list((tmp_path / "v").glob(cli.RUN_MANIFEST))) == 1
        assert run("simulate", "--system", "synthetic", "--realizations", 2,
                   "--out", tmp_path / "s") == 2

    def test_config_flags_win(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 3, "T": 4}))
        assert run("simulate", "--system", "synthetic", "--config", cfg, "--seed", 5,
                   "--out", tmp_path / "o") == 0
        man = json.loads((tmp_path / "o/manifest.json").read_text())
        assert man["seed"] == 5 and len(man["times"]) == 4

    def test_bad_config_json(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{nope")
        assert run("simulate", "--system", "synthetic", "--config", cfg, "--out", tmp_path) == 2


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "final/manifest.json").exists()
        assert (trained / "best/manifest.json").exists()
        assert (trained / "train_log.csv").exists()
        man = _manifest(trained)
        assert man["command"] == "train" and man["config"]["train_config"]["rank"] == 4

    def test_default_rank(self):
        assert cli.default_rank("synthetic") == 4
        assert cli.default_rank("grayscott") == 8

    @pytest.mark.parametrize("flag", ["--epochs", "--rank", "--batch"])
    def test_zero_is_usage_error(self, data_dir, tmp_path, flag):
        assert run("train", "--data", data_dir, "--out", tmp_path, flag, 0) == 2

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1

    def test_resume_bit_exact(self, data_dir, small_cfg, tmp_path):
        common = ("--data", data_dir, "--epochs", 4, "--config", small_cfg)
        assert run("train", *common, "--out", tmp_path / "full") == 0
        assert run("train", *common, "--out", tmp_path / "part", "--stop-after", 2) == 0
        assert run("train", *common, "--out", tmp_path / "part",
                   "--from", tmp_path / "part/final") == 0
        a = (tmp_path / "full/final/params.bin").read_bytes()
        b = (tmp_path / "part/final/params.bin").read_bytes()
        assert a == b


class TestEval:
    def test_one_step_matches_step(self, trained, data_dir, tmp_path):
        assert run("eval", "--ckpt", trained / "final", "--data", data_dir, "--out", tmp_path,
                   "--metrics", "l1,eigs,modes,portraits", "--horizon", 1) == 0
        rep = json.loads((tmp_path / "metrics.json").read_text())
        assert rep["l1"] > 0 and len(rep["eigs"]["abs_error"]) == 4
        assert 0 <= rep["modes"]["mean_cosine"] <= 1
        ck = train.Checkpoint.load(trained / "final")
        ds = core.load_dataset(data_dir)
        n = len(ds.grid)
        recon = read_array(tmp_path, {"file": "recon.bin", "complex": True,
                                      "shape": [ds.n_snapshots - 1, n]})
        for k in (0, 5):
            pred, _, prop = model.step(ds.observations[k], ds.sensors, ds.times[k], ck.params,
                                       ck.model_cfg)
            assert np.allclose(recon[k, ds.sensor_indices], pred.mean, rtol=1e-10, atol=1e-12)
            full = model.reconstruct_at(prop, ds.grid, ck.params, ck.model_cfg)
            assert np.allclose(recon[k], full.mean, rtol=1e-10, atol=1e-12)
        man = json.loads((tmp_path / "metrics.json").read_text())
        assert man["horizon"] == "1"

    def test_skips_without_gt(self, tmp_path, small_cfg):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"sim_config": {"grid": 20}}))
        assert run("simulate", "--system", "grayscott", "--T", 5, "--out", tmp_path / "gs",
                   "--config", cfg) == 0
        assert run("train", "--data", tmp_path / "gs", "--out", tmp_path / "r", "--epochs", 1,
                   "--rank", 2, "--config", small_cfg) == 0
        assert run("eval", "--ckpt", tmp_path / "r/final", "--data", tmp_path / "gs",
                   "--out", tmp_path / "e", "--metrics", "l1,modes,eigs,traj",
                   "--grid-out", "40x40") == 0
        rep = json.loads((tmp_path / "e/metrics.json").read_text())
        assert set(rep["notes"]) == {"modes", "eigs", "traj"}
        assert rep["grid_out"]["finite"]
        assert (tmp_path / "e/recon_grid.bin").exists()

    def test_unknown_metric(self, trained, data_dir, tmp_path):
        assert run("eval", "--ckpt", trained / "final", "--data", data_dir, "--out", tmp_path,
                   "--metrics", "bogus") == 2

    def test_bad_grid(self, trained, data_dir, tmp_path):
        assert run("eval", "--ckpt", trained / "final", "--data", data_dir, "--out", tmp_path,
                   "--grid-out", "10by10") == 2


class TestBaseline:
    def test_noise_free(self, tmp_path):
        assert run("simulate", "--system", "synthetic", "--noise-sigma", 0, "--out",
                   tmp_path / "d") == 0
        assert run("baseline", "--data", tmp_path / "d", "--out", tmp_path / "b") == 0
        rep = json.loads((tmp_path / "b/baseline.json").read_text())
        assert rep["rank"] == 4 and rep["mu_max_abs_error"] < 1e-6

    def test_rank_zero(self, data_dir, tmp_path):
        assert run("baseline", "--data", data_dir, "--out", tmp_path, "--rank", 0) == 2

    def test_rank_clamped(self, tmp_path, capsys):
        assert run("simulate", "--system", "synthetic", "--noise-sigma", 0, "--T", 4,
                   "--out", tmp_path / "d") == 0
        assert run("baseline", "--data", tmp_path / "d", "--out", tmp_path / "b",
                   "--rank", 8) == 0
        assert "reduced" in capsys.readouterr().err


def test_version(capsys):
    assert run("--version") == 0
    assert "0.1.0" in capsys.readouterr().out
