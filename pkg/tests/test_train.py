import filecmp
import math

import numpy as np
import pytest

from snode_dmd import sim, train
from snode_dmd.model import AUTOREGRESSIVE, TEACHER
from snode_dmd.train import TrainConfig

SMALL_NET = {"mode_hidden": [16, 16], "enc_hidden": [12, 12], "drift_hidden": [8, 8]}


@pytest.fixture(scope="module")
def small_ds():
    return sim.gen_synthetic(sim.SynthConfig(grid=16, T=16), seed=0)


def small_cfg(**kw):
    base = dict(epochs=6, batch_size=4, window=4, L=2, substeps=2, net=dict(SMALL_NET))
    base.update(kw)
    return TrainConfig(**base)


class TestCurriculum:
    def test_endpoints(self):
        assert train.curriculum_epsilon(0, 300) == 1.0
        assert train.curriculum_epsilon(299, 300) == 0.0

    def test_midpoint(self):
        assert train.curriculum_epsilon(50, 101) == 0.5

    def test_single_epoch(self):
        assert train.curriculum_epsilon(0, 1) == 1.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            train.curriculum_epsilon(5, 5)

    def test_select_extremes(self):
        rng = np.random.default_rng(0)
        assert all(train.select_mode(1.0, rng) == TEACHER for _ in range(200))
        assert all(train.select_mode(0.0, rng) == AUTOREGRESSIVE for _ in range(200))

    def test_select_binomial(self):
        rng = np.random.default_rng(3)
        frac = np.mean([train.select_mode(0.5, rng) == TEACHER for _ in range(10_000)])
        assert abs(frac - 0.5) <= 0.02


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"rank": 0}, {"batch_size": 0},
                                    {"window": 1}, {"val_fraction": 1.0},
                                    {"mode_weight_decay": -1.0}, {"lr_min": 2e-3}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = small_cfg(lr=3e-3, weights={"w_recon": 1.0})
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_freeze_implies_no_diffusion(self, small_ds):
        assert small_cfg(freeze_drift=True).model_config(small_ds).tau == 0.0


class TestLearningRate:
    def test_constant_by_default(self):
        cfg = TrainConfig(epochs=10, lr=2e-3)
        assert {train.learning_rate(e, cfg) for e in range(10)} == {2e-3}

    def test_cosine_endpoints(self):
        cfg = TrainConfig(epochs=11, lr=1e-3, lr_min=1e-4)
        assert train.learning_rate(0, cfg) == 1e-3
        assert math.isclose(train.learning_rate(10, cfg), 1e-4)
        assert math.isclose(train.learning_rate(5, cfg), 5.5e-4)

    def test_cosine_monotone(self):
        cfg = TrainConfig(epochs=50, lr=1e-3, lr_min=0.0)
        lrs = [train.learning_rate(e, cfg) for e in range(50)]
        assert np.all(np.diff(lrs) < 0)


def test_mode_weight_decay_shrinks_mode_weights(small_ds):
    plain = train.train(small_ds, small_cfg(epochs=2))
    decayed = train.train(small_ds, small_cfg(epochs=2, mode_weight_decay=50.0))
    norm = lambda ck: sum(np.sum(ck.params[n] ** 2) for n in ck.params.names
                          if n.startswith("mode.W"))
    assert norm(decayed) < norm(plain)


class TestAdam:
    def test_first_step_is_lr_sign(self):
        st = train.AdamState.zeros(3)
        x = train.adam_update(np.zeros(3), np.array([2.0, -0.5, 0.0]), st, 0.1)
        assert np.allclose(x, [-0.1, 0.1, 0.0], atol=1e-6)

    def test_clip(self):
        g, n = train.clip_by_norm(np.array([3.0, 4.0]), 1.0)
        assert n == 5.0 and np.allclose(g, [0.6, 0.8])
        g, _ = train.clip_by_norm(np.array([0.3, 0.4]), 1.0)
        assert np.allclose(g, [0.3, 0.4])

    def test_minimizes_quadratic(self):
        st = train.AdamState.zeros(2)
        x = np.array([3.0, -2.0])
        for _ in range(3000):
            x = train.adam_update(x, 2 * x, st, 1e-2)
        assert np.abs(x).max() < 1e-2


def test_validation_split(small_ds):
    _, seqs = train.prepare(small_ds, small_cfg())
    assert seqs[0].n_train == 16 - 1  # floor(0.1 * 15) = 1 held-out transition
    wins = train._windows(seqs, 4)
    assert len(wins) == 15 - 4 + 1


def test_loss_decreases(small_ds):
    ck = train.train(small_ds, small_cfg(epochs=12, lr=3e-3))
    hist = train.history_array(ck)
    ma = np.convolve(hist, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(ma[:8]) < 0)


def test_outputs_and_determinism(small_ds, tmp_path):
    cfg = small_cfg(epochs=3)
    a = train.train(small_ds, cfg, out_dir=tmp_path / "a")
    b = train.train(small_ds, cfg, out_dir=tmp_path / "b")
    for name in ("params.bin", "adam_m.bin", "adam_v.bin"):
        assert filecmp.cmp(tmp_path / "a/final" / name, tmp_path / "b/final" / name, shallow=False)
    log = (tmp_path / "a/train_log.csv").read_text().splitlines()
    assert log[0].split(",") == list(train.LOG_COLUMNS) and len(log) == 4
    assert (tmp_path / "a/best/manifest.json").exists()
    assert np.array_equal(a.params.flat, b.params.flat)
    assert 0 <= a.best_epoch < 3 and math.isfinite(a.best_val)


def test_resume_bit_exact(small_ds, tmp_path):
    cfg = small_cfg(epochs=5)
    full = train.train(small_ds, cfg)
    part = train.train(small_ds, cfg, out_dir=tmp_path, until_epoch=2)
    assert part.epoch == 1
    loaded = train.Checkpoint.load(tmp_path / "final")
    done = train.train(small_ds, cfg, resume=loaded)
    assert np.array_equal(done.params.flat, full.params.flat)
    assert [r["loss_total"] for r in done.history] == [r["loss_total"] for r in full.history]


def test_checkpoint_round_trip(small_ds, tmp_path):
    ck = train.train(small_ds, small_cfg(epochs=2))
    ck.save(tmp_path / "ck")
    back = train.Checkpoint.load(tmp_path / "ck")
    assert np.array_equal(back.params.flat, ck.params.flat)
    assert np.array_equal(back.adam.m, ck.adam.m) and back.adam.t == ck.adam.t
    assert back.train_cfg == ck.train_cfg and back.model_cfg == ck.model_cfg
    assert np.array_equal(back.sensor_coords, ck.sensor_coords)
    cfg3 = small_cfg(epochs=3)
    one = train.train(small_ds, cfg3, resume=back)
    ref = train.train(small_ds, cfg3, resume=ck)
    assert np.array_equal(one.params.flat, ref.params.flat)


def test_frozen_drift_stays_zero(small_ds):
    ck = train.train(small_ds, small_cfg(epochs=2, freeze_drift=True))
    for name in ck.params.names:
        if name.startswith("drift."):
            assert not np.any(ck.params[name])


def test_nan_aborts_with_last_good(small_ds, tmp_path):
    bad = sim.gen_synthetic(sim.SynthConfig(grid=16, T=16), seed=0)
    obs = bad.observations.copy()
    obs[3, 0] = np.nan
    object.__setattr__(bad, "observations", obs)
    with pytest.raises(train.TrainingError, match="non-finite"):
        train.train(bad, small_cfg(epochs=2), out_dir=tmp_path)
    assert (tmp_path / "last_good/manifest.json").exists()


def test_multiple_sequences(small_ds):
    other = sim.gen_synthetic(sim.SynthConfig(grid=16, T=16, b=(1, 1, 1, 1)), seed=0)
    ck = train.train([small_ds, other], small_cfg(epochs=1))
    assert len(ck.history) == 1
    mismatched = sim.gen_synthetic(sim.SynthConfig(grid=16, T=16), seed=5)
    with pytest.raises(ValueError, match="share"):
        train.train([small_ds, mismatched], small_cfg(epochs=1))
