"""Training loop structure: update bookkeeping, determinism, modes, logs.

Runs here are deliberately tiny (8x8 patches, 2-channel nets) so the whole
module stays inside a few seconds while still driving the real loop.
"""

import csv

import numpy as np
import pytest

from danet.data import NoiseModel, make_toy_pairs, model_sampler
from danet.nets import load_checkpoint
from danet.train import (
    CSV_COLUMNS,
    ConfigError,
    TrainConfig,
    TrainResult,
    train,
    train_l1,
    write_log,
)

TINY = dict(
    epochs=2,
    batch_size=4,
    patch_size=8,
    epoch_patches=16,
    n_critic=3,
    depth=1,
    base_channels=4,
    disc_base_channels=4,
    disc_stages=3,
    val_samples=2,
)


@pytest.fixture(scope="module")
def toy_sets():
    model = NoiseModel("gaussian", sigma=0.1)
    data = make_toy_pairs(4, 16, model, seed=100, patch_size=8, epoch_patches=16)
    val = make_toy_pairs(2, 16, model, seed=200, patch_size=8, epoch_patches=16)
    return data, val


class TestConfig:
    def test_validate_collects_every_offense(self):
        cfg = TrainConfig(mode="wat", epochs=0, alpha=3.0, lr_r=-1.0)
        with pytest.raises(ConfigError) as e:
            cfg.validate()
        msg = str(e.value)
        for frag in ("mode=", "epochs=0", "alpha=3.0", "lr_r=-1.0"):
            assert frag in msg

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="tau3"):
            TrainConfig.from_dict({"tau3": 1.0})

    def test_from_dict_normalizes_betas(self):
        cfg = TrainConfig.from_dict({"betas_r": [0.8, 0.99]})
        assert cfg.betas_r == (0.8, 0.99)

    def test_patch_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="depth"):
            TrainConfig(patch_size=12, depth=3).validate()
        with pytest.raises(ConfigError, match="disc_stages"):
            TrainConfig(patch_size=16, depth=2, disc_stages=5).validate()

    def test_defaults_are_valid(self):
        TrainConfig().validate()


class TestBookkeeping:
    def test_update_counts_danet(self, toy_sets):
        data, val = toy_sets
        res = train(TrainConfig(mode="danet", **TINY), data, val, seed=1)
        # 16 patches / batch 4 = 4 outer iterations per epoch, 2 epochs
        assert res.updates == {"discriminator": 24, "denoiser": 8, "generator": 8}
        assert res.updates["discriminator"] == 3 * res.updates["denoiser"]

    def test_update_counts_single_branch(self, toy_sets):
        data, val = toy_sets
        res = train(TrainConfig(mode="based", **TINY), data, val, seed=1)
        assert res.updates["discriminator"] == 3 * res.updates["denoiser"]
        assert "generator" not in res.nets
        res = train(TrainConfig(mode="baseg", **TINY), data, val, seed=1)
        assert res.updates["discriminator"] == 3 * res.updates["generator"]
        assert "denoiser" not in res.nets

    def test_step_counter_matches_updates(self, toy_sets):
        data, val = toy_sets
        res = train(TrainConfig(mode="danet", **TINY), data, val, seed=3)
        assert res.nets["discriminator"].t == res.updates["discriminator"]
        assert res.nets["denoiser"].t == res.updates["denoiser"]


class TestDeterminism:
    def test_same_seed_bitwise_identical(self, toy_sets):
        data, val = toy_sets
        cfg = TrainConfig(mode="danet", **TINY)
        a = train(cfg, data, val, seed=7)
        b = train(cfg, data, val, seed=7)
        for role in a.nets:
            for name in a.nets[role].params:
                assert np.array_equal(
                    a.nets[role].params[name].data, b.nets[role].params[name].data
                ), (role, name)
        assert a.rows == b.rows

    def test_different_seed_differs(self, toy_sets):
        data, val = toy_sets
        cfg = TrainConfig(mode="danet", **TINY)
        a = train(cfg, data, val, seed=7)
        c = train(cfg, data, val, seed=8)
        assert not np.array_equal(
            a.nets["denoiser"].params["head.w"].data,
            c.nets["denoiser"].params["head.w"].data,
        )


class TestLogging:
    def test_rows_follow_schema(self, toy_sets):
        data, val = toy_sets
        res = train(TrainConfig(mode="danet", **TINY), data, val, seed=5)
        assert len(res.rows) == 2
        for i, row in enumerate(res.rows):
            assert set(row) == set(CSV_COLUMNS)
            assert row["epoch"] == i + 1
            for key in ("loss_D", "loss_R", "loss_G", "gp", "psnr_val", "akld_val"):
                assert np.isfinite(row[key])

    def test_single_branch_rows_leave_gaps(self, toy_sets):
        data, val = toy_sets
        res = train(TrainConfig(mode="based", **TINY), data, val, seed=5)
        row = res.rows[-1]
        assert row["loss_G"] is None and row["akld_val"] is None
        assert row["loss_R"] is not None and row["psnr_val"] is not None

    def test_csv_writer_output(self, toy_sets, tmp_path):
        data, val = toy_sets
        res = train(TrainConfig(mode="danet", **TINY), data, val, seed=5)
        path = tmp_path / "log.csv"
        write_log(res.rows, path)
        with open(path, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == CSV_COLUMNS
        assert len(got) == 3
        # repr round-trip: parsing the cell recovers the float exactly
        loss_idx = CSV_COLUMNS.index("loss_D")
        assert float(got[1][loss_idx]) == res.rows[0]["loss_D"]

    def test_l1_rows_blank_adversarial_columns(self, toy_sets):
        data, val = toy_sets
        cfg = TrainConfig(mode="based", **TINY)
        net = train_l1(cfg, data, val, seed=2)
        assert net.role == "denoiser"

    def test_learning_rate_schedule_in_rows(self, toy_sets):
        data, val = toy_sets
        cfg = TrainConfig(mode="danet", lr_half_period=1, **TINY)
        res = train(cfg, data, val, seed=5)
        assert res.rows[0]["lr_R"] == pytest.approx(cfg.lr_r)
        assert res.rows[1]["lr_R"] == pytest.approx(cfg.lr_r / 2)


class TestArtifacts:
    def test_out_dir_contents(self, toy_sets, tmp_path):
        data, val = toy_sets
        out = tmp_path / "run"
        out.mkdir()
        cfg = TrainConfig(mode="danet", **TINY)
        train(cfg, data, val, seed=9, out_dir=out)
        assert (out / "log.csv").exists()
        for role in ("denoiser", "generator", "discriminator"):
            assert (out / f"{role}_final.ckpt").exists()
            assert (out / f"{role}_e001.ckpt").exists()

    def test_final_checkpoint_matches_result(self, toy_sets, tmp_path):
        data, val = toy_sets
        out = tmp_path / "run"
        out.mkdir()
        res = train(TrainConfig(mode="danet", **TINY), data, val, seed=9, out_dir=out)
        back = load_checkpoint(out / "denoiser_final.ckpt")
        for name in back.params:
            assert np.array_equal(
                back.params[name].data, res.nets["denoiser"].params[name].data
            )
        assert back.t == res.nets["denoiser"].t

    def test_plus_mode_needs_generator(self, toy_sets):
        data, val = toy_sets
        from danet.tensor import ContractError

        with pytest.raises(ContractError):
            train(TrainConfig(mode="plus", **TINY), data, val, seed=1)

    def test_plus_mode_runs_with_oracle_sampler(self, toy_sets):
        """Wire the plus recipe through a real generator checkpoint."""
        data, val = toy_sets
        cfg = TrainConfig(mode="danet", **TINY)
        first = train(cfg, data, val, seed=1)
        plus_cfg = TrainConfig(mode="plus", **TINY)
        pool = [r.clean for r in data.records]
        res = train(plus_cfg, data, val, seed=2,
                    generator=first.nets["generator"], clean_pool=pool)
        assert set(res.nets) == {"denoiser"}
        assert res.rows[-1]["psnr_val"] is not None


class TestProgress:
    def test_l1_training_reduces_validation_loss(self, toy_sets):
        """Three epochs of the tiny recipe must beat the untrained net; a
        higher lr makes the improvement visible this early."""
        data, val = toy_sets
        cfg = TrainConfig(mode="based", lr_r=2e-3, **{**TINY, "epochs": 3})
        from danet.metrics import evaluate_psnr
        from danet.nets import UNetConfig, build_denoiser
        from danet.tensor.rngtools import stream as _stream

        trained = train_l1(cfg, data, val, seed=4)
        fresh = build_denoiser(
            UNetConfig(data.channels, data.channels, depth=1, base_channels=4),
            _stream(4, "init", "denoiser"),
        )
        assert evaluate_psnr(trained, val.pairs()) > evaluate_psnr(fresh, val.pairs())
