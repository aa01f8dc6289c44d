import dataclasses
import json
import math

import numpy as np
import pytest

import amorlip.trainer as trainer_mod
from amorlip.amortization import init_amortizer
from amorlip.data import generate_synthetic
from amorlip.errors import ConfigError, ContractError, TrainingDivergence
from amorlip.trainer import (
    AMORTIZER_REINIT_SALT,
    MetricsWriter,
    TrainConfig,
    checkpoint_load_blocks,
    checkpoint_save,
    init_train_state,
    load_eval_model,
    restore_train_state,
    run_amorlip,
    run_clip_baseline,
    run_training,
    state_blocks,
)


def small_cfg(**kw):
    base = dict(
        method="amorlip",
        epochs=2,
        batch_size=16,
        embed_dim=8,
        encoder_hidden=16,
        seed=11,
        log_every=1,
    )
    base.update(kw)
    return TrainConfig(**base)


def small_ds(n=200, seed=11):
    return generate_synthetic(n, 4, 10, 9, 0.05, seed=seed)


def strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


class TestTrainConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            TrainConfig.from_dict({"lr": 0.1})

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(method="sgd").validate()
        with pytest.raises(ConfigError):
            TrainConfig(t_online=0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(beta_final=1.5).validate()

    def test_json_round_trip(self, tmp_path):
        cfg = small_cfg(alpha=0.92)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_file(path) == cfg


class TestCadence:
    @pytest.mark.parametrize("t_online", [1, 2, 8, 32])
    def test_gather_counts_per_epoch(self, t_online):
        ds = small_ds(600)  # train split 540 -> K = 33 at batch 16
        cfg = small_cfg(epochs=1, t_online=t_online)
        k = (600 - 60) // cfg.batch_size
        state = run_amorlip(cfg, ds)
        assert state.gather_count == k // t_online
        clip_state = run_clip_baseline(dataclasses.replace(cfg, method="clip"), ds)
        assert clip_state.gather_count == k

    def test_stage_one_runs_t_lambda_iterations(self):
        ds = small_ds(600)
        cfg = small_cfg(epochs=1, t_online=8, t_lambda=3)
        k = 540 // cfg.batch_size
        state = run_amorlip(cfg, ds)
        assert state.opt_amortizer.t == (k // 8) * 3

    def test_target_ema_cadence(self, monkeypatch):
        calls = {"n": 0}
        real = trainer_mod.ema_update

        def counting(target, online, alpha):
            calls["n"] += 1
            return real(target, online, alpha)

        monkeypatch.setattr(trainer_mod, "ema_update", counting)
        ds = small_ds(600)
        cfg = small_cfg(epochs=1, t_target=2)
        run_amorlip(cfg, ds)
        k = 540 // cfg.batch_size
        assert calls["n"] == 2 * (k // 2)  # two modalities per application

    def test_degenerate_cadence_without_stage_one(self):
        ds = small_ds(200)
        cfg = small_cfg(epochs=1, t_online=1000)
        state = run_amorlip(cfg, ds)
        assert state.gather_count == 0
        # online amortizers never stepped, so they equal their epoch-1 draws
        for i, m in enumerate(("a", "b")):
            fresh = init_amortizer(cfg.embed_dim, cfg.f_d, m, (cfg.seed, AMORTIZER_REINIT_SALT, 1, i))
            for got, want in zip(state.online[m].blocks(), fresh.blocks()):
                assert np.array_equal(got.value, want.value)


class TestTrainingRuns:
    def test_amorlip_loss_decreases(self):
        ds = generate_synthetic(512, 8, 24, 20, 0.05, seed=3)
        cfg = TrainConfig(
            epochs=2, batch_size=64, embed_dim=16, encoder_hidden=32, seed=3, log_every=1,
            t_online=2,
        )
        mw = MetricsWriter()
        run_amorlip(cfg, ds, mw)
        assert mw.records[-1]["stage2_loss_raw"] < mw.records[0]["stage2_loss_raw"]

    @pytest.mark.parametrize("generator", ["kl", "kl_affine", "js"])
    def test_fdiv_objective_fits_amortizers(self, generator):
        ds = generate_synthetic(600, 6, 16, 12, 0.05, seed=5)
        cfg = TrainConfig(
            objective="fdiv", generator=generator, epochs=2, batch_size=32,
            embed_dim=12, encoder_hidden=24, seed=5, t_online=2, log_every=1,
        )
        mw = MetricsWriter()
        run_amorlip(cfg, ds, mw)
        amor = [r["amor_loss"] for r in mw.records if r["amor_loss"] is not None]
        assert amor[-1] < amor[0]
        assert mw.records[-1]["stage2_loss_raw"] < mw.records[0]["stage2_loss_raw"]

    def test_fdiv_regularizer_coefficient_changes_trajectory(self):
        ds = generate_synthetic(400, 4, 12, 10, 0.05, seed=6)
        base = dict(
            objective="fdiv", generator="js", epochs=1, batch_size=32,
            embed_dim=8, encoder_hidden=16, seed=6, t_online=2, log_every=1,
        )
        mw0, mw1 = MetricsWriter(), MetricsWriter()
        run_amorlip(TrainConfig(**base, fdiv_l2log_coef=0.0), ds, mw0)
        run_amorlip(TrainConfig(**base, fdiv_l2log_coef=0.5), ds, mw1)
        a0 = [r["amor_loss"] for r in mw0.records if r["amor_loss"] is not None]
        a1 = [r["amor_loss"] for r in mw1.records if r["amor_loss"] is not None]
        assert a0 != a1

    def test_clip_loss_decreases(self):
        ds = generate_synthetic(512, 8, 24, 20, 0.05, seed=3)
        cfg = TrainConfig(
            method="clip", epochs=2, batch_size=64, embed_dim=16, encoder_hidden=32,
            seed=3, log_every=1,
        )
        mw = MetricsWriter()
        run_clip_baseline(cfg, ds, mw)
        assert mw.records[-1]["stage2_loss_raw"] < mw.records[0]["stage2_loss_raw"]

    def test_clip_identical_batch_closed_form(self):
        # every sample identical: the NCE value is pinned at 2 log(batch)
        row_a = np.ones((120, 6), dtype=np.float32)
        row_b = np.ones((120, 5), dtype=np.float32)
        from amorlip.data import PairedDataset

        ds = PairedDataset(row_a, row_b, np.zeros(120, dtype=np.uint32), num_classes=2)
        cfg = small_cfg(method="clip", epochs=1, batch_size=16)
        mw = MetricsWriter()
        run_clip_baseline(cfg, ds, mw)
        for rec in mw.records:
            assert abs(rec["stage2_loss_raw"] - 2.0 * math.log(16)) < 1e-9
            expected = 2.0 * math.log(16) / rec["tau"] + rec["rho"] / rec["tau"]
            assert abs(rec["stage2_loss_rescaled"] - expected) < 1e-9

    def test_tau_stays_clamped(self):
        ds = small_ds(200)
        cfg = small_cfg(epochs=2, tau_init=95.0, tau_max=100.0)
        state = run_amorlip(cfg, ds)
        assert 0.0 < state.temperature.tau <= 100.0

    def test_full_run_deterministic(self):
        ds = small_ds(300)
        cfg = small_cfg(epochs=2)
        m1, m2 = MetricsWriter(), MetricsWriter()
        run_amorlip(cfg, ds, m1)
        run_amorlip(cfg, ds, m2)
        assert strip_wall(m1.records) == strip_wall(m2.records)

    def test_divergence_aborts_with_snapshot(self):
        ds = small_ds(200)
        cfg = small_cfg(epochs=1, t_online=10_000, t_target=10_000)
        state = init_train_state(cfg, ds)
        # amortizer forced far below the partition scale: exp overflows;
        # mid-epoch counters keep the epoch rotation from re-initializing it
        for m in ("a", "b"):
            state.targets[m].ema.net.weights[-1].value[...] = 0.0
            state.targets[m].ema.net.biases[-1].value[0, 0] = -800.0
        state.epoch = 1
        state.step_in_epoch = 1
        state.global_step = 1
        with pytest.raises(TrainingDivergence) as err:
            run_amorlip(cfg, ds, start_state=state)
        assert "step" in err.value.snapshot and "tau" in err.value.snapshot

    def test_epoch_rotation_freezes_previous_target(self):
        ds = small_ds(200)
        cfg = small_cfg(epochs=2)
        recorded = {}
        real = trainer_mod._rotate_and_reinit

        def spying(state, epoch):
            if epoch == 2:
                recorded["pre"] = [b.value.copy() for b in state.targets["a"].ema.blocks()]
            real(state, epoch)
            if epoch == 2:
                recorded["post"] = [b.value.copy() for b in state.targets["a"].prev_epoch.blocks()]

        trainer_mod._rotate_and_reinit = spying
        try:
            run_amorlip(cfg, ds)
        finally:
            trainer_mod._rotate_and_reinit = real
        for pre, post in zip(recorded["pre"], recorded["post"]):
            assert np.array_equal(pre, post)


class TestCheckpoints:
    def test_save_load_resave_byte_identical(self, tmp_path):
        ds = small_ds(200)
        cfg = small_cfg(epochs=1)
        state = run_amorlip(cfg, ds)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint_save(state, p1)
        restored = restore_train_state(cfg, ds, p1)
        checkpoint_save(restored, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mismatched_config_names_block(self, tmp_path):
        ds = small_ds(200)
        cfg = small_cfg(epochs=1)
        state = run_amorlip(cfg, ds)
        path = tmp_path / "c.ckpt"
        checkpoint_save(state, path)
        wrong = dataclasses.replace(cfg, embed_dim=12)
        with pytest.raises(ContractError, match="encoder_a/w"):
            restore_train_state(wrong, ds, path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"JUNK!\n" + b"\x00" * 16)
        with pytest.raises(Exception, match="magic"):
            checkpoint_load_blocks(path)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        ds = small_ds(300)
        cfg = small_cfg(epochs=3)
        full = MetricsWriter()
        final_full = run_amorlip(cfg, ds, full)

        part1 = MetricsWriter()
        state = run_amorlip(cfg, ds, part1, max_steps=20)  # mid-epoch stop
        path = tmp_path / "mid.ckpt"
        checkpoint_save(state, path)
        restored = restore_train_state(cfg, ds, path)
        part2 = MetricsWriter()
        final_resumed = run_amorlip(cfg, ds, part2, start_state=restored)

        assert strip_wall(part1.records + part2.records) == strip_wall(full.records)
        for b1, b2 in zip(state_blocks(final_full), state_blocks(final_resumed)):
            assert b1[0] == b2[0]
            assert np.array_equal(b1[1], b2[1])

    def test_resume_clip_baseline(self, tmp_path):
        ds = small_ds(300)
        cfg = small_cfg(method="clip", epochs=2)
        full = MetricsWriter()
        run_clip_baseline(cfg, ds, full)
        state = run_clip_baseline(cfg, ds, max_steps=9)
        path = tmp_path / "clip.ckpt"
        checkpoint_save(state, path)
        restored = restore_train_state(cfg, ds, path)
        part2 = MetricsWriter()
        run_clip_baseline(cfg, ds, part2, start_state=restored)
        assert strip_wall(part2.records) == strip_wall(full.records)[9:]

    def test_eval_model_round_trip(self, tmp_path):
        ds = small_ds(200)
        cfg = small_cfg(epochs=1)
        state = run_amorlip(cfg, ds)
        path = tmp_path / "m.ckpt"
        checkpoint_save(state, path)
        model = load_eval_model(path)
        assert model.method == "amorlip"
        assert model.seed == cfg.seed
        assert model.targets is not None
        assert model.temperature.tau == state.temperature.tau
        x = ds.mod_a[:5].astype(np.float64)
        from amorlip.encoders import encode

        e1, _ = encode(state.encoders, x, "a")
        e2, _ = encode(model.encoders, x, "a")
        assert np.array_equal(e1.data, e2.data)

    def test_clip_checkpoint_has_no_amortizers(self, tmp_path):
        ds = small_ds(200)
        cfg = small_cfg(method="clip", epochs=1)
        state = run_clip_baseline(cfg, ds)
        path = tmp_path / "c.ckpt"
        checkpoint_save(state, path)
        model = load_eval_model(path)
        assert model.method == "clip"
        assert model.targets is None


class TestRunTraining:
    def test_dispatch(self):
        ds = small_ds(200)
        st1 = run_training(small_cfg(epochs=1), ds)
        assert st1.online is not None
        st2 = run_training(small_cfg(method="clip", epochs=1), ds)
        assert st2.online is None

    def test_method_mismatch_rejected(self):
        ds = small_ds(200)
        with pytest.raises(ConfigError):
            run_amorlip(small_cfg(method="clip"), ds)
        with pytest.raises(ConfigError):
            run_clip_baseline(small_cfg(method="amorlip"), ds)

    def test_dataset_smaller_than_batch_rejected(self):
        ds = small_ds(200)
        with pytest.raises(ConfigError):
            run_amorlip(small_cfg(batch_size=190), ds)


class TestFidelityExperiment:
    def test_smoke_returns_stats(self):
        ds = generate_synthetic(600, 6, 16, 12, 0.05, seed=5)
        cfg = TrainConfig(
            epochs=2, batch_size=32, embed_dim=12, encoder_hidden=24, seed=5, eval_fraction=0.2
        )
        res = trainer_mod.amortizer_fidelity_experiment(cfg, ds, pretrain_epochs=1, invocations=40)
        assert set(res) >= {"median_abs_log_z_err", "mean_abs_log_z_err", "tau", "optimizer_steps"}
        assert res["optimizer_steps"] == 40 * cfg.t_lambda
        assert math.isfinite(res["median_abs_log_z_err"])
