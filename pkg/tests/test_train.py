import json
import os

import numpy as np
import pytest

from ogfr import checkpoint as ckpt_io
from ogfr import losses
from ogfr.errors import CheckpointError, NumericError
from ogfr.model import forward_step, init_model, student_forward
from ogfr.encoder import encode
from ogfr.rng import Stream
from ogfr.train import CHECKPOINT_NAME, LOG_NAME, Trainer, train
from ogfr.verify import fixed_actions, toy_batch, toy_config


def _bytes(trainer):
    return ckpt_io.to_bytes(trainer.to_checkpoint())


class TestForwardStep:
    @pytest.fixture(scope="class")
    @classmethod
    def out(cls):
        cfg = toy_config(0)
        params = init_model(cfg, 2)
        batch = toy_batch(cfg)
        return cfg, params, batch, forward_step(params, cfg, batch, actions=fixed_actions(cfg, batch))

    def test_components_present_and_finite(self, out):
        *_, res = out
        assert set(res.parts) == {"mse", "cos", "kd", "en", "mask", "tr"}
        assert all(np.isfinite(float(v.data)) for v in res.parts.values())

    def test_total_is_weighted_sum(self, out):
        cfg, _, _, res = out
        p = {k: float(v.data) for k, v in res.parts.items()}
        expected = (p["mse"] + cfg.loss.mu1 * p["cos"] + p["kd"] + p["en"] + cfg.loss.mu2 * p["tr"] + p["mask"])
        assert abs(float(res.total.data) - expected) < 1e-10

    def test_student_token_count(self, out):
        cfg, params, batch, _ = out
        bundle = encode(batch.occluded, np.zeros((2, 4), int), batch.cameras, params, cfg.model)
        assert student_forward(bundle, params, cfg.model).tokens.shape[1] == 1 + 8 + 32

    def test_student_deterministic(self, out):
        cfg, params, batch, _ = out
        bundle = lambda: encode(batch.occluded, np.zeros((2, 4), int), batch.cameras, params, cfg.model)
        a = student_forward(bundle(), params, cfg.model).tokens.data
        b = student_forward(bundle(), params, cfg.model).tokens.data
        np.testing.assert_array_equal(a, b)

    def test_sampled_actions_need_rng(self, out):
        cfg, params, batch, _ = out
        with pytest.raises(ValueError):
            forward_step(params, cfg, batch)

    def test_ablation_has_no_decision(self):
        cfg = toy_config(0, model={"use_fep": False, "gamma1": 0.0})
        params = init_model(cfg, 2)
        res = forward_step(params, cfg, toy_batch(cfg))
        assert res.decision is None and np.isfinite(float(res.total.data))

    def test_end_to_end_gradient(self):
        from ogfr.verify import check_total_loss
        worst, _, n = check_total_loss(0)
        assert n >= 32 and worst < 1e-3


class TestTrainer:
    def test_weight_decay_audit(self, small_cfg, small_splits):
        tr = Trainer(small_cfg, small_splits["train"])
        decayed = tr.params.decay
        for name, _ in tr.params.items():
            is_weight = name.endswith(".w") and not name.startswith("fep.agent") or name == "heads"
            assert (name in decayed) == is_weight, name
        for name in ("enc.cls", "enc.parts", "enc.pos", "enc.occ", "enc.cam", "fep.replace", "enc.ln.g",
                     "enc.patch.b"):
            assert name not in decayed

    def test_agent_not_in_sgd(self, small_cfg, small_splits):
        tr = Trainer(small_cfg, small_splits["train"])
        names = {n for n, _ in tr.params.trainable()}
        assert "fep.agent.w" not in names and "fep.agent.b" not in names

    def test_cosine_schedule(self, small_cfg, small_splits):
        tr = Trainer(small_cfg, small_splits["train"])
        assert tr.lr_at(0) == small_cfg.optim.lr
        assert tr.lr_at(tr.total_steps) == pytest.approx(0.0, abs=1e-15)
        assert tr.lr_at(tr.total_steps // 2) == pytest.approx(small_cfg.optim.lr / 2, rel=0.2)

    def test_batches_are_p_by_k(self, small_cfg, small_splits):
        tr = Trainer(small_cfg, small_splits["train"])
        plan = tr.epoch_plan(0)
        ids = [tr.id_map[tr.samples[int(i)].image.identity] for i in plan[0]]
        counts = np.bincount(ids)
        assert len(plan[0]) == 16 and set(counts[counts > 0]) == {4}

    def test_metrics_log_and_checkpoint(self, small_cfg, small_splits, tmp_path):
        trainer, log = train(small_cfg, small_splits["train"], out_dir=tmp_path)
        lines = [json.loads(x) for x in (tmp_path / LOG_NAME).read_text().splitlines()]
        assert len(lines) == len(log) == small_cfg.optim.max_steps
        for key in ("step", "mse", "cos", "kd", "en", "mask", "tr", "total", "lr", "p_b", "mean_reward"):
            assert key in lines[0]
        ck = ckpt_io.load(tmp_path / CHECKPOINT_NAME)
        assert ck.step == trainer.step and ck.config_hash == small_cfg.hash()
        assert 0.0 < ck.baseline < 1.0

    def test_agent_is_updated(self, small_cfg, small_splits):
        tr = Trainer(small_cfg, small_splits["train"])
        tr.run(steps=2)
        assert np.abs(tr.params["fep.agent.w"].data).max() > 0

    def test_nan_aborts_with_dump(self, small_cfg, small_splits, tmp_path):
        tr = Trainer(small_cfg, small_splits["train"], tmp_path)
        tr.params["enc.pos"].data[:] = np.nan
        with pytest.raises(NumericError) as info:
            tr.train_step()
        assert info.value.dump["step"] == 0
        assert (tmp_path / "nan_dump.npz").exists() and (tmp_path / "nan_dump.json").exists()

    def test_restore_rejects_other_config(self, small_cfg, small_splits):
        ck = Trainer(small_cfg, small_splits["train"]).to_checkpoint()
        other = Trainer(small_cfg.replace(optim={"lr": 0.01}), small_splits["train"])
        with pytest.raises(CheckpointError):
            other.restore(ck)


@pytest.mark.slow
class TestDeterminism:
    @pytest.fixture(scope="class")
    @classmethod
    def cfg(cls, small_cfg):
        return small_cfg.replace(optim={"max_steps": 50})

    def test_same_seed_bit_identical_after_50_steps(self, cfg, small_splits):
        a, b = Trainer(cfg, small_splits["train"]), Trainer(cfg, small_splits["train"])
        a.run()
        b.run()
        assert a.step == 50 and _bytes(a) == _bytes(b)

    def test_resume_is_bit_identical(self, cfg, small_splits, tmp_path):
        full = Trainer(cfg, small_splits["train"])
        full.run()
        first = Trainer(cfg, small_splits["train"])
        first.run(steps=23)
        first.save(tmp_path / "mid.bin")
        resumed = Trainer(cfg, small_splits["train"]).restore(ckpt_io.load(tmp_path / "mid.bin"))
        resumed.run()
        assert _bytes(resumed) == _bytes(full)

    def test_loss_decreases(self, cfg, small_splits):
        tr = Trainer(cfg.replace(optim={"max_steps": 200}), small_splits["train"])
        log = tr.run()
        assert log[-1]["total"] < log[0]["total"]
