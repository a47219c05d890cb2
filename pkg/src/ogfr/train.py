"""Two-branch distillation training loop."""

from __future__ import annotations

import json
import math
import os
from collections import OrderedDict

import numpy as np

from . import checkpoint as ckpt_io
from . import fep, retrieval
from .config import Config
from .errors import CheckpointError, NumericError
from .model import Batch, forward_step, init_model, teacher_probability
from .rng import Stream
from .synth import occlude

BASELINE_CAP = 1.0 - 1e-6
CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "metrics.jsonl"


class Trainer:
    """Owns the parameters, optimizer state, RL baseline and random streams.

    Everything a step consumes is derived from ``(seed, step)`` except the
    action-sampling stream, whose state travels in the checkpoint.
    """

    def __init__(self, cfg: Config, train_samples, out_dir=None):
        self.cfg = cfg
        self.samples = list(train_samples)
        ids = sorted({s.image.identity for s in self.samples})
        self.id_map = {pid: i for i, pid in enumerate(ids)}
        self.by_class = [[] for _ in ids]
        for i, s in enumerate(self.samples):
            self.by_class[self.id_map[s.image.identity]].append(i)
        self.n_classes = len(ids)
        self.params = init_model(cfg, self.n_classes)
        self.momentum = OrderedDict((n, np.zeros_like(t.data)) for n, t in self.params.trainable())
        self.step = 0
        self.baseline = 0.0
        self.baseline_epoch = -1
        self.actions_rng = Stream(cfg.seed).split("actions")
        o = cfg.optim
        self.ids_per_batch = min(o.ids_per_batch, self.n_classes)
        self.steps_per_epoch = max(1, self.n_classes // self.ids_per_batch)
        self.total_steps = o.max_steps or o.epochs * self.steps_per_epoch
        self.out_dir = out_dir
        self.last = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- schedule ---------------------------------------------------------
    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def lr_at(self, step) -> float:
        frac = min(step / max(1, self.total_steps), 1.0)
        return 0.5 * self.cfg.optim.lr * (1.0 + math.cos(math.pi * frac))

    def epoch_plan(self, epoch) -> list:
        """Per-step sample indices for one epoch (P identities x K images)."""
        r = Stream(self.cfg.seed).split("epoch", epoch)
        order = r.permutation(self.n_classes)
        p, k = self.ids_per_batch, self.cfg.optim.imgs_per_batch_id
        plan = []
        for s in range(self.steps_per_epoch):
            group = order[s * p:(s + 1) * p]
            idx = []
            for c in group:
                pool = self.by_class[int(c)]
                pick = r.choice(len(pool), size=k, replace=len(pool) < k)
                idx.extend(pool[int(j)] for j in pick)
            plan.append(np.array(idx))
        return plan

    def make_batch(self, indices, step) -> Batch:
        r = Stream(self.cfg.seed).split("aug", step)
        prob = self.cfg.optim.student_occlusion_prob
        d = self.cfg.data
        h_img, h_lab, o_img, o_lab = [], [], [], []
        for j, i in enumerate(indices):
            s = self.samples[int(i)]
            h_img.append(s.image.pixels)
            h_lab.append(s.mask.labels)
            rj = r.split(j)
            if rj.uniform() < prob:
                img, msk, _ = occlude(s.image, s.mask, rj, (d.occlusion_min, d.occlusion_max))
                o_img.append(img.pixels)
                o_lab.append(msk.labels)
            else:
                o_img.append(s.image.pixels)
                o_lab.append(s.mask.labels)
        ids = np.array([self.id_map[self.samples[int(i)].image.identity] for i in indices])
        cams = np.array([self.samples[int(i)].image.camera for i in indices])
        return Batch(np.stack(h_img), np.stack(h_lab), np.stack(o_img), np.stack(o_lab), ids, cams)

    # -- RL baseline ------------------------------------------------------
    def compute_baseline(self) -> float:
        images = np.stack([s.image.pixels for s in self.samples])
        labels = np.stack([s.mask.labels for s in self.samples])
        cams = np.array([s.image.camera for s in self.samples])
        ids = np.array([self.id_map[s.image.identity] for s in self.samples])
        probs = []
        for lo in range(0, len(ids), 32):
            sl = slice(lo, lo + 32)
            probs.append(teacher_probability(self.params, self.cfg, images[sl], labels[sl], ids[sl], cams[sl]))
        return float(min(np.concatenate(probs).mean(), BASELINE_CAP))

    def _maybe_refresh_baseline(self):
        e = self.epoch
        every = self.cfg.rl.baseline_refresh_epochs
        if e % every == 0 and self.baseline_epoch != e:
            self.baseline = self.compute_baseline()
            self.baseline_epoch = e

    # -- one step ---------------------------------------------------------
    def train_step(self) -> dict:
        cfg = self.cfg
        self._maybe_refresh_baseline()
        plan = self.epoch_plan(self.epoch)
        batch = self.make_batch(plan[self.step % self.steps_per_epoch], self.step)
        self.params.zero_grad()
        out = forward_step(self.params, cfg, batch, rng=self.actions_rng)
        self.last = out
        parts = {k: float(v.data) for k, v in out.parts.items()}
        total = float(out.total.data)
        if not np.isfinite(total):
            self._abort(out, parts, batch)
        out.total.backward()
        lr = self.lr_at(self.step)
        self._sgd(lr)

        mean_reward = 0.0
        if cfg.model.use_fep and out.decision is not None:
            rewards = fep.reward(out.p_true, self.baseline, cfg.rl.reward_clip)
            out.decision.rewards = rewards
            w, b = self.params["fep.agent.w"], self.params["fep.agent.b"]
            new_w, new_b = fep.reinforce_update(out.decision.states, out.decision.actions, rewards,
                                                w.data, b.data, cfg.rl.lr)
            w.data = new_w.astype(w.dtype)
            b.data = np.asarray(new_b, dtype=b.dtype)
            mean_reward = float(np.mean(rewards))

        record = {"step": self.step, "epoch": self.epoch, **parts, "total": total, "lr": lr,
                  "p_b": self.baseline, "mean_reward": mean_reward}
        self.step += 1
        if self.out_dir:
            with open(os.path.join(self.out_dir, LOG_NAME), "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if self.step % self.steps_per_epoch == 0:
                self.save(os.path.join(self.out_dir, CHECKPOINT_NAME))
        return record

    def _sgd(self, lr):
        o = self.cfg.optim
        grads = OrderedDict()
        for name, t in self.params.trainable():
            grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        if o.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > o.grad_clip:
                scale = o.grad_clip / norm
                grads = OrderedDict((n, g * scale) for n, g in grads.items())
        for name, g in grads.items():
            t = self.params[name]
            if name in self.params.decay and o.weight_decay:
                g = g + o.weight_decay * t.data
            m = self.momentum[name]
            m *= o.momentum
            m += g
            t.data = (t.data - lr * m).astype(t.dtype, copy=False)

    def _abort(self, out, parts, batch):
        dump = {"step": self.step, "losses": parts, "ids": batch.ids.tolist()}
        if self.out_dir:
            arrays = {f"loss_{k}": np.asarray(v.data) for k, v in out.parts.items()}
            for key in ("f_hp", "f_op"):
                arrays[key] = out.extras[key].tokens.data
            np.savez(os.path.join(self.out_dir, "nan_dump.npz"), **arrays)
            with open(os.path.join(self.out_dir, "nan_dump.json"), "w", encoding="utf-8") as fh:
                json.dump(dump, fh, indent=1)
        raise NumericError(f"non-finite loss at step {self.step}: {parts}", dump)

    def run(self, steps=None, callback=None) -> list:
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        log = []
        while self.step < end:
            rec = self.train_step()
            log.append(rec)
            if callback is not None:
                callback(rec)
        return log

    # -- checkpoints ------------------------------------------------------
    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        tensors = OrderedDict((n, t.data) for n, t in self.params.items())
        for n, m in self.momentum.items():
            tensors[f"opt.momentum/{n}"] = m
        extra = {
            "rng": self.actions_rng.get_state(),
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "data_hash": self.cfg.data_hash(),
            "baseline_epoch": self.baseline_epoch,
            "id_map": {str(k): v for k, v in self.id_map.items()},
        }
        return ckpt_io.Checkpoint(tensors, self.epoch, self.step, self.baseline, extra)

    def save(self, path):
        ckpt_io.save(self.to_checkpoint(), path)

    def restore(self, ck: ckpt_io.Checkpoint):
        if ck.extra.get("config_hash") not in (None, self.cfg.hash()):
            raise CheckpointError("checkpoint was written with a different config")
        ckpt_io.load_params(self.params, ck.tensors)
        for n, m in self.momentum.items():
            key = f"opt.momentum/{n}"
            if key not in ck.tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
            m[...] = ck.tensors[key]
        self.step = ck.step
        self.baseline = ck.baseline
        self.baseline_epoch = ck.extra.get("baseline_epoch", -1)
        self.actions_rng = Stream.from_state(ck.extra["rng"])
        return self

    # -- evaluation -------------------------------------------------------
    def train_rank1(self) -> float:
        feats = retrieval.extract_samples(self.params, self.cfg, self.samples, self.id_map)
        return retrieval.leave_one_out_rank1(feats)


def train(cfg: Config, train_samples, epochs=None, out_dir=None, resume=None, callback=None):
    """Train from scratch (or from ``resume``); returns ``(trainer, log)``."""
    if epochs is not None:
        cfg = cfg.replace(optim={"epochs": int(epochs), "max_steps": 0})
    trainer = Trainer(cfg, train_samples, out_dir)
    if resume is not None:
        trainer.restore(ckpt_io.load(resume) if isinstance(resume, (str, os.PathLike)) else resume)
    log = trainer.run(callback=callback)
    if out_dir:
        trainer.save(os.path.join(out_dir, CHECKPOINT_NAME))
    return trainer, log
