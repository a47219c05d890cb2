"""Full two-branch model: parameter layout and the training forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fep, layers, losses
from . import tensor as T
from .encoder import FeatureBundle, encode, grid_shape, init_encoder
from .fep import PartFeatures
from .layers import Params
from .occlusion import estimate_batch
from .rng import Stream


def init_model(cfg, n_ids=None) -> Params:
    """Fresh parameters for encoder, FEP, student layers and classifiers."""
    m = cfg.model
    n_ids = cfg.data.n_ids if n_ids is None else n_ids
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    rng = Stream(cfg.seed).split("init")
    params = Params()
    with T.precision(dtype):
        init_encoder(params, m, rng.split("enc"))
        fep.init_fep(params, m, rng.split("fep"))
        for i in range(2):
            layers.init_decoder_layer(params, f"stu.layer{i}", m.dim, m.mlp_ratio, rng.split("stu", i))
        params.add("heads", rng.split("heads").normal(0.0, m.init_std, size=(m.n_parts + 1, m.dim, n_ids)),
                   decay=True)
    return params


def student_forward(bundle: FeatureBundle, params, mcfg) -> PartFeatures:
    """Two conventional transformer layers over [f_g; f_1..f_K; patches]."""
    x = fep.passthrough(bundle, mcfg.n_parts).tokens
    for i in range(2):
        x = layers.decoder_layer(x, params, f"stu.layer{i}", mcfg.heads)
    return PartFeatures(x, mcfg.n_parts)


@dataclass
class Batch:
    holistic: np.ndarray         # (B, H, W, 3)
    holistic_labels: np.ndarray  # (B, H, W)
    occluded: np.ndarray
    occluded_labels: np.ndarray
    ids: np.ndarray              # (B,) class indices
    cameras: np.ndarray          # (B,)

    def __len__(self):
        return self.ids.size


@dataclass
class StepOutput:
    total: T.Tensor
    parts: dict
    decision: fep.EraseDecision | None
    p_true: np.ndarray  # teacher global-head true-class probability per image
    corr_h: T.Tensor = None
    corr_o: T.Tensor = None
    extras: dict = field(default_factory=dict)


def _split(bundle: FeatureBundle, lo, hi) -> FeatureBundle:
    return FeatureBundle(bundle.f_g[lo:hi], bundle.f_parts[lo:hi], bundle.f_patch[lo:hi], bundle.tokens[lo:hi])


def true_class_prob(f_g: T.Tensor, heads: T.Tensor, ids) -> np.ndarray:
    logits = f_g.data.astype(np.float64) @ heads.data[0].astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(ids)), ids]


def forward_step(params, cfg, batch: Batch, rng: Stream | None = None, actions=None,
                 teacher_logp=None) -> StepOutput:
    """Both branches, FEP on the teacher, and every loss term.

    Actions are sampled from the agent with ``rng`` unless given explicitly.
    ``teacher_logp`` pins the distillation target (see ``losses.loss_kd``).
    """
    m, lw = cfg.model, cfg.loss
    b = len(batch)
    lam = m.occlusion_threshold
    z = np.concatenate([estimate_batch(batch.holistic_labels, lam), estimate_batch(batch.occluded_labels, lam)])
    images = np.concatenate([batch.holistic, batch.occluded])
    cams = np.concatenate([batch.cameras, batch.cameras])
    both = encode(images, z, cams, params, m)
    bh, bo = _split(both, 0, b), _split(both, b, 2 * b)

    corr = fep.correlation(both.f_patch, both.f_parts)
    corr_h, corr_o = corr[:b], corr[b:]

    decision = None
    if m.use_fep:
        states = corr_h.data.astype(np.float64)
        probs = fep.agent_forward(states, params["fep.agent.w"].data, params["fep.agent.b"].data)
        if actions is None:
            if rng is None:
                raise ValueError("need an rng to sample erase actions")
            actions = fep.sample_actions(probs, rng)
        actions = np.asarray(actions, dtype=np.int64)
        decision = fep.EraseDecision(probs, actions, states)
        f_hp = fep.purify(bh, actions, params, m)
    else:
        f_hp = fep.passthrough(bh, m.n_parts)
    f_op = student_forward(bo, params, m)

    heads = params["heads"]
    ids = batch.ids
    grid = grid_shape(m.height, m.width, m.patch, m.stride)
    labels_all = np.concatenate([batch.holistic_labels, batch.occluded_labels])
    if teacher_logp is None:
        teacher_logp = losses.teacher_log_probs(f_hp.heads_view, heads)
    parts = {
        "mse": losses.loss_mse(f_hp.tokens, f_op.tokens, lw.mse_reduction),
        "cos": losses.loss_cos(f_hp.heads_view, f_op.heads_view),
        "kd": losses.loss_kd(f_hp.heads_view, f_op.heads_view, ids, heads, lw.alpha, lw.beta, teacher_logp),
        "en": losses.loss_en(bo.f_g, bh.f_g, ids, heads),
        # both branches, each averaged over its own batch
        "mask": losses.loss_mask(corr, labels_all, grid, m.height, m.width) * 2.0,
        "tr": losses.loss_triplet(f_hp.heads_view, ids, lw.margin),
    }
    total = losses.total_loss(parts, lw.mu1, lw.mu2)
    p_true = true_class_prob(f_hp.f_g, heads, ids)
    return StepOutput(total, parts, decision, p_true, corr_h, corr_o,
                      {"f_hp": f_hp, "f_op": f_op, "bh": bh, "bo": bo, "teacher_logp": teacher_logp})


def teacher_probability(params, cfg, images, labels, ids, cameras) -> np.ndarray:
    """True-class probability of the teacher with every patch retained (no grad)."""
    m = cfg.model
    with T.no_grad():
        z = estimate_batch(labels, m.occlusion_threshold)
        bh = encode(images, z, cameras, params, m)
        if m.use_fep:
            keep = np.ones(bh.f_patch.shape[:2], dtype=np.int64)
            f_hp = fep.purify(bh, keep, params, m)
        else:
            f_hp = fep.passthrough(bh, m.n_parts)
        return true_class_prob(f_hp.f_g, params["heads"], ids)
