"""Distillation, identity, parsing and metric losses."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

COS_EPS = 1e-8
DIST_EPS = 1e-12


def classify(features: Tensor, heads: Tensor) -> Tensor:
    """Per-feature linear classifiers.

    ``features`` (B, F, D) with ``heads`` (F, D, n_ids) -> logits (F, B, n_ids).
    """
    if features.shape[1] != heads.shape[0] or features.shape[2] != heads.shape[1]:
        raise ShapeError(f"features {features.shape} do not fit heads {heads.shape}")
    return T.matmul(features.transpose(1, 0, 2), heads)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over all leading positions of -log softmax(logits)[label].

    ``logits`` (..., B, n) and ``labels`` (B,).
    """
    labels = np.asarray(labels, dtype=np.int64)
    logp = T.log_softmax(logits, axis=-1)
    flat = logp.reshape(-1, labels.size, logits.shape[-1])
    return -flat[:, np.arange(labels.size), labels].mean()


def loss_mse(f_hp: Tensor, f_op: Tensor, reduction: str = "token") -> Tensor:
    """Squared L2 distance between two token bundles of shape (B, T, D).

    ``reduction="sum"`` sums over every token and channel and averages over
    the batch, so an all-ones difference gives T*D.  ``"token"`` (the
    default) sums over channels only and averages over tokens and batch,
    giving D for the same input.
    """
    if f_hp.shape != f_op.shape:
        raise ShapeError(f"mse operands differ: {f_hp.shape} vs {f_op.shape}")
    if reduction not in ("token", "sum"):
        raise ConfigError(f"unknown mse reduction {reduction!r}")
    diff = f_hp - f_op
    count = f_hp.shape[0] if reduction == "sum" else f_hp.shape[0] * f_hp.shape[1]
    return (diff * diff).sum() * (1.0 / count)


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    # norms are floored at COS_EPS, so a zero vector has cosine 0
    na = T.sqrt((a * a).sum(axis=-1) + COS_EPS**2)
    nb = T.sqrt((b * b).sum(axis=-1) + COS_EPS**2)
    return (a * b).sum(axis=-1) / (na * nb)


def loss_cos(f_hp: Tensor, f_op: Tensor) -> Tensor:
    """Mean of 1 - cos over the global and K part features.

    Inputs are (B, K+1, D) ``heads_view`` slices; the mean runs over both the
    K+1 features and the batch.
    """
    if f_hp.shape != f_op.shape:
        raise ShapeError(f"cos operands differ: {f_hp.shape} vs {f_op.shape}")
    return (1.0 - _cosine(f_hp, f_op)).mean()


def teacher_log_probs(f_hp: Tensor, heads: Tensor) -> np.ndarray:
    """Detached (F, B, n) log-probabilities of the teacher features."""
    with T.no_grad():
        return T.log_softmax(classify(f_hp.detach(), heads.detach()), axis=-1).data


def loss_kd(f_hp: Tensor, f_op: Tensor, labels, heads: Tensor, alpha: float, beta: float,
            teacher_logp=None) -> Tensor:
    """alpha * CE(student) + beta * KL(teacher || student), averaged over features.

    Teacher logits are detached: no gradient reaches ``f_hp`` through here.
    ``teacher_logp`` replaces the teacher distribution with a fixed array,
    which lets finite differences see the same stop-gradient as the tape.
    """
    s_logits = classify(f_op, heads)
    log_pt = teacher_log_probs(f_hp, heads) if teacher_logp is None else np.asarray(teacher_logp)
    log_ps = T.log_softmax(s_logits, axis=-1)
    pt = np.exp(log_pt)
    kl = (T.Tensor(pt) * (T.Tensor(log_pt) - log_ps)).sum(axis=-1).mean()
    ce = cross_entropy(s_logits, labels)
    return ce * alpha + kl * beta


def kl_term(f_hp: Tensor, f_op: Tensor, heads: Tensor) -> Tensor:
    """The KL part of :func:`loss_kd` on its own (beta = 1)."""
    s = T.log_softmax(classify(f_op, heads), axis=-1)
    log_pt = teacher_log_probs(f_hp, heads)
    return (T.Tensor(np.exp(log_pt)) * (T.Tensor(log_pt) - s)).sum(axis=-1).mean()


def loss_en(f_o_g: Tensor, f_h_g: Tensor, labels, heads: Tensor) -> Tensor:
    """Identity loss on both branches' global features (global head only)."""
    w = heads[0]
    return (cross_entropy(T.matmul(f_o_g, w), labels)
            + cross_entropy(T.matmul(f_h_g, w), labels))


# ---------------------------------------------------------------------------
# parsing supervision


def _interp_1d(n_out, n_in):
    """Bilinear weights (n_out, n_in) for half-pixel-centred resampling."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


@lru_cache(maxsize=16)
def upsample_matrix(grid_h, grid_w, height, width) -> np.ndarray:
    """(H*W, gh*gw) matrix mapping a row-major patch grid to pixels."""
    return np.kron(_interp_1d(height, grid_h), _interp_1d(width, grid_w))


def upsample_correlation(corr: Tensor, grid, height, width) -> Tensor:
    """(B, N, K+1) correlation -> (B, H*W, K+1) per-pixel part distribution."""
    u = upsample_matrix(grid[0], grid[1], height, width).astype(corr.dtype)
    up = T.matmul(T.Tensor(u), corr)
    return up / up.sum(axis=-1, keepdims=True)


def loss_mask(corr: Tensor, labels, grid, height, width) -> Tensor:
    """Pixel-wise cross entropy between upsampled correlation and part labels.

    ``labels`` is (B, H, W) part indices; the sum over pixels is divided by
    H*W and averaged over the batch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.shape[0]
    up = upsample_correlation(corr, grid, height, width)
    pix = np.arange(height * width)
    picked = T.log(up)[np.arange(b)[:, None], pix[None, :], labels.reshape(b, -1)]
    return -picked.mean()


# ---------------------------------------------------------------------------
# triplet


def _pair_dist(x: Tensor, i, j) -> Tensor:
    diff = x[i] - x[j]
    return T.sqrt((diff * diff).sum(axis=-1) + DIST_EPS)


def triplet_batch_hard(x: Tensor, labels, margin: float) -> Tensor:
    """Batch-hard triplet hinge on (B, D) features, averaged over anchors.

    An anchor with no other same-identity sample uses itself as positive.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ConfigError("triplet loss needs at least two identities in the batch")
    v = x.data.astype(np.float64)
    dist = np.sqrt(((v[:, None, :] - v[None, :, :]) ** 2).sum(-1))
    pos, neg = kernels.batch_hard_indices(dist, labels)
    anchors = np.arange(labels.size)
    d_pos = _pair_dist(x, anchors, pos)
    d_neg = _pair_dist(x, anchors, neg)
    return T.relu(d_pos - d_neg + margin).mean()


def loss_triplet(f_hp: Tensor, labels, margin: float) -> Tensor:
    """Triplet on the global feature plus the mean over the K part features.

    ``f_hp`` is the (B, K+1, D) ``heads_view``.
    """
    k = f_hp.shape[1] - 1
    total = triplet_batch_hard(f_hp[:, 0, :], labels, margin)
    parts = None
    for i in range(1, k + 1):
        t = triplet_batch_hard(f_hp[:, i, :], labels, margin)
        parts = t if parts is None else parts + t
    return total + parts * (1.0 / k)


def total_loss(parts: dict, mu1: float, mu2: float) -> Tensor:
    """(mse + mu1*cos + kd) + (en + mu2*tr) + mask."""
    return ((parts["mse"] + parts["cos"] * mu1 + parts["kd"])
            + (parts["en"] + parts["tr"] * mu2) + parts["mask"])
