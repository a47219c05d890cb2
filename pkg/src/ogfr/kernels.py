"""Hot loops with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``OGFR_NUMBA`` is not ``0``.
Both paths return identical results (up to float rounding in reductions);
``tests/test_kernels.py`` checks them against each other and
``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised by the fallback test
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("OGFR_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# visibility-gated distance matrix


@njit(cache=True)
def _gated_distances_nb(qg, qp, qv, gg, gp, gv):
    nq, ng = qg.shape[0], gg.shape[0]
    k, d = qp.shape[1], qp.shape[2]
    out = np.empty((nq, ng), dtype=np.float64)
    for i in range(nq):
        for j in range(ng):
            acc = 0.0
            for t in range(d):
                diff = qg[i, t] - gg[j, t]
                acc += diff * diff
            total = np.sqrt(acc)
            count = 1.0
            for p in range(k):
                if qv[i, p] and gv[j, p]:
                    acc = 0.0
                    for t in range(d):
                        diff = qp[i, p, t] - gp[j, p, t]
                        acc += diff * diff
                    total += np.sqrt(acc)
                    count += 1.0
            out[i, j] = total / count
    return out


def _gated_distances_np(qg, qp, qv, gg, gp, gv):
    glob = np.sqrt(((qg[:, None, :] - gg[None, :, :]) ** 2).sum(-1))
    part = np.sqrt(((qp[:, None, :, :] - gp[None, :, :, :]) ** 2).sum(-1))
    both = (qv[:, None, :] & gv[None, :, :]).astype(np.float64)
    return ((both * part).sum(-1) + glob) / (both.sum(-1) + 1.0)


def gated_distances(qg, qp, qv, gg, gp, gv):
    """Pairwise visibility-gated distances between query and gallery entries.

    ``qg``/``gg`` are global features (n, D), ``qp``/``gp`` part features
    (n, K, D), ``qv``/``gv`` boolean visibility (n, K).  Part ``i`` contributes
    its Euclidean distance only when visible on both sides; the global distance
    always contributes; the sum is divided by the number of contributors.
    """
    args = (
        np.ascontiguousarray(qg, dtype=np.float64),
        np.ascontiguousarray(qp, dtype=np.float64),
        np.ascontiguousarray(qv, dtype=np.bool_),
        np.ascontiguousarray(gg, dtype=np.float64),
        np.ascontiguousarray(gp, dtype=np.float64),
        np.ascontiguousarray(gv, dtype=np.bool_),
    )
    if numba_enabled():
        return _gated_distances_nb(*args)
    return _gated_distances_np(*args)


# ---------------------------------------------------------------------------
# CMC / average precision


@njit(cache=True)
def _rank_metrics_nb(dist, q_ids, g_ids, q_cams, g_cams, max_rank):
    nq, ng = dist.shape
    cmc = np.zeros((nq, max_rank), dtype=np.float64)
    ap = np.zeros(nq, dtype=np.float64)
    valid = np.zeros(nq, dtype=np.bool_)
    for i in range(nq):
        order = np.argsort(dist[i], kind="mergesort")
        hits = 0
        kept = 0
        prec_sum = 0.0
        first = -1
        for r in range(ng):
            j = order[r]
            if g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]:
                continue
            kept += 1
            if g_ids[j] == q_ids[i]:
                hits += 1
                prec_sum += hits / kept
                if first < 0:
                    first = kept - 1
        if hits == 0:
            continue
        valid[i] = True
        ap[i] = prec_sum / hits
        for r in range(first, max_rank):
            cmc[i, r] = 1.0
    return cmc, ap, valid


def _rank_metrics_np(dist, q_ids, g_ids, q_cams, g_cams, max_rank):
    nq = dist.shape[0]
    order = np.argsort(dist, axis=1, kind="mergesort")
    match = g_ids[order] == q_ids[:, None]
    junk = match & (g_cams[order] == q_cams[:, None])
    cmc = np.zeros((nq, max_rank))
    ap = np.zeros(nq)
    valid = np.zeros(nq, dtype=bool)
    for i in range(nq):
        m = match[i][~junk[i]]
        if not m.any():
            continue
        valid[i] = True
        first = int(np.argmax(m))
        cmc[i, first:] = 1.0
        hits = np.cumsum(m)
        ranks = np.arange(1, m.size + 1)
        ap[i] = (hits[m] / ranks[m]).mean()
    return cmc, ap, valid


def rank_metrics(dist, q_ids, g_ids, q_cams, g_cams, max_rank=10):
    """Per-query CMC rows, average precision and validity flags.

    Gallery entries sharing both identity and camera with the query are
    dropped before ranking; ties are broken by gallery order.
    """
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    args = (
        dist,
        np.ascontiguousarray(q_ids, dtype=np.int64),
        np.ascontiguousarray(g_ids, dtype=np.int64),
        np.ascontiguousarray(q_cams, dtype=np.int64),
        np.ascontiguousarray(g_cams, dtype=np.int64),
        int(max_rank),
    )
    if numba_enabled():
        return _rank_metrics_nb(*args)
    return _rank_metrics_np(*args)


# ---------------------------------------------------------------------------
# batch-hard mining


@njit(cache=True)
def _batch_hard_nb(dist, labels):
    n = dist.shape[0]
    pos = np.empty(n, dtype=np.int64)
    negs = np.empty(n, dtype=np.int64)
    for i in range(n):
        best_p, best_n = -1.0, np.inf
        pos[i] = i
        negs[i] = -1
        for j in range(n):
            if j == i:
                continue
            if labels[j] == labels[i]:
                if dist[i, j] > best_p:
                    best_p = dist[i, j]
                    pos[i] = j
            elif dist[i, j] < best_n:
                best_n = dist[i, j]
                negs[i] = j
    return pos, negs


def _batch_hard_np(dist, labels):
    n = dist.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_d = np.where(same & ~eye, dist, -1.0)
    pos = np.argmax(pos_d, axis=1)
    pos = np.where(pos_d[np.arange(n), pos] >= 0, pos, np.arange(n))
    neg_d = np.where(~same, dist, np.inf)
    negs = np.argmin(neg_d, axis=1)
    negs = np.where(np.isfinite(neg_d[np.arange(n), negs]), negs, -1)
    return pos.astype(np.int64), negs.astype(np.int64)


def batch_hard_indices(dist, labels):
    """Hardest positive and negative index per anchor.

    An anchor with no other same-label sample gets itself as positive; one
    with no different-label sample gets ``-1`` as negative.
    """
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if numba_enabled():
        return _batch_hard_nb(dist, labels)
    return _batch_hard_np(dist, labels)


# ---------------------------------------------------------------------------
# REINFORCE score-function accumulation


@njit(cache=True)
def _score_grad_nb(states, actions, probs, returns):
    b, n, k = states.shape
    g_w = np.zeros(k, dtype=np.float64)
    g_b = 0.0
    for e in range(b):
        r = returns[e]
        if r == 0.0:
            continue
        for t in range(n):
            coef = r * (actions[e, t] - probs[e, t])
            g_b += coef
            for c in range(k):
                g_w[c] += coef * states[e, t, c]
    return g_w / b, g_b / b


def _score_grad_np(states, actions, probs, returns):
    coef = (actions - probs) * returns[:, None]
    b = states.shape[0]
    return np.einsum("bt,btk->k", coef, states) / b, coef.sum() / b


def score_function_grad(states, actions, probs, returns):
    """Average over episodes of ``R_b * sum_t d log pi(a_bt | s_bt)``.

    For a Bernoulli policy ``m = sigmoid(s . w + c)`` the per-step score is
    ``(a - m) * s`` for ``w`` and ``(a - m)`` for ``c``.  Shapes: states
    (B, N, K), actions/probs (B, N), returns (B,).
    """
    args = (
        np.ascontiguousarray(states, dtype=np.float64),
        np.ascontiguousarray(actions, dtype=np.float64),
        np.ascontiguousarray(probs, dtype=np.float64),
        np.ascontiguousarray(returns, dtype=np.float64),
    )
    if numba_enabled():
        return _score_grad_nb(*args)
    return _score_grad_np(*args)


# ---------------------------------------------------------------------------
# coarse part pixel counting


@njit(cache=True)
def _coarse_counts_nb(labels, coarse_of, n_coarse):
    b = labels.shape[0]
    out = np.zeros((b, n_coarse), dtype=np.int64)
    for e in range(b):
        flat = labels[e].ravel()
        for i in range(flat.size):
            c = coarse_of[flat[i]]
            if c >= 0:
                out[e, c] += 1
    return out


def _coarse_counts_np(labels, coarse_of, n_coarse):
    b = labels.shape[0]
    fine = np.stack([np.bincount(labels[e].ravel(), minlength=coarse_of.size) for e in range(b)])
    out = np.zeros((b, n_coarse), dtype=np.int64)
    for f, c in enumerate(coarse_of):
        if c >= 0:
            out[:, c] += fine[:, f]
    return out


def coarse_counts(labels, coarse_of, n_coarse):
    """Pixel counts per coarse part for a batch of (H, W) label maps.

    ``coarse_of[k]`` is the coarse index of fine label ``k`` or ``-1`` to
    ignore it (background).
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.ndim == 2:
        labels = labels[None]
    coarse_of = np.ascontiguousarray(coarse_of, dtype=np.int64)
    if numba_enabled():
        return _coarse_counts_nb(labels, coarse_of, int(n_coarse))
    return _coarse_counts_np(labels, coarse_of, int(n_coarse))
