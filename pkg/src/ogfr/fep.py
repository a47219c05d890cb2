"""Feature erasing and purification.

The erasing agent reads the patch/part correlation matrix, emits a retain
probability per patch, and is trained with REINFORCE on a relative reward.
Patches whose sampled action is 0 are swapped for learnable replacement
tokens before a two-layer decoder (fixed-token attention, then conventional
attention) refines the sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, layers
from . import tensor as T
from .encoder import FeatureBundle, patch_count
from .errors import ContractError
from .tensor import Tensor


@dataclass
class PartFeatures:
    """Global + K part + patch features, laid out [g; parts 1..K; patches]."""

    tokens: Tensor  # (B, 1+K+N, D)
    n_parts: int

    @property
    def f_g(self) -> Tensor:
        return self.tokens[:, 0, :]

    @property
    def f_parts(self) -> Tensor:
        return self.tokens[:, 1:1 + self.n_parts, :]

    @property
    def f_patch(self) -> Tensor:
        return self.tokens[:, 1 + self.n_parts:, :]

    @property
    def heads_view(self) -> Tensor:
        """Rows {g, 1..K}: the features that get classifiers."""
        return self.tokens[:, :1 + self.n_parts, :]


@dataclass
class EraseDecision:
    probs: np.ndarray    # (B, N) retain probabilities
    actions: np.ndarray  # (B, N) 1 = retain, 0 = replace
    states: np.ndarray   # (B, N, K+1)
    rewards: np.ndarray | None = None


def init_fep(params, cfg, rng):
    n = patch_count(cfg.height, cfg.width, cfg.patch, cfg.stride)
    k1 = cfg.n_parts + 1
    params.add("fep.agent.w", np.zeros(k1), trainable=False)
    params.add("fep.agent.b", np.zeros(()), trainable=False)
    params.add("fep.replace", rng.split("replace").normal(0.0, cfg.init_std, size=(n, cfg.dim)))
    layers.init_decoder_layer(params, "fep.dec0", cfg.dim, cfg.mlp_ratio, rng.split("dec0"))
    layers.init_decoder_layer(params, "fep.dec1", cfg.dim, cfg.mlp_ratio, rng.split("dec1"))


# ---------------------------------------------------------------------------
# state and agent


def correlation(f_patch: Tensor, f_parts: Tensor) -> Tensor:
    """softmax over parts of patch.part / sqrt(D); (B, N, D) x (B, K+1, D) -> (B, N, K+1)."""
    d = f_patch.shape[-1]
    if f_parts.shape[-1] != d:
        raise ContractError(f"feature sizes differ: {f_patch.shape} vs {f_parts.shape}")
    scores = T.matmul(f_patch, T.swap_last(f_parts)) * (1.0 / math.sqrt(d))
    return T.softmax(scores, axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def agent_forward(states, w, b=0.0) -> np.ndarray:
    """Retain probability per patch: sigmoid(I . w + b)."""
    states = np.asarray(states, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if states.shape[-1] != w.shape[-1]:
        raise ContractError(f"state width {states.shape[-1]} != agent width {w.shape[-1]}")
    return _sigmoid(states @ w + float(b))


def agent_forward_t(states: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Differentiable version, used to check the policy score by autodiff."""
    return T.sigmoid(T.matmul(states, w.reshape(-1, 1)).reshape(states.shape[:-1]) + b)


def sample_actions(probs, rng) -> np.ndarray:
    probs = np.asarray(probs)
    return (rng.uniform(size=probs.shape) < probs).astype(np.int64)


def log_prob(actions, probs) -> np.ndarray:
    """Log-probability of each episode's actions (summed over patches)."""
    a = np.asarray(actions, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    return (a * np.log(p) + (1.0 - a) * np.log1p(-p)).sum(axis=-1)


def reward(p_m, p_b, clip=1.0):
    """Relative improvement over the baseline, clipped to [-clip, clip]."""
    p_b = float(p_b)
    if p_b >= 1.0:
        raise ContractError("baseline probability of 1 leaves no room for improvement")
    r = (np.asarray(p_m, dtype=np.float64) - p_b) / (1.0 - p_b)
    r = np.clip(r, -clip, clip)
    return float(r) if r.ndim == 0 else r


def policy_gradient(states, actions, returns, w, b, weights=None):
    """REINFORCE estimate of d E[R] / d(w, b) for the Bernoulli agent.

    Each episode contributes ``R_b * sum_t d log pi(a_bt | s_bt)``; the
    contributions are averaged with ``weights`` (default uniform).
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[None]
    actions = np.asarray(actions, dtype=np.float64).reshape(states.shape[:2])
    returns = np.atleast_1d(np.asarray(returns, dtype=np.float64))
    if states.shape[0] < 1:
        raise ContractError("need at least one episode")
    probs = agent_forward(states, w, b)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        returns = returns * weights * (weights.size / weights.sum())
    return kernels.score_function_grad(states, actions, probs, returns)


def reinforce_update(states, actions, returns, w, b, lr, weights=None):
    """One gradient-ascent step on the agent; returns new ``(w, b)``."""
    gw, gb = policy_gradient(states, actions, returns, w, b, weights)
    return np.asarray(w) + lr * gw, float(b) + lr * gb


# ---------------------------------------------------------------------------
# purification


def select_patches(f_patch: Tensor, actions, replacements: Tensor) -> Tensor:
    """Keep patch i where ``actions[:, i] == 1``, else use ``replacements[i]``."""
    a = np.asarray(actions)
    if a.shape != f_patch.shape[:2]:
        raise ContractError(f"actions {a.shape} do not match patches {f_patch.shape[:2]}")
    keep = T.Tensor(a[..., None].astype(f_patch.dtype))
    return f_patch * keep + replacements * (1.0 - keep)


def mhsa_fix(x: Tensor, params, name, heads, n_fixed, return_heads=False):
    return layers.attention_fixed(x, params, name, heads, n_fixed, return_heads)


def purify(bundle: FeatureBundle, actions, params, cfg) -> PartFeatures:
    """Replace erased patches, then run the two-layer decoder.

    The background part token is dropped: the decoder sees
    [f_g; f_1..f_K; patches].
    """
    b = bundle.f_g.shape[0]
    d = bundle.f_g.shape[-1]
    patches = select_patches(bundle.f_patch, actions, params["fep.replace"])
    seq = T.concat([bundle.f_g.reshape(b, 1, d), bundle.f_parts[:, 1:, :], patches], axis=1)
    n_fixed = 1 + cfg.n_parts
    h = layers.decoder_layer(seq, params, "fep.dec0", cfg.heads, n_fixed=n_fixed)
    h = layers.decoder_layer(h, params, "fep.dec1", cfg.heads)
    return PartFeatures(h, cfg.n_parts)


def passthrough(bundle: FeatureBundle, n_parts) -> PartFeatures:
    """Teacher features without purification (ablation): drop the background token."""
    b, d = bundle.f_g.shape
    seq = T.concat([bundle.f_g.reshape(b, 1, d), bundle.f_parts[:, 1:, :], bundle.f_patch], axis=1)
    return PartFeatures(seq, n_parts)
