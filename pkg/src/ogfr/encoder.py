"""Occlusion-aware ViT encoder shared by the teacher and student branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .errors import ConfigError, ShapeError
from .occlusion import occlusion_index
from .tensor import Tensor


def patch_count(height, width, patch, stride) -> int:
    if stride < 1 or patch < 1:
        raise ConfigError("patch and stride must be positive")
    n = ((height + stride - patch) // stride) * ((width + stride - patch) // stride)
    if n <= 0 or patch > height or patch > width:
        raise ConfigError(f"no patches fit a {height}x{width} image with P={patch}, S={stride}")
    return n


def grid_shape(height, width, patch, stride):
    return (height + stride - patch) // stride, (width + stride - patch) // stride


def patchify(images: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, P*P*3), patches in row-major grid order."""
    b, h, w, c = images.shape
    gh, gw = grid_shape(h, w, patch, stride)
    win = np.lib.stride_tricks.sliding_window_view(images, (patch, patch), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :gh, :gw]  # (B, gh, gw, C, P, P)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, gh * gw, patch * patch * c)


@dataclass
class FeatureBundle:
    """Encoder output split as [cls; parts (K+1, background first); patches]."""

    f_g: Tensor      # (B, D)
    f_parts: Tensor  # (B, K+1, D)
    f_patch: Tensor  # (B, N, D)
    tokens: Tensor   # (B, N+K+2, D)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


def init_encoder(params, cfg, rng):
    m = cfg
    n = patch_count(m.height, m.width, m.patch, m.stride)
    d, std = m.dim, m.init_std
    t = n + m.n_parts + 2
    layers.init_linear(params, "enc.patch", m.patch * m.patch * 3, d, rng.split("patch"))
    params.add("enc.cls", rng.split("cls").normal(0, std, size=(1, d)))
    params.add("enc.parts", rng.split("parts").normal(0, std, size=(m.n_parts + 1, d)))
    params.add("enc.pos", rng.split("pos").normal(0, std, size=(t, d)))
    params.add("enc.occ", rng.split("occ").normal(0, std, size=(2 ** m.n_coarse, d)))
    params.add("enc.cam", rng.split("cam").normal(0, std, size=(m.n_cameras, d)))
    for i in range(m.depth):
        layers.init_block(params, f"enc.block{i}", d, m.mlp_ratio, rng.split("block", i))
    layers.init_norm(params, "enc.ln", d)


def lookup_occlusion_embedding(table: Tensor, z) -> Tensor:
    """Row of the 2**C occlusion table selected by bits ``z`` (bit c weighs 2**c).

    ``z`` may be one vector (C,) or a batch (B, C).
    """
    z = np.asarray(z, dtype=np.int64)
    if z.ndim == 1:
        if 2 ** z.size != table.shape[0]:
            raise ShapeError(f"z of length {z.size} does not index {table.shape[0]} rows")
        return T.embedding(table, occlusion_index(z))
    if 2 ** z.shape[1] != table.shape[0]:
        raise ShapeError(f"z of length {z.shape[1]} does not index {table.shape[0]} rows")
    idx = (z << np.arange(z.shape[1])).sum(axis=1)
    return T.embedding(table, idx)


def assemble_sequence(patches, cls, parts, pos, occ, cam, gamma1, gamma2) -> Tensor:
    """[cls; parts; patches] + pos + gamma1*occ + gamma2*cam.

    ``patches`` is (B, N, D); ``occ`` and ``cam`` are (B, D) or (D,) and are
    added to every token.
    """
    b, n, d = patches.shape
    if cls.shape[-1] != d or parts.shape[-1] != d or pos.shape != (n + parts.shape[0] + 1, d):
        raise ShapeError(
            f"sequence pieces disagree: patches {patches.shape}, cls {cls.shape}, "
            f"parts {parts.shape}, pos {pos.shape}")
    head = T.broadcast_to(T.concat([cls, parts], axis=0), (b, 1 + parts.shape[0], d))
    seq = T.concat([head, patches], axis=1) + pos

    def per_sample(e):
        return e.reshape(b, 1, d) if e.ndim == 2 else e

    if gamma1:
        seq = seq + per_sample(occ) * gamma1
    if gamma2:
        seq = seq + per_sample(cam) * gamma2
    return seq


def encode(images, z, cameras, params, cfg) -> FeatureBundle:
    """Run the shared encoder on a batch.

    ``images`` (B, H, W, 3) array, ``z`` (B, C) occlusion bits, ``cameras``
    (B,) ids.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:3] != (cfg.height, cfg.width):
        raise ShapeError(f"image size {images.shape[1:3]} != configured {(cfg.height, cfg.width)}")
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    cameras = np.atleast_1d(np.asarray(cameras, dtype=np.int64))
    raw = patchify(images.astype(params["enc.patch.w"].dtype), cfg.patch, cfg.stride)
    patches = layers.dense(T.Tensor(raw), params, "enc.patch")
    occ = lookup_occlusion_embedding(params["enc.occ"], z)
    cam = T.embedding(params["enc.cam"], cameras)
    x = assemble_sequence(patches, params["enc.cls"], params["enc.parts"], params["enc.pos"],
                          occ, cam, cfg.gamma1, cfg.gamma2)
    for i in range(cfg.depth):
        x = layers.encoder_block(x, params, f"enc.block{i}", cfg.heads)
    x = layers.norm(x, params, "enc.ln")
    k1 = cfg.n_parts + 1
    return FeatureBundle(f_g=x[:, 0, :], f_parts=x[:, 1:1 + k1, :], f_patch=x[:, 1 + k1:, :], tokens=x)
