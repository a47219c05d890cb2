"""Student-branch retrieval: part visibility, gated distances, CMC and mAP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fep, kernels, losses
from . import tensor as T
from .encoder import encode, grid_shape
from .errors import ConfigError
from .model import student_forward
from .occlusion import estimate_batch


@dataclass
class GalleryEntry:
    identity: int
    camera: int
    f_g: np.ndarray      # (D,)
    f_parts: np.ndarray  # (K, D)
    v: np.ndarray        # (K,) bool; the global feature is always visible


@dataclass
class FeatureSet:
    ids: np.ndarray
    cameras: np.ndarray
    f_g: np.ndarray      # (n, D)
    f_parts: np.ndarray  # (n, K, D)
    v: np.ndarray        # (n, K) bool

    def __len__(self):
        return self.ids.size

    def entry(self, i) -> GalleryEntry:
        return GalleryEntry(int(self.ids[i]), int(self.cameras[i]), self.f_g[i], self.f_parts[i], self.v[i])

    @classmethod
    def from_entries(cls, entries):
        return cls(np.array([e.identity for e in entries]), np.array([e.camera for e in entries]),
                   np.stack([e.f_g for e in entries]), np.stack([e.f_parts for e in entries]),
                   np.stack([np.asarray(e.v, dtype=bool) for e in entries]))


def visibility(up) -> np.ndarray:
    """Visibility bits of one image: part i is visible iff it wins a pixel.

    ``up`` is the per-pixel part distribution, (H, W, K+1) or (H*W, K+1);
    channel 0 (background) is not reported.  Returns (K,) booleans.
    """
    up = np.asarray(up)
    return part_visibility(up.reshape(1, -1, up.shape[-1]))[0]


def distance(q: GalleryEntry, g: GalleryEntry) -> float:
    """Average of the global distance and the distances of co-visible parts."""
    both = np.asarray(q.v, dtype=bool) & np.asarray(g.v, dtype=bool)
    total = float(np.linalg.norm(q.f_g - g.f_g))
    for i in np.flatnonzero(both):
        total += float(np.linalg.norm(q.f_parts[i] - g.f_parts[i]))
    return total / (both.sum() + 1.0)


def distance_matrix(query: FeatureSet, gallery: FeatureSet) -> np.ndarray:
    return kernels.gated_distances(query.f_g, query.f_parts, query.v,
                                   gallery.f_g, gallery.f_parts, gallery.v)


def extract(params, cfg, images, labels, cameras, ids, batch_size=32) -> FeatureSet:
    """Student-branch features and visibility for a stack of images.

    ``labels`` are the parsing masks of the same images (the occlusion type
    at inference comes from the parser, here the synthetic mask).
    """
    m = cfg.model
    grid = grid_shape(m.height, m.width, m.patch, m.stride)
    out_g, out_p, out_v = [], [], []
    with T.no_grad():
        for lo in range(0, len(ids), batch_size):
            sl = slice(lo, lo + batch_size)
            z = estimate_batch(labels[sl], m.occlusion_threshold)
            bundle = encode(images[sl], z, cameras[sl], params, m)
            feats = student_forward(bundle, params, m)
            corr = fep.correlation(bundle.f_patch, bundle.f_parts)
            up = losses.upsample_correlation(corr, grid, m.height, m.width).data
            out_g.append(feats.f_g.data.astype(np.float64))
            out_p.append(feats.f_parts.data.astype(np.float64))
            out_v.append(part_visibility(up))
    return FeatureSet(np.asarray(ids), np.asarray(cameras), np.concatenate(out_g),
                      np.concatenate(out_p), np.concatenate(out_v))


def part_visibility(up) -> np.ndarray:
    """(B, P, K+1) per-pixel distributions -> (B, K) visibility bits."""
    winner = np.asarray(up).argmax(axis=-1)
    k1 = up.shape[-1]
    return np.stack([(winner == c).any(axis=-1) for c in range(1, k1)], axis=-1)


def evaluate_features(query: FeatureSet, gallery: FeatureSet, max_rank=10, dist=None) -> dict:
    if len(gallery) == 0:
        raise ConfigError("gallery is empty")
    if len(query) == 0:
        raise ConfigError("query set is empty")
    if dist is None:
        dist = distance_matrix(query, gallery)
    cmc, ap, valid = kernels.rank_metrics(dist, query.ids, gallery.ids, query.cameras,
                                          gallery.cameras, max(max_rank, 10))
    if not valid.any():
        raise ConfigError("no query has a valid match in the gallery")
    curve = cmc[valid].mean(axis=0)
    return {
        "rank1": float(curve[0]),
        "rank5": float(curve[4]),
        "rank10": float(curve[9]),
        "mAP": float(ap[valid].mean()),
        "n_query": int(len(query)),
        "n_gallery": int(len(gallery)),
        "n_valid_query": int(valid.sum()),
    }


def evaluate(params, cfg, query_samples, gallery_samples) -> dict:
    """CMC rank-1/5/10 and mAP of student features over sample lists."""
    if not gallery_samples:
        raise ConfigError("gallery is empty")
    q = extract_samples(params, cfg, query_samples)
    g = extract_samples(params, cfg, gallery_samples)
    return evaluate_features(q, g)


def extract_samples(params, cfg, samples, id_map=None) -> FeatureSet:
    images = np.stack([s.image.pixels for s in samples])
    labels = np.stack([s.mask.labels for s in samples])
    cams = np.array([s.image.camera for s in samples])
    ids = np.array([s.image.identity for s in samples])
    if id_map is not None:
        ids = np.array([id_map[i] for i in ids])
    return extract(params, cfg, images, labels, cams, ids)


def train_query_gallery(samples):
    """Split training samples into a query (first image of each identity) and a gallery (the rest)."""
    seen, query, gallery = set(), [], []
    for s in samples:
        if s.image.identity in seen:
            gallery.append(s)
        else:
            seen.add(s.image.identity)
            query.append(s)
    return query, gallery


def leave_one_out_rank1(features: FeatureSet) -> float:
    """Rank-1 of each sample against all others (only the sample itself is excluded)."""
    marker = np.arange(len(features))
    fs_q = FeatureSet(features.ids, marker, features.f_g, features.f_parts, features.v)
    return evaluate_features(fs_q, fs_q)["rank1"]
