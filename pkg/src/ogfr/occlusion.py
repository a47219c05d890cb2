"""Occlusion type from a parsing mask: merge fine parts, count, threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .synth import ParsingMask

# fine label -> coarse index; background (0) is excluded.
# head | arms | torso | legs + feet
DEFAULT_GROUPS = ((1,), (2, 3), (4,), (5, 6, 7, 8))
COARSE_NAMES = ("head", "arms", "torso", "legs")


@dataclass(frozen=True)
class CoarseMap:
    groups: tuple = DEFAULT_GROUPS
    n_parts: int = 8

    def __post_init__(self):
        flat = sorted(p for g in self.groups for p in g)
        if flat != list(range(1, self.n_parts + 1)):
            raise ValueError("every fine part 1..K must map to exactly one coarse part")

    @property
    def n_coarse(self) -> int:
        return len(self.groups)

    def lookup(self) -> np.ndarray:
        """``table[fine] = coarse`` with ``-1`` for background."""
        table = np.full(self.n_parts + 1, -1, dtype=np.int64)
        for c, group in enumerate(self.groups):
            table[list(group)] = c
        return table


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, ParsingMask) else np.asarray(mask)


def pixel_counts(mask, cmap: CoarseMap = CoarseMap()) -> np.ndarray:
    """Visible pixels per coarse part (length C)."""
    return kernels.coarse_counts(_labels(mask), cmap.lookup(), cmap.n_coarse)[0]


def estimate(mask, lam: int = 5, cmap: CoarseMap = CoarseMap()) -> np.ndarray:
    """Occlusion bits: ``z[c] = 1`` iff coarse part c has fewer than ``lam`` pixels."""
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    return (pixel_counts(mask, cmap) < lam).astype(np.int64)


def estimate_batch(labels: np.ndarray, lam: int = 5, cmap: CoarseMap = CoarseMap()) -> np.ndarray:
    """Occlusion bits for a (B, H, W) stack of label maps."""
    counts = kernels.coarse_counts(labels, cmap.lookup(), cmap.n_coarse)
    return (counts < lam).astype(np.int64)


def occlusion_index(z) -> int:
    """Flat row of the occlusion embedding table: ``sum_c z[c] * 2**c``."""
    z = np.asarray(z, dtype=np.int64)
    return int((z << np.arange(z.size)).sum())
