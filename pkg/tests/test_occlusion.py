import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ogfr.occlusion import CoarseMap, estimate, estimate_batch, occlusion_index, pixel_counts
from ogfr.rng import Stream
from ogfr.synth import ParsingMask, build_splits, occlude
from ogfr.config import Config


def _mask(counts, shape=(16, 8)):
    labels = np.zeros(shape, dtype=np.uint8).ravel()
    pos = 0
    for label, n in counts.items():
        labels[pos:pos + n] = label
        pos += n
    return ParsingMask(labels.reshape(shape))


class TestCounts:
    def test_background_only(self):
        np.testing.assert_array_equal(pixel_counts(_mask({})), [0, 0, 0, 0])

    def test_twelve_head_pixels(self):
        assert pixel_counts(_mask({1: 12}))[0] == 12

    def test_arms_merge(self):
        assert pixel_counts(_mask({2: 7, 3: 5}))[1] == 12

    def test_legs_include_feet(self):
        np.testing.assert_array_equal(pixel_counts(_mask({5: 1, 6: 2, 7: 3, 8: 4, 4: 9})), [0, 0, 9, 10])

    def test_bad_grouping(self):
        with pytest.raises(ValueError):
            CoarseMap(groups=((1,), (2,)))


class TestEstimate:
    def test_below_threshold_is_occluded(self):
        assert estimate(_mask({1: 4}), 5)[0] == 1

    def test_boundary_is_visible(self):
        assert estimate(_mask({1: 5}), 5)[0] == 0

    def test_holistic_renders_are_0000(self):
        sp = build_splits(5, 3, Config(seed=1))
        for s in sp["train"]:
            np.testing.assert_array_equal(estimate(s.mask, 5), [0, 0, 0, 0])

    def test_batch_matches_single(self):
        sp = build_splits(3, 2, Config(seed=2))
        labels = np.stack([s.mask.labels for s in sp["query"] + sp["train"]])
        expected = np.stack([estimate(lab, 5) for lab in labels])
        np.testing.assert_array_equal(estimate_batch(labels, 5), expected)

    def test_index(self):
        assert occlusion_index([0, 0, 0, 0]) == 0
        assert occlusion_index([1, 0, 0, 0]) == 1
        assert occlusion_index([0, 0, 0, 1]) == 8
        assert len({occlusion_index(z) for z in np.ndindex(2, 2, 2, 2)}) == 16

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_occlusion_never_clears_a_bit(self, seed):
        sp = build_splits(2, 2, Config(seed=seed % 7))
        s = sp["train"][seed % 4]
        before = estimate(s.mask, 5)
        _, m2, _ = occlude(s.image, s.mask, Stream(seed), area=(0.05, 0.9))
        after = estimate(m2, 5)
        assert np.all(after >= before)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 12), min_size=8, max_size=8), st.integers(0, 8))
    def test_doubling_counts_only_clears_bits(self, counts, lam):
        small = _mask({k + 1: c for k, c in enumerate(counts)}, (16, 16))
        big = _mask({k + 1: 2 * c for k, c in enumerate(counts)}, (16, 16))
        z1, z2 = estimate(small, lam), estimate(big, lam)
        assert np.all(z2 <= z1)
