import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ogfr import losses
from ogfr import tensor as T
from ogfr.errors import ConfigError, ShapeError


def _t(x):
    return T.Tensor(np.asarray(x, dtype=np.float64))


@pytest.fixture
def feats(f64):
    r = np.random.default_rng(0)
    return _t(r.normal(size=(3, 9, 16))), _t(r.normal(size=(3, 9, 16))), _t(r.normal(size=(9, 16, 5)))


class TestMse:
    def test_equal_is_zero(self, feats):
        a, _, _ = feats
        assert float(losses.loss_mse(a, a).data) == 0.0

    def test_all_ones_difference(self, f64):
        a = _t(np.zeros((1, 7, 5)))
        b = _t(np.ones((1, 7, 5)))
        assert float(losses.loss_mse(a, b, "sum").data) == 35.0
        assert float(losses.loss_mse(a, b, "token").data) == 5.0

    def test_symmetric(self, feats):
        a, b, _ = feats
        assert float(losses.loss_mse(a, b).data) == float(losses.loss_mse(b, a).data)

    def test_errors(self, feats):
        a, b, _ = feats
        with pytest.raises(ShapeError):
            losses.loss_mse(a, _t(np.zeros((3, 8, 16))))
        with pytest.raises(ConfigError):
            losses.loss_mse(a, b, "mean")


class TestCos:
    def test_identical_is_zero(self, feats):
        a, _, _ = feats
        assert abs(float(losses.loss_cos(a, a).data)) < 1e-12

    def test_opposite_is_two(self, feats):
        a, _, _ = feats
        assert float(losses.loss_cos(a, _t(-a.data)).data) == pytest.approx(2.0, abs=1e-12)

    def test_scale_invariant(self, feats):
        a, b, _ = feats
        np.testing.assert_allclose(losses.loss_cos(a, _t(10 * b.data)).data, losses.loss_cos(a, b).data,
                                   rtol=1e-12)


class TestKd:
    def test_equal_features_zero_kl(self, feats):
        a, _, heads = feats
        assert abs(float(losses.kl_term(a, a, heads).data)) < 1e-12

    def test_zero_weights(self, feats):
        a, b, heads = feats
        assert float(losses.loss_kd(a, b, [0, 1, 2], heads, 0.0, 0.0).data) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_kl_non_negative(self, seed):
        r = np.random.default_rng(seed)
        with T.precision(np.float64):
            a, b = _t(r.normal(scale=3, size=(2, 9, 4))), _t(r.normal(scale=3, size=(2, 9, 4)))
            assert float(losses.kl_term(a, b, _t(r.normal(size=(9, 4, 6)))).data) >= -1e-12

    def test_teacher_detached(self, f64):
        r = np.random.default_rng(1)
        fh, fo = T.parameter(r.normal(size=(2, 9, 8))), T.parameter(r.normal(size=(2, 9, 8)))
        losses.loss_kd(fh, fo, [0, 1], _t(r.normal(size=(9, 8, 3))), 0.3, 0.4).backward()
        assert fh.grad is None and np.abs(fo.grad).max() > 0

    def test_pinned_target_matches_default(self, feats):
        a, b, heads = feats
        target = losses.teacher_log_probs(a, heads)
        np.testing.assert_array_equal(losses.loss_kd(a, b, [0, 1, 2], heads, 0.3, 0.4).data,
                                      losses.loss_kd(a, b, [0, 1, 2], heads, 0.3, 0.4, target).data)


class TestEn:
    def test_uniform_logits(self, f64):
        heads = _t(np.zeros((9, 4, 10)))
        f = _t(np.ones((3, 4)))
        assert float(losses.loss_en(f, f, [0, 4, 9], heads).data) == pytest.approx(2 * np.log(10))

    def test_perfect_logits_limit(self, f64):
        heads = np.zeros((9, 3, 3))
        heads[0] = np.eye(3) * 200.0
        f = _t(np.eye(3))
        assert float(losses.loss_en(f, f, [0, 1, 2], _t(heads)).data) < 1e-12

    def test_non_negative(self, feats):
        a, b, heads = feats
        assert float(losses.loss_en(a[:, 0, :], b[:, 0, :], [0, 1, 2], heads).data) >= 0


class TestMask:
    def test_uniform_is_log_k1(self, f64):
        corr = _t(np.full((2, 8, 9), 1.0 / 9))
        labels = np.random.default_rng(0).integers(0, 9, size=(2, 16, 8))
        assert float(losses.loss_mask(corr, labels, (4, 2), 16, 8).data) == pytest.approx(np.log(9))

    def test_one_hot_limit(self, f64):
        # a one-patch grid upsamples to a constant map, so a one-hot row matches a constant mask
        one = np.full((1, 1, 9), 1e-14)
        one[0, 0, 3] = 1.0
        val = float(losses.loss_mask(_t(one), np.full((1, 16, 8), 3), (1, 1), 16, 8).data)
        assert 0 <= val < 1e-10

    def test_non_negative(self, f64):
        r = np.random.default_rng(2)
        corr = T.softmax(_t(r.normal(size=(2, 8, 9))), axis=-1)
        assert float(losses.loss_mask(corr, r.integers(0, 9, (2, 16, 8)), (4, 2), 16, 8).data) >= 0

    def test_upsample_rows_are_convex(self):
        u = losses.upsample_matrix(8, 4, 64, 32)
        np.testing.assert_allclose(u.sum(1), 1.0)
        assert u.min() >= 0


class TestTriplet:
    def test_identical_features_give_margin(self, f64):
        x = _t(np.ones((6, 4)))
        assert float(losses.triplet_batch_hard(x, [0, 0, 1, 1, 2, 2], 0.3).data) == pytest.approx(0.3, abs=1e-5)

    def test_separated_clusters_zero(self, f64):
        x = np.repeat(np.eye(3) * 10.0, 2, axis=0)
        assert float(losses.triplet_batch_hard(_t(x), [0, 0, 1, 1, 2, 2], 0.3).data) == 0.0

    def test_non_negative_and_part_average(self, feats):
        a, _, _ = feats
        val = float(losses.loss_triplet(a, [0, 1, 1], 0.3).data)
        glob = float(losses.triplet_batch_hard(a[:, 0, :], [0, 1, 1], 0.3).data)
        parts = np.mean([float(losses.triplet_batch_hard(a[:, i, :], [0, 1, 1], 0.3).data) for i in range(1, 9)])
        assert val >= 0
        assert val == pytest.approx(glob + parts, rel=1e-12)

    def test_single_identity_rejected(self, feats):
        with pytest.raises(ConfigError):
            losses.triplet_batch_hard(feats[0][:, 0, :], [1, 1, 1], 0.3)


class TestTotal:
    parts = {"mse": 1.0, "cos": 2.0, "kd": 3.0, "en": 4.0, "tr": 5.0, "mask": 6.0}

    def _tensors(self, **over):
        return {k: _t(over.get(k, v)) for k, v in self.parts.items()}

    def test_weights(self, f64):
        assert float(losses.total_loss(self._tensors(), 0.5, 0.5).data) == 1 + 1 + 3 + 4 + 2.5 + 6
        assert float(losses.total_loss(self._tensors(), 0.0, 0.0).data) == 1 + 3 + 4 + 6

    def test_all_zero(self, f64):
        zero = {k: _t(0.0) for k in self.parts}
        assert float(losses.total_loss(zero, 0.5, 0.5).data) == 0.0

    def test_derivative_wrt_mu1_is_cos(self, f64):
        eps = 1e-3
        up = float(losses.total_loss(self._tensors(), 0.5 + eps, 0.5).data)
        down = float(losses.total_loss(self._tensors(), 0.5 - eps, 0.5).data)
        assert (up - down) / (2 * eps) == pytest.approx(2.0)
