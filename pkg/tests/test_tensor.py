import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ogfr import tensor as T
from ogfr.errors import ContractError, NumericError, ShapeError


def _p(r, *shape, positive=False):
    x = r.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return T.parameter(x)


def _shape(r, lo=1, hi=4, ndim=2):
    return tuple(int(v) for v in r.integers(lo, hi + 1, size=ndim))


def _weighted(out, r):
    """Reduce any output to a scalar with fixed random weights."""
    return (out * T.Tensor(r.normal(size=out.shape))).sum()


# op name -> builder(r) returning (fn, params); shapes are drawn per seed
def _binary(op):
    def build(r):
        s = _shape(r, ndim=3)
        a, b = _p(r, *s), _p(r, *s[1:], positive=op is T.div)
        w = r.normal(size=s)
        return (lambda: (op(a, b) * T.Tensor(w)).sum()), [a, b]
    return build


def _unary(op, positive=False):
    def build(r):
        s = _shape(r, ndim=3)
        a = _p(r, *s, positive=positive)
        w = r.normal(size=s)
        return (lambda: (op(a) * T.Tensor(w)).sum()), [a]
    return build


def _relu(r):
    s = _shape(r, ndim=2)
    x = r.normal(size=s)
    x = np.where(np.abs(x) < 0.05, 0.3, x)  # keep probes away from the kink
    a = T.parameter(x)
    w = r.normal(size=s)
    return (lambda: (T.relu(a) * T.Tensor(w)).sum()), [a]


def _reduce(op):
    def build(r):
        s = _shape(r, ndim=3)
        a = _p(r, *s)
        axis = int(r.integers(0, 3))
        w = r.normal(size=np.delete(np.array(s), axis))
        return (lambda: (op(a, axis=axis) * T.Tensor(w)).sum()), [a]
    return build


def _reshape(r):
    s = _shape(r, ndim=3)
    a = _p(r, *s)
    w = r.normal(size=(s[0], s[1] * s[2]))
    return (lambda: (T.reshape(a, (s[0], -1)) * T.Tensor(w)).sum()), [a]


def _transpose(r):
    s = _shape(r, ndim=3)
    a = _p(r, *s)
    axes = tuple(int(v) for v in r.permutation(3))
    w = r.normal(size=tuple(s[i] for i in axes))
    return (lambda: (T.transpose(a, axes) * T.Tensor(w)).sum()), [a]


def _getitem(r):
    s = _shape(r, lo=2, hi=5, ndim=2)
    a = _p(r, *s)
    idx = r.integers(0, s[0], size=5)  # repeats exercise accumulation
    w = r.normal(size=(5, s[1]))
    return (lambda: (a[idx] * T.Tensor(w)).sum()), [a]


def _embedding(r):
    table = _p(r, 6, 3)
    idx = r.integers(0, 6, size=4)
    w = r.normal(size=(4, 3))
    return (lambda: (T.embedding(table, idx) * T.Tensor(w)).sum()), [table]


def _concat(r):
    a, b = _p(r, 2, int(r.integers(1, 4)), 3), _p(r, 2, int(r.integers(1, 4)), 3)
    w = r.normal(size=(2, a.shape[1] + b.shape[1], 3))
    return (lambda: (T.concat([a, b], axis=1) * T.Tensor(w)).sum()), [a, b]


def _broadcast(r):
    a = _p(r, 1, 4)
    w = r.normal(size=(3, 5, 4))
    return (lambda: (T.broadcast_to(a, (3, 5, 4)) * T.Tensor(w)).sum()), [a]


def _matmul(r):
    m, k, n = _shape(r, ndim=3)
    bs = int(r.integers(1, 3))
    a, b = _p(r, bs, m, k), _p(r, k, n)
    w = r.normal(size=(bs, m, n))
    return (lambda: (T.matmul(a, b) * T.Tensor(w)).sum()), [a, b]


def _linear(r):
    x, wt, bias = _p(r, 3, 4), _p(r, 4, 2), _p(r, 2)
    w = r.normal(size=(3, 2))
    return (lambda: (T.linear(x, wt, bias) * T.Tensor(w)).sum()), [x, wt, bias]


def _softmax(r):
    a = _p(r, *_shape(r, lo=2, hi=6, ndim=2))
    w = r.normal(size=a.shape)
    return (lambda: (T.softmax(a, axis=-1) * T.Tensor(w)).sum()), [a]


def _log_softmax(r):
    a = _p(r, *_shape(r, lo=2, hi=6, ndim=2))
    w = r.normal(size=a.shape)
    return (lambda: (T.log_softmax(a, axis=-1) * T.Tensor(w)).sum()), [a]


def _layer_norm(r):
    d = int(r.integers(2, 7))
    x, g, b = _p(r, 3, d), _p(r, d), _p(r, d)
    w = r.normal(size=(3, d))
    return (lambda: (T.layer_norm(x, g, b) * T.Tensor(w)).sum()), [x, g, b]


def _power(r):
    a = _p(r, *_shape(r), positive=True)
    w = r.normal(size=a.shape)
    return (lambda: ((a ** 2.5) * T.Tensor(w)).sum()), [a]


OPS = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul), "div": _binary(T.div),
    "neg": _unary(T.neg), "exp": _unary(T.exp), "log": _unary(T.log, positive=True),
    "sqrt": _unary(T.sqrt, positive=True), "sigmoid": _unary(T.sigmoid), "gelu": _unary(T.gelu),
    "relu": _relu, "power": _power, "sum": _reduce(T.tsum), "mean": _reduce(T.mean),
    "reshape": _reshape, "transpose": _transpose, "getitem": _getitem, "embedding": _embedding,
    "concat": _concat, "broadcast_to": _broadcast, "matmul": _matmul, "linear": _linear,
    "softmax": _softmax, "log_softmax": _log_softmax, "layer_norm": _layer_norm,
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradient_matches_finite_differences(op, seed, f64):
    r = np.random.default_rng([seed, len(op)])
    fn, params = OPS[op](r)
    assert T.grad_check(fn, params, floor=1e-4) < 1e-4


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.5, -2.0], [0.25, 3.0]])
        np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), T.Tensor(x)).data, x)

    def test_hand_arithmetic(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_gradient_5x4_4x3(self, f64):
        r = np.random.default_rng(3)
        a, b = T.parameter(r.normal(size=(5, 4))), T.parameter(r.normal(size=(4, 3)))
        w = T.Tensor(r.normal(size=(5, 3)))
        assert T.grad_check(lambda: (T.matmul(a, b) * w).sum(), [a, b]) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_large_logit_does_not_overflow(self):
        out = T.softmax(T.Tensor(np.array([1000.0, 0.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_gradient_length7(self, f64):
        r = np.random.default_rng(7)
        x = T.parameter(r.normal(size=7))
        w = T.Tensor(r.normal(size=7))
        assert T.grad_check(lambda: (T.softmax(x) * w).sum(), [x]) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 9))
    def test_rows_sum_to_one_and_positive(self, seed, rows, cols):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
        with T.precision(np.float64):
            out = T.softmax(T.Tensor(x)).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)
        assert np.all(out > 0)


class TestLayerNorm:
    def test_constant_slice_gives_zero(self):
        out = T.layer_norm(T.Tensor(np.full((2, 5), 3.0)), T.Tensor(np.ones(5)), T.Tensor(np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_zero_gain_returns_bias(self):
        bias = np.arange(4.0)
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.zeros(4)), T.Tensor(bias))
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (3, 4)))

    def test_gradient(self, f64):
        fn, params = _layer_norm(np.random.default_rng(11))
        assert T.grad_check(fn, params) < 1e-6


class TestTape:
    def test_sum_of_squares_gradcheck(self, f64):
        x = T.parameter(np.random.default_rng(0).normal(size=6))
        assert T.grad_check(lambda: (x * x).sum(), [x]) < 1e-8

    def test_reused_tensor_accumulates(self, f64):
        x = T.parameter([1.5])
        (x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_topological_order_and_single_visit(self, f64):
        x = T.parameter(np.ones(3))
        y = x * 2.0
        z = (y + y * x).sum()
        tape = T.Tape.from_output(z)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for node in tape.nodes:
            for p in node.parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        z.backward()
        np.testing.assert_allclose(x.grad, 2.0 + 4.0 * x.data)

    def test_grad_check_rejects_vector_output(self, f64):
        x = T.parameter(np.ones(3))
        with pytest.raises(ContractError):
            T.grad_check(lambda: x * 2.0, [x])

    def test_backward_on_vector_needs_cotangent(self):
        x = T.parameter(np.ones(3))
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = T.parameter(np.ones(3))
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.parents == ()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_debug_checks_catch_nan(self):
        with T.debug_checks(), pytest.raises(NumericError):
            T.log(T.Tensor([-1.0]))

    def test_default_precision_is_32_bit(self):
        assert T.parameter([1.0]).dtype == np.float32
        with T.precision(np.float64):
            assert T.parameter([1.0]).dtype == np.float64

    def test_gradient_shape_matches_data(self, f64):
        a = T.parameter(np.ones((2, 3)))
        b = T.parameter(np.ones(3))
        (a * b).sum().backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_grad_check_keeps_scalar_shape(self, f64):
        b = T.parameter(np.array(0.3))
        T.grad_check(lambda: (b * b).sum(), [b])
        assert b.shape == ()
