import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swift4d.tensor import ShapeError, Tape, Tensor, grad_check, no_grad
from swift4d.tensor import functional as F
from swift4d.tensor.core import make_result


def rand(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        out = F.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_permutation(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(out.data, [[2.0, 1.0], [4.0, 3.0]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 6))
        out = F.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, triple_loop_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(1)
        a = rand(rng, 2, 3, 4, 5)
        b = rand(rng, 3, 5, 2)
        assert grad_check(lambda: (F.matmul(a, b) ** 2).sum(), [a, b]) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_dominance_is_stable(self):
        out = F.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_exp_sum_oracle(self):
        x = [1.0, 2.0, 3.0]
        ref = [math.exp(v) / sum(math.exp(u) for u in x) for v in x]
        np.testing.assert_allclose(F.softmax(Tensor(x)).data, ref, atol=1e-12, rtol=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_rows_sum_to_one(self, seed, axis):
        x = np.random.default_rng(seed).normal(scale=10, size=(3, 4, 5, 6))
        out = F.softmax(Tensor(x), axis=axis).data
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-9)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = F.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point(self):
        out = F.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-15)

    def test_moments(self):
        x = np.random.default_rng(3).normal(2.0, 5.0, size=8)
        out = F.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
        assert abs(out.mean()) < 1e-10
        assert abs(out.var() - 1.0) < 1e-6

    def test_gamma_shape_checked(self):
        with pytest.raises(ShapeError):
            F.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestGelu:
    def test_zero(self):
        assert F.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = F.gelu(Tensor([30.0, -30.0])).data
        assert abs(out[0] - 30.0) < 1e-9
        assert abs(out[1]) < 1e-9

    def test_scalar_reference(self):
        import mpmath

        mpmath.mp.dps = 40
        x = mpmath.mpf(1)
        ref = 0.5 * x * (1 + mpmath.tanh(mpmath.sqrt(2 / mpmath.pi) * (x + mpmath.mpf("0.044715") * x**3)))
        assert abs(F.gelu(Tensor([1.0])).data[0] - float(ref)) < 1e-9


class TestRelayout:
    def test_reshape_round_trip(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        out = Tensor(x).reshape(6, 4).reshape(2, 3, 4)
        np.testing.assert_array_equal(out.data, x)

    def test_identity_permute(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        np.testing.assert_array_equal(Tensor(x).permute(0, 1, 2).data, x)

    def test_permute_index_map_exhaustive(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        out = Tensor(x).permute(2, 0, 1).data
        assert out.shape == (4, 2, 3)
        for i in range(2):
            for j in range(3):
                for k in range(4):
                    assert out[k, i, j] == x[i, j, k]

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(6)).reshape(4, 2)

    def test_bad_permutation(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).permute(0, 0)

    def test_roll_by_hand(self):
        out = F.roll(Tensor([1.0, 2.0, 3.0, 4.0]), (2,), (0,))
        np.testing.assert_array_equal(out.data, [3.0, 4.0, 1.0, 2.0])

    def test_zero_roll_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5, 6))
        np.testing.assert_array_equal(F.roll(Tensor(x), (0, 0, 0, 0), (1, 2, 3, 4)).data, x)

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(0, 10_000),
        st.lists(st.integers(-20, 20), min_size=4, max_size=4),
        st.sampled_from([np.float32, np.float64]),
    )
    def test_roll_round_trip_bitwise(self, seed, shifts, dtype):
        x = np.random.default_rng(seed).normal(size=(2, 3, 4, 5, 2)).astype(dtype)
        there = F.roll(Tensor(x), shifts, (0, 1, 2, 3))
        back = F.roll(there, [-s for s in shifts], (0, 1, 2, 3))
        assert back.data.dtype == dtype
        np.testing.assert_array_equal(back.data, x)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.permutations([0, 1, 2, 3]))
    def test_permute_round_trip_bitwise(self, seed, order):
        x = np.random.default_rng(seed).normal(size=(2, 3, 4, 5)).astype(np.float32)
        inverse = tuple(int(i) for i in np.argsort(order))
        np.testing.assert_array_equal(Tensor(x).permute(*order).permute(*inverse).data, x)


class TestBackward:
    def test_sum_gives_ones(self):
        x = rand(np.random.default_rng(0), 3, 4)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_gives_2x(self):
        x = rand(np.random.default_rng(0), 3, 4)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_non_scalar_rejected(self):
        x = rand(np.random.default_rng(0), 3)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rand(rng, 3, 5)
        w = rand(rng, 5, 4)
        g, b = rand(rng, 4), rand(rng, 4)

        def f():
            h = F.layer_norm(F.matmul(x, w), g, b)
            return (F.softmax(h, axis=-1) * Tensor(np.arange(4.0))).sum()

        assert grad_check(f, [x, w, g, b]) < 1e-4

    def test_fan_out_accumulates(self):
        rng = np.random.default_rng(5)
        x = rand(rng, 4, 3)
        f_val = lambda: (F.exp(x) * 0.5).sum()  # noqa: E731
        g_val = lambda: (F.gelu(x) ** 2).sum()  # noqa: E731
        f_val().backward()
        gf = x.grad.copy()
        x.grad = None
        g_val().backward()
        gg = x.grad.copy()
        x.grad = None
        (f_val() + g_val()).backward()
        np.testing.assert_allclose(x.grad, gf + gg, atol=1e-12, rtol=0)

    def test_no_grad_records_nothing(self):
        x = rand(np.random.default_rng(0), 3)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad and y.is_leaf


class TestTape:
    def test_topological_order_and_single_visit(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 3)
        a = x * 2.0
        b = F.exp(a) + a
        loss = (b * a).sum()
        tape = Tape.from_output(loss)
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(position) == len(tape.nodes)
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert position[id(parent)] < position[id(node)]

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(2))


# -------------------------------------------------------------- grad checks
PRIMITIVES = {
    "add_broadcast": lambda a, b: ((a + b[0]) ** 2).sum(),
    "sub": lambda a, b: ((a - b) ** 2).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "exp": lambda a, b: F.exp(a * 0.3).sum(),
    "log": lambda a, b: F.log(a * a + 1.0).sum(),
    "sqrt": lambda a, b: F.sqrt(a * a + 0.5).sum(),
    "tanh": lambda a, b: (F.tanh(a) * b).sum(),
    "gelu": lambda a, b: (F.gelu(a) * b).sum(),
    "log_sigmoid": lambda a, b: (F.log_sigmoid(a * 3.0) * b).sum(),
    "mean": lambda a, b: (a.mean(axis=1) ** 2).sum(),
    "matmul": lambda a, b: (F.matmul(a, F.swap_last(b)) ** 2).sum(),
    "linear": lambda a, b: (F.linear(a, F.swap_last(b)[:, :3], b[0, :3]) ** 2).sum(),
    "softmax": lambda a, b: (F.softmax(a, axis=-1) * b).sum(),
    "layer_norm": lambda a, b: (F.layer_norm(a, b[0], b[1]) * b).sum(),
    "reshape_permute": lambda a, b: (a.reshape(4, 3).permute(1, 0) * b.reshape(3, 4)).sum(),
    "roll": lambda a, b: (F.roll(a, (1, -2), (0, 1)) * b).sum(),
    "pad": lambda a, b: (F.pad_trailing(a, (1, 2)) ** 2).sum(),
    "getitem_fancy": lambda a, b: (a[:, np.array([0, 2, 2, 1])] ** 2).sum(),
    "concat": lambda a, b: (F.concat([a, b], axis=1) ** 3).sum(),
    "stack": lambda a, b: (F.stack([a, b], axis=0) ** 3).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_backward_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    assert grad_check(lambda: PRIMITIVES[name](a, b), [a, b], eps=1e-5) < 1e-4


class TestGradCheck:
    def test_linear_function_exact(self):
        x = rand(np.random.default_rng(0), 4, 5)
        assert grad_check(lambda t: t.sum(), x) < 1e-10

    def test_detects_wrong_backward(self):
        def bad_square(t):
            return make_result(t.data**2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

        x = rand(np.random.default_rng(0), 6)
        assert grad_check(lambda t: bad_square(t).sum(), x) > 1e-2

    def test_requires_double(self):
        with pytest.raises(TypeError):
            grad_check(lambda t: t.sum(), Tensor(np.zeros(3, dtype=np.float32)))
