import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_probe import tensor as T
from causal_probe.errors import ContractError, DimensionError
from causal_probe.gradcheck import PRIMITIVES, TOLERANCE, check_primitive
from causal_probe.serialize import load_container, save_container, tensor_from_bytes, tensor_to_bytes
from causal_probe.errors import FormatError
from causal_probe.tensor import Graph, Tensor, backward, no_grad


def naive_conv(x, K, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    F, _, k, _ = K.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, F, OH, OW))
    for n in range(B):
        for f in range(F):
            for i in range(OH):
                for j in range(OW):
                    acc = b[f]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * K[f, c, u, v]
                    out[n, f, i, j] = acc
    return out


class TestDense:
    def test_identity_weights(self):
        out = T.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_hand_dot_product(self):
        out = T.dense(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [[7.0, 9.0]])

    def test_zero_input_passes_bias(self, rng):
        out = T.dense(Tensor([[0.0, 0.0]]), Tensor(rng.normal(size=(2, 2))), Tensor([5.0, -5.0]))
        np.testing.assert_array_equal(out.data, [[5.0, -5.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


class TestConv:
    def test_identity_1x1(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_full_sum(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_corner_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = T.conv2d(x, Tensor(np.array([[[[1.0, 0.0], [0.0, 0.0]]]])))
        np.testing.assert_array_equal(out.data, [[[[1.0]]]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
           st.integers(1, 2), st.integers(0, 1), st.integers(0, 10_000))
    def test_matches_naive_loops(self, B, C, F, k, stride, pad, seed):
        rng = np.random.default_rng(seed)
        H, W = k + 2, k + 3
        x, K, b = rng.normal(size=(B, C, H, W)), rng.normal(size=(F, C, k, k)), rng.normal(size=F)
        out = T.conv2d(Tensor(x), Tensor(K), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, naive_conv(x, K, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            assert T.sigmoid(Tensor([1000.0])).data[0] == 1.0
            assert T.sigmoid(Tensor([-1000.0])).data[0] == 0.0


class TestSoftmax:
    def test_uniform(self):
        p, _ = T.softmax_logprob(Tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(p.data, [[0.5, 0.5]])

    def test_shift_invariant_no_overflow(self):
        with np.errstate(over="raise"):
            p, _ = T.softmax_logprob(Tensor([[1000.0, 1000.0]]))
        np.testing.assert_array_equal(p.data, [[0.5, 0.5]])

    def test_closed_form(self):
        p, _ = T.softmax_logprob(Tensor([[np.log(2.0), 0.0]]))
        np.testing.assert_allclose(p.data, [[2 / 3, 1 / 3]], rtol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_probs_simplex(self, logits):
        p, lp = T.softmax_logprob(Tensor([logits]))
        assert np.all(p.data >= 0)
        assert abs(p.data.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(np.exp(lp.data), p.data, rtol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        T.sum(T.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_fan_out_sums_both_paths(self):
        # y = x*x + 3x, dy/dx = 2x + 3
        x = Tensor([2.0, -1.0], requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))
        grads = backward(Graph.from_output(loss := T.sum(y)), loss)
        np.testing.assert_array_equal(grads[x], [7.0, 1.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(Graph.from_output(x * 2.0), x * 2.0)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = T.exp(x)
        assert y._node is None and not y.requires_grad

    def test_topological_order_each_node_once(self):
        x = Tensor([1.0], requires_grad=True)
        a = T.exp(x)
        b = T.add(a, a)
        c = T.mul(b, a)
        g = Graph.from_output(T.sum(c))
        ids = [id(n) for n in g.nodes]
        assert len(ids) == len(set(ids))

    def test_two_layer_net_matches_finite_differences(self, rng):
        W1, b1 = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=5))
        W2, b2 = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=3))
        labels = np.array([0, 2])

        def loss(x):
            h = T.relu(T.dense(x, W1, b1))
            return -T.sum(T.pick(T.log_softmax(T.dense(h, W2, b2)), labels))

        assert T.finite_diff_check(loss, rng.normal(size=(2, 4))) < 1e-4


class TestFiniteDiff:
    def test_sum_is_exact_when_arithmetic_is(self):
        # integer inputs and a power-of-two step keep x ± eps exact
        assert T.finite_diff_check(T.sum, np.arange(6.0).reshape(3, 2), eps=2.0 ** -16) == 0.0

    def test_sum_default_eps(self, rng):
        assert T.finite_diff_check(T.sum, rng.normal(size=(3, 2))) < 1e-9

    def test_square(self):
        assert T.finite_diff_check(lambda x: T.sum(T.mul(x, x)), np.array([1.0, 2.0])) < 1e-7

    def test_logprob_class0(self, rng):
        f = lambda x: T.sum(T.pick(T.softmax_logprob(x)[1], [0]))  # noqa: E731
        assert T.finite_diff_check(f, rng.normal(size=(1, 4))) < 1e-5

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            T.finite_diff_check(T.sum, np.ones(2), eps=0.0)


@pytest.mark.parametrize("primitive", PRIMITIVES)
def test_primitive_gradients_over_seeds(primitive):
    worst = max(check_primitive(primitive, s).error for s in range(100))
    assert worst < TOLERANCE


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["relu", "sigmoid", "exp", "abs"]), st.integers(0, 10_000))
def test_outputs_finite_on_finite_inputs(op, seed):
    x = Tensor(np.random.default_rng(seed).normal(scale=30.0, size=(3, 4)))
    assert np.all(np.isfinite(getattr(T, op)(x).data))


class TestSerialize:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 1000))
    def test_tensor_roundtrip(self, shape, seed):
        a = np.random.default_rng(seed).normal(size=shape)
        back, end = tensor_from_bytes(tensor_to_bytes(a))
        assert end == len(tensor_to_bytes(a))
        assert back.shape == a.shape
        assert back.tobytes() == a.tobytes()

    def test_bad_magic_reports_offset(self):
        with pytest.raises(FormatError, match="offset 0"):
            tensor_from_bytes(b"XXXX" + bytes(8))

    def test_truncated_payload(self):
        buf = tensor_to_bytes(np.ones(4))[:-3]
        with pytest.raises(FormatError, match="offset"):
            tensor_from_bytes(buf)

    def test_container_roundtrip(self, tmp_path, rng):
        tensors = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=5)}
        save_container(tmp_path / "c.ckpt", tensors, {"kind": "test", "seed": 3})
        header, back = load_container(tmp_path / "c.ckpt")
        assert header["kind"] == "test" and header["seed"] == 3
        for k in tensors:
            assert back[k].tobytes() == tensors[k].tobytes()
