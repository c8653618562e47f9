import numpy as np
import pytest

from modules import ndgrad as nd
from modules.error_handler import BackwardError, NonFiniteError, NumericError, SerializationError, ShapeError
from modules.ndgrad import Tensor


# each case maps a (3, 4) tensor to a tensor, drawing any constants from rng
PRIMITIVE_CASES = {
    "add": lambda t, rng: t + rng.normal(size=(1, 4)),
    "sub": lambda t, rng: rng.normal(size=(3, 1)) - t,
    "mul": lambda t, rng: t * t * rng.normal(size=4),
    "div": lambda t, rng: t / (1.5 + t * t),
    "neg": lambda t, rng: -t,
    "power": lambda t, rng: (t * t + 0.5) ** 1.5,
    "exp": lambda t, rng: nd.exp(t),
    "log": lambda t, rng: nd.log(t * t + 0.1),
    "tanh": lambda t, rng: nd.tanh(t),
    "matmul": lambda t, rng: t @ rng.normal(size=(4, 2)),
    "sum": lambda t, rng: nd.sum_(t * t, axis=1, keepdims=True),
    "mean": lambda t, rng: nd.mean(t * t, axis=0),
    "max": lambda t, rng: nd.max_(t, axis=1),
    "reshape": lambda t, rng: nd.reshape(t * t, (2, 6)),
    "transpose": lambda t, rng: nd.transpose(t) @ rng.normal(size=(3, 2)),
    "slice": lambda t, rng: t[1:, ::2] * t[:2, 1::2],
    "take": lambda t, rng: nd.take(t * t, np.array([2, 0, 2]), axis=0),
    "embedding": lambda t, rng: nd.embedding(t, np.array([[0, 2], [2, 1]])),
}


class TestPrimitives:

    def test_add(self):
        np.testing.assert_array_equal((Tensor([1, 2]) + Tensor([3, 4])).data, [4, 6])

    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_allclose(nd.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_identity_matmul(self):
        a = nd.make_rng(0, "matmul").normal(size=(3, 3))
        np.testing.assert_allclose((Tensor(np.eye(3)) @ Tensor(a)).data, a)

    def test_broadcast_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as excinfo:
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
        assert "add" in str(excinfo.value)
        assert "(2, 3)" in str(excinfo.value) and "(4,)" in str(excinfo.value)

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_division_by_zero(self):
        with pytest.raises(NumericError):
            Tensor([1.0]) / Tensor([0.0])

    def test_log_clamps_with_epsilon(self):
        out = nd.log(Tensor([0.0, 1.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [np.log(1e-12), 0.0])

    def test_log_without_epsilon_rejects_nonpositive(self):
        nd.set_log_epsilon(None)
        with pytest.raises(NumericError):
            nd.log(Tensor([0.0, 1.0]))

    def test_ndarray_on_the_left_dispatches_to_tensor(self):
        out = np.ones(3) * Tensor([1.0, 2.0, 3.0], requires_grad=True)
        assert isinstance(out, Tensor)
        assert out.requires_grad


class TestBackward:

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2, 4, 6])

    def test_log_softmax_gradient_closed_form(self):
        z = Tensor(nd.make_rng(1, "z").normal(size=5), requires_grad=True)
        k = 2
        nd.log_softmax(z)[k].backward()
        expected = np.eye(5)[k] - nd.softmax(Tensor(z.data)).data
        np.testing.assert_allclose(z.grad, expected, atol=1e-12)

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(BackwardError):
            (x * 2).backward()

    def test_second_backward_on_consumed_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(BackwardError):
            loss.backward()

    def test_unconnected_loss(self):
        with pytest.raises(BackwardError):
            Tensor([1.0, 2.0]).sum().backward()

    def test_intermediates_receive_gradients(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        h = x * 3.0
        (h * h).sum().backward()
        np.testing.assert_allclose(h.grad, 2 * h.data)

    def test_gradients_accumulate_across_losses(self):
        x = Tensor([1.0], requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with nd.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_record_lists_ops_in_topological_order(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = nd.exp(x).sum()
        record = nd.ComputationRecord(loss)
        assert record.ops() == ["leaf", "exp", "sum"]

    def test_anomaly_names_the_primitive(self):
        x = Tensor([1000.0], requires_grad=True)
        with nd.detect_anomaly(), pytest.raises(NonFiniteError) as excinfo:
            nd.exp(x)
        assert "exp" in str(excinfo.value)

    def test_max_splits_gradient_between_ties(self):
        x = Tensor([2.0, 2.0, 1.0], requires_grad=True)
        x.max().backward()
        np.testing.assert_allclose(x.grad, [0.5, 0.5, 0.0])


class TestGradCheck:

    def test_linear_function(self):
        assert nd.grad_check(lambda t: t.sum(), np.arange(6.0).reshape(2, 3)) < 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_three_layer_composition(self, seed):
        rng = nd.make_rng(seed, "mlp")
        w1, w2, w3 = (Tensor(rng.normal(size=s)) for s in [(4, 5), (5, 5), (5, 1)])
        x = rng.normal(size=(3, 4))
        assert nd.grad_check(lambda t: (nd.tanh(nd.tanh(t @ w1) @ w2) @ w3).sum(), x) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_conv2d(self, seed):
        rng = nd.make_rng(seed, "conv")
        w = Tensor(rng.normal(size=(3, 3, 2, 3)))
        x = rng.normal(size=(1, 4, 4, 2))
        assert nd.grad_check(lambda t: nd.tanh(nd.conv2d(t, w, padding=1)).sum(), x) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("op", ["softmax", "log_softmax"])
    def test_normalizers(self, op, seed):
        x = nd.make_rng(seed, op).normal(size=(2, 4))
        weights = Tensor(np.arange(8.0).reshape(2, 4))
        assert nd.grad_check(lambda t: (getattr(nd, op)(t) * weights).sum(), x) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_primitive(self, name, seed):
        case = PRIMITIVE_CASES[name]
        x = nd.make_rng(seed, "primitive", name).normal(size=(3, 4))
        out = case(Tensor(x), nd.make_rng(seed, "args", name))
        weights = Tensor(nd.make_rng(seed, "weights", name).normal(size=out.shape))
        assert nd.grad_check(lambda t: (case(t, nd.make_rng(seed, "args", name)) * weights).sum(), x) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_gather_and_slicing(self, seed):
        x = nd.make_rng(seed, "gather").normal(size=(3, 4))
        index = np.array([[1], [3], [0]])
        assert nd.grad_check(lambda t: (nd.gather(t, index, axis=-1) * t[:, :1]).sum(), x) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_concatenate_and_stack(self, seed):
        x = nd.make_rng(seed, "cat").normal(size=(2, 3))
        assert nd.grad_check(lambda t: (nd.concatenate([t, t * t], axis=1).sum(axis=0) ** 2).sum()
                             + nd.stack([t, t], axis=0).mean(), x) < 1e-4

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            nd.grad_check(lambda t: t.sum(), np.array([np.nan]))


class TestRandomStreams:

    def test_same_stream_same_draws(self):
        np.testing.assert_array_equal(nd.make_rng(7, "a", 1).random(4), nd.make_rng(7, "a", 1).random(4))

    def test_streams_are_independent(self):
        assert not np.array_equal(nd.make_rng(7, "a").random(4), nd.make_rng(7, "b").random(4))


class TestCodec:

    def test_header_layout(self):
        blob = nd.tensor_to_bytes(np.zeros((2, 3)))
        assert blob[:4] == b"NDG1"
        assert int.from_bytes(blob[4:8], "little") == 2
        assert len(blob) == 8 + 2 * 4 + 6 * 8

    def test_float32_payload_is_preserved(self):
        arr = np.arange(6, dtype=np.float32).reshape(3, 2)
        back = nd.tensor_from_bytes(nd.tensor_to_bytes(arr))
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)

    def test_bad_magic(self):
        with pytest.raises(SerializationError):
            nd.tensor_from_bytes(b"XXXX\x00\x00\x00\x00")

    def test_truncated_payload(self):
        with pytest.raises(SerializationError):
            nd.tensor_from_bytes(nd.tensor_to_bytes(np.ones(4))[:-3])

    def test_named_container(self, tmp_path):
        path = tmp_path / "model.ndgc"
        tensors = {"a": np.arange(3.0), "b/c": np.ones((2, 2), dtype=np.float32)}
        nd.save_named(path, tensors, {"epoch": 3})
        loaded, meta = nd.load_named(path)
        assert meta == {"epoch": 3}
        assert set(loaded) == {"a", "b/c"}
        np.testing.assert_array_equal(loaded["a"], tensors["a"])
        assert loaded["b/c"].dtype == np.float32

    def test_missing_file(self, tmp_path):
        with pytest.raises(SerializationError):
            nd.load_tensor(tmp_path / "absent.ndg")
