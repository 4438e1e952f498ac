import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anticipation import tensor as tn
from anticipation.errors import ConfigError, DimensionError, DomainError, NonFiniteError, TrainingError

from conftest import check_grad


class TestTensorBasics:
    def test_shape_and_data(self):
        t = tn.Tensor([[1.0, 2.0, 3.0]])
        assert t.shape == (1, 3)
        assert t.data.dtype == np.float64
        assert t.data.flags.c_contiguous

    def test_scalar_stays_zero_dim(self):
        assert tn.Tensor(2.5).shape == ()
        assert (tn.Tensor(2.0) * 3.0).shape == ()

    def test_grad_shape_matches(self):
        x = tn.Tensor(np.ones((2, 3)), requires_grad=True)
        (x * 2.0).sum().backward()
        assert x.grad.shape == x.shape

    def test_non_finite_forward_is_error(self):
        with pytest.raises(NonFiniteError):
            tn.exp(tn.Tensor([1000.0]))

    def test_backward_needs_scalar_or_seed(self):
        x = tn.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = tn.Tensor(np.ones(3), requires_grad=True)
        with tn.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_gradient_accumulates_over_reuse(self):
        x = tn.Tensor(np.array([3.0]), requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])


class TestTape:
    def test_topological_order(self):
        a = tn.Tensor(np.ones(2), requires_grad=True)
        b = a * 2.0
        c = b + a
        d = c * b
        order = tn.tape(d)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_each_op_visited_once(self):
        calls = []
        a = tn.Tensor(np.ones(2), requires_grad=True)
        b = a * 2.0
        rule = b._backward
        b._backward = lambda g: (calls.append(1), rule(g))[1]
        (b + b + b).sum().backward()
        assert len(calls) == 1
        np.testing.assert_allclose(a.grad, [6.0, 6.0])


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = tn.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tn.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        assert check_grad(tn.matmul, rng.standard_normal((3, 4)), rng.standard_normal((4, 2))) < 1e-6

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        err = check_grad(tn.matmul, rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 4, 2)))
        assert err < 1e-6

    def test_row_invariant_matches_blas_closely(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((50, 30)), rng.standard_normal((30, 7))
        with tn.row_invariant():
            exact = tn.matmul(a, b).data
        np.testing.assert_allclose(exact, a @ b, rtol=1e-12, atol=1e-12)

    def test_row_invariant_rows_do_not_depend_on_batch(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((64, 96)), rng.standard_normal((96, 32))
        with tn.row_invariant():
            full = tn.matmul(a, b).data
            single = np.concatenate([tn.matmul(a[i:i + 1], b).data for i in range(64)])
        np.testing.assert_array_equal(full, single)


def naive_causal_conv(x, kernel, dilation):
    T = x.shape[0]
    K = kernel.shape[0]
    out = np.zeros(x.shape[:-1] + (kernel.shape[2],))
    for t in range(T):
        for j in range(K):
            s = t - (K - 1 - j) * dilation
            if s >= 0:
                out[t] += x[s] @ kernel[j]
    return out


class TestCausalConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((10, 3))
        out = tn.causal_conv1d(x, np.eye(3)[None], 1)
        np.testing.assert_array_equal(out.data, x)

    def test_impulse_response(self):
        x = np.zeros((12, 1))
        x[5] = 1.0
        a, b = 0.3, -1.7
        out = tn.causal_conv1d(x, np.array([[[a]], [[b]]]), dilation=2).data[:, 0]
        expected = np.zeros(12)
        expected[5], expected[7] = b, a
        np.testing.assert_array_equal(out, expected)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        for K, d in [(1, 1), (2, 1), (3, 2), (3, 4), (4, 3)]:
            x = rng.standard_normal((15, 4))
            k = rng.standard_normal((K, 4, 2))
            np.testing.assert_allclose(tn.causal_conv1d(x, k, d).data, naive_causal_conv(x, k, d), atol=1e-12)

    def test_kernel_width_zero_is_config_error(self):
        with pytest.raises(ConfigError):
            tn.causal_conv1d(np.ones((4, 1)), np.ones((0, 1, 1)), 1)

    def test_bad_dilation(self):
        with pytest.raises(ConfigError):
            tn.causal_conv1d(np.ones((4, 1)), np.ones((2, 1, 1)), 0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            tn.causal_conv1d(np.ones((4, 2)), np.ones((2, 3, 1)), 1)

    def test_causality_bitwise(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((16, 3))
        k = rng.standard_normal((3, 3, 2))
        base = tn.causal_conv1d(x, k, 2).data
        x2 = x.copy()
        x2[9] += 5.0
        pert = tn.causal_conv1d(x2, k, 2).data
        np.testing.assert_array_equal(base[:9], pert[:9])
        assert not np.array_equal(base[9:], pert[9:])

    def test_time_conv_identity(self):
        x = np.random.default_rng(3).standard_normal((6, 4, 2))
        k = np.zeros((3, 2, 2))
        k[-1] = np.eye(2)
        np.testing.assert_array_equal(tn.causal_conv2d_time(x, k, 4).data, x)

    def test_time_conv_impulse_dilated(self):
        x = np.zeros((20, 3, 1))
        x[2, 1] = 1.0
        k = np.array([[[1.0]], [[2.0]], [[3.0]]])
        out = tn.causal_conv2d_time(x, k, 4).data
        expected = np.zeros((20, 3, 1))
        expected[2, 1], expected[6, 1], expected[10, 1] = 3.0, 2.0, 1.0
        np.testing.assert_array_equal(out, expected)

    def test_time_conv_causality(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((12, 3, 2))
        k = rng.standard_normal((3, 2, 5))
        base = tn.causal_conv2d_time(x, k, 2).data
        x[7:] = rng.standard_normal((5, 3, 2))
        np.testing.assert_array_equal(base[:7], tn.causal_conv2d_time(x, k, 2).data[:7])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        fn = lambda x, k: tn.causal_conv2d_time(x, k, 2)
        assert check_grad(fn, rng.standard_normal((9, 2, 3)), rng.standard_normal((3, 3, 2))) < 1e-6

    def test_step_equals_batch_row(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((40, 3, 4))
        k = rng.standard_normal((3, 4, 5))
        d = 4
        with tn.row_invariant():
            batch = tn.causal_conv2d_time(x, k, d).data
            L = tn.conv_receptive_field(3, d)
            for t in range(40):
                step = tn.causal_conv_step(x[max(0, t - L + 1):t + 1], k, d)
                np.testing.assert_array_equal(step[0], batch[t])


class TestElementwise:
    def test_softplus_zero(self):
        np.testing.assert_allclose(tn.softplus(tn.Tensor(0.0)).data, np.log(2.0), rtol=0, atol=1e-15)
        assert abs(float(tn.softplus(tn.Tensor(0.0)).data) - 0.693147) < 1e-6

    def test_softmax_uniform(self):
        np.testing.assert_allclose(tn.softmax(tn.Tensor(np.zeros(4))).data, 0.25)

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            tn.log(tn.Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            tn.log(tn.Tensor([-1.0]))

    def test_logsumexp_stable(self):
        x = np.array([1000.0, 1000.0])
        np.testing.assert_allclose(tn.logsumexp(tn.Tensor(x)).data, 1000.0 + np.log(2.0))

    def test_sigmoid_range(self):
        out = tn.sigmoid(tn.Tensor(np.linspace(-30, 30, 61))).data
        assert np.all((out > 0) & (out < 1))

    @pytest.mark.parametrize("name,fn,lo,hi", [
        ("add", lambda a, b: a + b, -2, 2),
        ("mul", lambda a, b: a * b, -2, 2),
        ("div", lambda a, b: a / b, 0.5, 2),
        ("sub", lambda a, b: a - b, -2, 2),
    ])
    def test_binary_gradients(self, name, fn, lo, hi):
        rng = np.random.default_rng(7)
        assert check_grad(fn, rng.uniform(lo, hi, (3, 4)), rng.uniform(lo, hi, (3, 4))) < 1e-5

    def test_broadcast_gradient(self):
        rng = np.random.default_rng(8)
        assert check_grad(lambda a, b: a * b + a, rng.standard_normal((3, 4)), rng.standard_normal(4)) < 1e-5

    @pytest.mark.parametrize("name,fn", [
        ("sigmoid", tn.sigmoid), ("relu", tn.relu), ("softplus", tn.softplus), ("exp", tn.exp),
        ("abs", tn.tabs), ("neg", tn.neg),
        ("logsumexp", lambda x: tn.logsumexp(x, axis=1)),
        ("mean", lambda x: tn.mean(x, axis=0)),
        ("max", lambda x: tn.tmax(x, axis=1)),
        ("avgpool", lambda x: tn.mean(x, axis=(0, 1))),
        ("maxpool", lambda x: tn.tmax(x, axis=(0, 1))),
        ("softmax", lambda x: tn.softmax(x, axis=-1)),
        ("sum", lambda x: tn.tsum(x, axis=1, keepdims=True)),
        ("power", lambda x: tn.power(x * x + 1.0, -0.5)),
        ("minimum", lambda x: tn.minimum(x, 0.3)),
        ("transpose", lambda x: tn.transpose(x, (1, 0)) * 1.5),
        ("getitem", lambda x: x[1:, :2]),
    ])
    def test_unary_gradients(self, name, fn):
        rng = np.random.default_rng(9)
        # keep entries away from kinks and ties
        x = rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        assert check_grad(fn, x) < 1e-5

    def test_log_gradient(self):
        assert check_grad(tn.log, np.random.default_rng(10).uniform(0.5, 2.0, (3, 3))) < 1e-5

    def test_concat_stack_gradients(self):
        rng = np.random.default_rng(11)
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
        assert check_grad(lambda x, y: tn.concat([x, y], axis=0), a, b) < 1e-6
        assert check_grad(lambda x, y: tn.stack([x, y[:2]], axis=1), a, b) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_softplus_positive_and_above_relu(self, xs):
        x = np.array(xs)
        sp = tn.softplus(tn.Tensor(x)).data
        assert np.all(sp > 0)
        assert np.all(sp >= np.maximum(x, 0.0))


class TestAdam:
    def test_zero_gradient_no_decay_is_noop(self):
        p = tn.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = tn.AdamState()
        tn.adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_by_hand(self):
        p = tn.Tensor(np.array([1.0]), requires_grad=True)
        lr, wd, eps, g = 0.1, 0.01, 1e-8, 0.5
        tn.adam_step({"p": p}, {"p": np.array([g])}, tn.AdamState(), lr, wd, 0.9, 0.999, eps)
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * 1.0
        assert abs(p.data[0] - expected) < 1e-12

    def test_two_steps_by_hand(self):
        p = tn.Tensor(np.array([0.2]), requires_grad=True)
        state = tn.AdamState()
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        ref, m, v = 0.2, 0.0, 0.0
        for t, g in enumerate([0.3, -0.1], 1):
            tn.adam_step({"p": p}, {"p": np.array([g])}, state, lr, 0.0, b1, b2, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - ref) < 1e-12

    def test_weight_decay_only(self):
        p = tn.Tensor(np.array([2.0, -4.0]), requires_grad=True)
        lr, wd = 0.01, 0.1
        tn.adam_step({"p": p}, {"p": np.zeros(2)}, tn.AdamState(), lr, wd)
        np.testing.assert_allclose(p.data, [2.0 - lr * wd * 2.0, -4.0 + lr * wd * 4.0], rtol=0, atol=1e-15)

    def test_non_finite_gradient_names_parameter(self):
        p = tn.Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(TrainingError, match="head.fc1.W"):
            tn.adam_step({"head.fc1.W": p}, {"head.fc1.W": np.array([np.nan, 0.0])}, tn.AdamState(), 0.1)

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            tn.adam_step({}, {}, tn.AdamState(), 0.0)


class TestTensorContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.standard_normal((3, 4)), "b": np.array(np.pi), "c": np.array([np.nextafter(1, 2), -0.0])}
        path = tmp_path / "t.bin"
        tn.save_tensors(path, arrays, {"note": "x"})
        back, meta = tn.load_tensors(path)
        assert meta == {"note": "x"}
        for k, v in arrays.items():
            assert back[k].shape == v.shape
            assert back[k].tobytes() == np.ascontiguousarray(v, dtype="<f8").tobytes()

    def test_manifest_layout(self, tmp_path):
        import json
        path = tmp_path / "t.bin"
        tn.save_tensors(path, {"w": np.ones((2, 3)), "v": np.zeros(4)})
        raw = path.read_bytes()
        manifest = json.loads(raw[:raw.index(b"\n")])
        entries = {e["name"]: e for e in manifest["tensors"]}
        assert entries["w"] == {"name": "w", "dtype": "f64", "shape": [2, 3], "offset": 0, "length": 48}
        assert entries["v"]["offset"] == 48 and entries["v"]["length"] == 32
        assert len(raw) - raw.index(b"\n") - 1 == 80
