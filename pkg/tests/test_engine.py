"""Tensor engine: primitives, reverse-mode gradients, serialization."""

import numpy as np
import pytest

from polyres.engine import (
    Add,
    ChannelNorm,
    ComputationGraph,
    Conv2D,
    Dense,
    EngineError,
    Flatten,
    GatedSum,
    GlobalAvgPool,
    GraphNode,
    InputOp,
    NumericError,
    ParamStore,
    ReLU,
    ScalarScale,
    ShapeError,
    StridedConvDownsample,
    Tensor,
    backward,
    finite_diff_grad,
    forward,
    set_debug_checks,
    softmax,
    softmax_cross_entropy,
)

RNG = np.random.default_rng(12345)


def single_op_graph(op, input_shape, key=None):
    nodes = [GraphNode(0, InputOp(), ())]
    nodes.append(GraphNode(1, op, (0,), param_key=key, label=op.name))
    return ComputationGraph(nodes, input_shape)


def params_for(op, key, rng):
    store = ParamStore()
    if hasattr(op, "init_params"):
        for name, value in op.init_params(rng, np.float64).items():
            store.add(key, name, value)
            # Jitter so relu-style kinks and zero biases stay generic.
            value += rng.uniform(-0.2, 0.2, size=value.shape)
    return store


def scalar_loss(y):
    return float((np.sin(y) + 0.5 * y * y).sum())


def scalar_loss_grad(y):
    return np.cos(y) + y


def check_op_gradients(op, input_shape, key="p", rtol=1e-6):
    """Backward vs central differences for one primitive, for both the
    parameters and the input."""
    rng = np.random.default_rng(7)
    graph = single_op_graph(op, input_shape[1:], key if hasattr(op, "init_params") else None)
    params = params_for(op, key, rng)
    x = rng.standard_normal(input_shape) + 0.1

    out, tape = forward(graph, params, x, "train")
    grads, dx = backward(tape, scalar_loss_grad(out.data), return_input_grad=True)

    def loss_fn(p):
        y, _ = forward(graph, p, x, "train")
        return scalar_loss(y.data)

    if params.n_scalars():
        numeric = finite_diff_grad(loss_fn, params, h=1e-6)
        for pkey, name, a in grads.flat_items():
            f = numeric.get(pkey, name)
            scale = max(np.abs(a).max(), np.abs(f).max(), 1e-12)
            assert np.abs(a - f).max() / scale < rtol, f"{op.name}/{name}"

    # Input gradient against finite differences on a few random entries.
    flat = x.reshape(-1)
    dx_flat = dx.reshape(-1)
    h = 1e-6
    for i in np.random.default_rng(3).choice(flat.size, size=min(12, flat.size), replace=False):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(params)
        flat[i] = orig - h
        down = loss_fn(params)
        flat[i] = orig
        fd = (up - down) / (2 * h)
        assert abs(dx_flat[i] - fd) <= 1e-6 * max(1.0, abs(fd)), f"{op.name} input grad"


class TestPrimitiveGradients:
    def test_dense(self):
        check_op_gradients(Dense(6, 4), (3, 6))

    def test_conv_1x1(self):
        check_op_gradients(Conv2D(1, 3, 5), (2, 3, 6, 6))

    def test_conv_3x3(self):
        check_op_gradients(Conv2D(3, 3, 4), (2, 3, 6, 6))

    def test_strided_downsample(self):
        check_op_gradients(StridedConvDownsample(3, 4), (2, 3, 8, 8))

    def test_relu(self):
        check_op_gradients(ReLU(), (4, 9))

    def test_scalar_scale(self):
        check_op_gradients(ScalarScale(0.3), (4, 5))

    def test_channel_norm_2d(self):
        check_op_gradients(ChannelNorm(5), (6, 5))

    def test_channel_norm_4d(self):
        check_op_gradients(ChannelNorm(3), (4, 3, 5, 5))

    def test_global_avg_pool(self):
        check_op_gradients(GlobalAvgPool(), (3, 4, 5, 5))

    def test_flatten(self):
        check_op_gradients(Flatten(), (3, 2, 4, 4))

    def test_add_and_gated_sum(self):
        rng = np.random.default_rng(0)
        xs = [rng.standard_normal((3, 4)) for _ in range(3)]
        nodes = [GraphNode(0, InputOp(), ())]
        # Fan the input through three scales, then merge.
        for i, beta in enumerate((1.0, 0.5, 0.25)):
            nodes.append(GraphNode(1 + i, ScalarScale(beta), (0,)))
        nodes.append(GraphNode(4, Add(), (1, 2, 3)))
        graph = ComputationGraph(nodes, (4,))
        x = xs[0]
        out, tape = forward(graph, ParamStore(), x, "train")
        assert np.allclose(out.data, 1.75 * x)
        _, dx = backward(tape, np.ones_like(x), return_input_grad=True)
        assert np.allclose(dx, 1.75)

    def test_softmax_cross_entropy_gradient(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, 5)
        _, analytic = softmax_cross_entropy(logits, labels)
        h = 1e-6
        flat = logits.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = softmax_cross_entropy(logits, labels)
            flat[i] = orig - h
            down, _ = softmax_cross_entropy(logits, labels)
            flat[i] = orig
            fd = (up - down) / (2 * h)
            assert abs(analytic.reshape(-1)[i] - fd) < 1e-8


class TestGatedSum:
    def build(self, n):
        nodes = [GraphNode(0, InputOp(), ())]
        for i in range(n):
            nodes.append(GraphNode(1 + i, ScalarScale(float(i + 1)), (0,)))
        nodes.append(GraphNode(n + 1, GatedSum(), tuple(range(1, n + 1))))
        return ComputationGraph(nodes, (3,))

    def test_default_gates_are_a_plain_sum(self):
        graph = self.build(3)
        x = np.ones((2, 3))
        out, _ = forward(graph, ParamStore(), x, "train")
        assert np.array_equal(out.data, 6.0 * x)

    def test_gate_values_scale_paths(self):
        graph = self.build(3)
        x = np.ones((2, 3))
        out, _ = forward(graph, ParamStore(), x, "train", gates={4: (1.0, 0.0, 0.5)})
        assert np.allclose(out.data, (1.0 + 0.0 + 1.5) * x)

    def test_eval_mode_ignores_gates(self):
        graph = self.build(2)
        x = np.ones((1, 3))
        gated, _ = forward(graph, ParamStore(), x, "eval", gates={3: (0.0, 0.0)})
        plain, _ = forward(graph, ParamStore(), x, "eval")
        assert np.array_equal(gated.data, plain.data)

    def test_eval_gates_opt_in(self):
        graph = self.build(2)
        x = np.ones((1, 3))
        out, _ = forward(
            graph, ParamStore(), x, "eval", gates={3: (0.5, 0.5)}, allow_eval_gates=True
        )
        assert np.allclose(out.data, 1.5 * x)

    def test_gradient_respects_gates(self):
        graph = self.build(2)
        x = np.ones((1, 3))
        _, tape = forward(graph, ParamStore(), x, "train", gates={3: (1.0, 0.0)})
        _, dx = backward(tape, np.ones((1, 3)), return_input_grad=True)
        assert np.allclose(dx, 1.0)  # only the first path (scale 1) flows

    def test_gate_length_mismatch(self):
        graph = self.build(2)
        with pytest.raises(ShapeError):
            forward(graph, ParamStore(), np.ones((1, 3)), "train", gates={3: (1.0,)})


class TestChannelNorm:
    def test_running_stats_converge_to_batch_stats(self):
        op = ChannelNorm(4)
        params = ParamStore()
        for name, value in op.init_params(np.random.default_rng(0), np.float64).items():
            params.add("n", name, value)
        graph = single_op_graph(op, (4,), key="n")
        mean_true = np.array([1.0, -2.0, 0.5, 3.0])
        std_true = np.array([0.5, 2.0, 1.0, 0.1])
        # Stationary input: after N batches the exponential averages land on
        # the batch statistics within 1e-3.
        x = mean_true + std_true * np.random.default_rng(5).standard_normal((256, 4))
        for _ in range(1000):
            forward(graph, params, x, "train")
        assert np.abs(params.get("n", "running_mean") - x.mean(0)).max() < 1e-3
        assert np.abs(params.get("n", "running_var") - x.var(0)).max() < 1e-3

    def test_eval_uses_running_stats(self):
        op = ChannelNorm(3)
        params = ParamStore()
        for name, value in op.init_params(np.random.default_rng(0), np.float64).items():
            params.add("n", name, value)
        params.get("n", "running_mean")[:] = [1.0, 2.0, 3.0]
        params.get("n", "running_var")[:] = [4.0, 4.0, 4.0]
        graph = single_op_graph(op, (3,), key="n")
        x = np.array([[1.0, 2.0, 3.0]])
        out, _ = forward(graph, params, x, "eval")
        assert np.abs(out.data).max() < 1e-9

    def test_backward_rejects_eval_tape(self):
        op = ChannelNorm(3)
        params = ParamStore()
        for name, value in op.init_params(np.random.default_rng(0), np.float64).items():
            params.add("n", name, value)
        graph = single_op_graph(op, (3,), key="n")
        _, tape = forward(graph, params, np.ones((2, 3)), "eval")
        with pytest.raises(EngineError):
            backward(tape, np.ones((2, 3)))


class TestExecution:
    def test_determinism_bitwise(self):
        rng = np.random.default_rng(0)
        op = Dense(5, 3)
        params = params_for(op, "d", np.random.default_rng(4))
        graph = single_op_graph(op, (5,), key="d")
        x = rng.standard_normal((4, 5))
        a, _ = forward(graph, params, x, "train")
        b, _ = forward(graph, params, x, "train")
        assert np.array_equal(a.data, b.data)

    def test_shape_error_names_the_node(self):
        # Graph declares a (7,) input but the node wants 5 features, so the
        # failure surfaces at the node with its label attached.
        graph = single_op_graph(Dense(5, 3), (7,), key="d")
        params = params_for(Dense(5, 3), "d", np.random.default_rng(0))
        with pytest.raises(ShapeError) as err:
            forward(graph, params, np.ones((2, 7)), "train")
        assert "dense" in str(err.value)
        assert "node 1" in str(err.value)

    def test_missing_parameter_key(self):
        graph = single_op_graph(Dense(5, 3), (5,), key="nope")
        with pytest.raises(EngineError):
            forward(graph, ParamStore(), np.ones((2, 5)), "train")

    def test_debug_tripwire_names_the_node(self):
        op = ScalarScale(float("inf"))
        graph = single_op_graph(op, (3,))
        set_debug_checks(True)
        try:
            with pytest.raises(NumericError) as err:
                forward(graph, ParamStore(), np.ones((1, 3)), "train")
            assert "scale" in str(err.value)
        finally:
            set_debug_checks(False)

    def test_shared_key_gradients_accumulate(self):
        # One parameter group used by two graph nodes: y = w*(x) + w*(2x).
        op1, op2 = Dense(3, 3), Dense(3, 3)
        nodes = [
            GraphNode(0, InputOp(), ()),
            GraphNode(1, Dense(3, 3), (0,), param_key="shared"),
            GraphNode(2, ScalarScale(2.0), (0,)),
            GraphNode(3, Dense(3, 3), (2,), param_key="shared"),
            GraphNode(4, Add(), (1, 3)),
        ]
        graph = ComputationGraph(nodes, (3,))
        params = params_for(op1, "shared", np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((4, 3))
        out, tape = forward(graph, params, x, "train")
        grads = backward(tape, np.ones_like(out.data))
        expected_w = x.T @ np.ones((4, 3)) + (2 * x).T @ np.ones((4, 3))
        assert np.allclose(grads.get("shared", "w"), expected_w)

    def test_finite_diff_requires_f64(self):
        params = ParamStore()
        params.add("p", "w", np.ones(3, dtype=np.float32))
        with pytest.raises(EngineError):
            finite_diff_grad(lambda p: 0.0, params)

    def test_finite_diff_hand_example(self):
        params = ParamStore()
        params.add("p", "w", np.array([3.0]))
        grads = finite_diff_grad(lambda p: float(p.get("p", "w")[0] ** 2), params, h=1e-6)
        assert abs(grads.get("p", "w")[0] - 6.0) < 1e-6

    def test_finite_diff_constant_loss(self):
        params = ParamStore()
        params.add("p", "w", np.arange(4.0))
        grads = finite_diff_grad(lambda p: 1.25, params)
        assert np.array_equal(grads.get("p", "w"), np.zeros(4))


class TestTensorSerialization:
    @pytest.mark.parametrize("precision", ["f32", "f64"])
    def test_round_trip(self, precision):
        dtype = np.float32 if precision == "f32" else np.float64
        data = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
        t = Tensor(data)
        back = Tensor.from_bytes(t.to_bytes())
        assert back.precision == precision
        assert np.array_equal(back.data, data)

    def test_header_layout_is_little_endian(self):
        t = Tensor(np.zeros((2, 5), dtype=np.float64))
        buf = t.to_bytes()
        assert int.from_bytes(buf[0:8], "little") == 2  # rank
        assert int.from_bytes(buf[8:16], "little") == 2
        assert int.from_bytes(buf[16:24], "little") == 5
        assert int.from_bytes(buf[24:32], "little") == 64  # precision tag

    def test_file_round_trip(self, tmp_path):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        path = tmp_path / "x.tns"
        t.save(path)
        assert np.array_equal(Tensor.load(path).data, t.data)

    def test_softmax_is_normalized(self):
        logits = np.random.default_rng(0).standard_normal((4, 6)) * 30
        p = softmax(logits)
        assert np.allclose(p.sum(axis=1), 1.0)
        assert np.all(p >= 0)


class TestConcurrency:
    def test_concurrent_eval_forwards_agree(self):
        # Eval-mode execution is read-only, so parallel forward passes over
        # one model must reproduce the sequential results exactly.
        from concurrent.futures import ThreadPoolExecutor

        rng = np.random.default_rng(0)
        op = Dense(6, 4)
        params = params_for(op, "d", np.random.default_rng(1))
        graph = single_op_graph(op, (6,), key="d")
        batches = [rng.standard_normal((8, 6)) for _ in range(16)]
        expected = [forward(graph, params, x, "eval")[0].data for x in batches]
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(
                pool.map(lambda x: forward(graph, params, x, "eval")[0].data, batches)
            )
        for got, want in zip(results, expected):
            assert np.array_equal(got, want)
