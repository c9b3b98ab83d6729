import math

import numpy as np
import pytest

from fsgan import diffcore as dc
from fsgan.errors import ContractError, EvaluationError, ShapeError


def _single_layer(weight, bias, activation):
    return dc.MlpModel([dc.Layer(np.array(weight, float), np.array(bias, float), activation)])


def _run(model, x):
    tape = dc.Tape()
    return dc.forward(model, tape.leaf(x)).value


class TestForward:
    def test_identity_layer(self):
        m = _single_layer([[1, 0], [0, 1]], [[0, 0]], "identity")
        np.testing.assert_array_equal(_run(m, [[1.0, 2.0]]), [[1.0, 2.0]])

    def test_zero_sigmoid_layer_is_half(self):
        m = _single_layer(np.zeros((3, 2)), np.zeros((1, 2)), "sigmoid")
        out = _run(m, np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_array_equal(out, np.full((5, 2), 0.5))

    def test_tanh_at_zero(self):
        m = _single_layer([[1.0]], [[0.0]], "tanh")
        assert _run(m, [[0.0]])[0, 0] == 0.0

    def test_shape_mismatch(self):
        m = _single_layer(np.eye(2), np.zeros((1, 2)), "identity")
        with pytest.raises(ShapeError):
            _run(m, np.ones((1, 3)))

    def test_tape_free_call_matches_tape(self):
        rng = np.random.default_rng(3)
        m = dc.MlpModel.create([4, 8, 8, 2], rng, "leaky_relu", "tanh")
        x = rng.normal(size=(7, 4))
        np.testing.assert_allclose(m(x), _run(m, x), rtol=0, atol=1e-15)

    def test_checked_mode_rejects_nan(self):
        with pytest.raises(EvaluationError):
            dc.as_matrix([[1.0, float("nan")]])
        tape = dc.Tape(checked=True)
        x = tape.leaf([[-1.0]])
        with pytest.raises(EvaluationError):
            with np.errstate(over="ignore"):
                dc.exp(dc.scale(x, -1e6))


class TestBackward:
    def test_square(self):
        tape = dc.Tape()
        x = tape.leaf([[3.0]])
        y = dc.square(x)
        assert dc.backward(tape, y)[x][0, 0] == 6.0

    def test_sigmoid_slope_at_zero(self):
        tape = dc.Tape()
        x = tape.leaf([[0.0]])
        assert dc.backward(tape, dc.sigmoid(x))[x][0, 0] == 0.25

    def test_unused_leaf_gets_zero(self):
        tape = dc.Tape()
        x = tape.leaf([[1.5]])
        y = tape.leaf([[2.0, 3.0]])
        grads = dc.backward(tape, dc.scale(x, 1.0))
        np.testing.assert_array_equal(grads[y], np.zeros((1, 2)))

    def test_non_scalar_root(self):
        tape = dc.Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            dc.backward(tape, dc.tanh(x))

    def test_linear_in_seed(self):
        rng = np.random.default_rng(1)
        m = dc.MlpModel.create([3, 6, 1], rng, "tanh", "sigmoid")
        tape = dc.Tape()
        x = tape.leaf(rng.normal(size=(5, 3)))
        root = dc.reduce_mean(dc.forward(m, x))
        g1 = dc.backward(tape, root)
        g2 = dc.backward(tape, root, seed=2.0)
        for node in [x] + tape.params_of(m):
            np.testing.assert_allclose(g2[node], 2.0 * g1[node], rtol=1e-14, atol=0)

    def test_gradient_shapes_match_values(self):
        rng = np.random.default_rng(2)
        m = dc.MlpModel.create([2, 4, 3], rng)
        tape = dc.Tape()
        x = tape.leaf(rng.normal(size=(6, 2)))
        grads = dc.backward(tape, dc.reduce_sum(dc.row_softmax(dc.forward(m, x))))
        for node in tape.nodes:
            assert grads[node].shape == node.value.shape

    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            m = dc.MlpModel.create([3, 5, 1], rng, "relu", "sigmoid")
            tape = dc.Tape()
            x = tape.leaf(rng.normal(size=(4, 3)))
            root = dc.reduce_mean(dc.log(dc.forward(m, x)))
            return root.value, dc.param_grads(tape, m, dc.backward(tape, root))

        (v1, g1), (v2, g2) = run(), run()
        assert v1.tobytes() == v2.tobytes()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


# Each case maps a leaf to a scalar through one primitive; reductions weight
# the output by a fixed random matrix so every coordinate matters.
_WEIGHTS = np.random.default_rng(99).normal(size=(3, 4))


def _weighted(node):
    tape = node.tape
    return dc.reduce_sum(dc.mul(node, tape.constant(_WEIGHTS[: node.shape[0], : node.shape[1]])))


PRIMITIVES = {
    "matmul": lambda x: _weighted(dc.matmul(x, x.tape.constant(np.eye(4)[:, :4] + 0.3))),
    "matmul_right": lambda x: _weighted(dc.matmul(x.tape.constant(np.ones((3, 3)) * 0.5), x)),
    "add": lambda x: _weighted(dc.add(x, dc.square(x))),
    "sub": lambda x: _weighted(dc.sub(dc.tanh(x), x)),
    "mul": lambda x: _weighted(dc.mul(x, dc.tanh(x))),
    "add_bias": lambda x: _weighted(dc.add_bias(x, x.tape.constant(np.arange(4.0).reshape(1, 4)))),
    "add_bias_row": lambda x: _weighted(
        dc.add_bias(x.tape.constant(np.ones((3, 4))), dc.matmul(x.tape.constant([[0.5, -1.0, 2.0]]), x))
    ),
    "scale": lambda x: _weighted(dc.scale(x, -1.7)),
    "shift": lambda x: _weighted(dc.shift(dc.square(x), 0.4)),
    "tanh": lambda x: _weighted(dc.tanh(x)),
    "sigmoid": lambda x: _weighted(dc.sigmoid(x)),
    "relu": lambda x: _weighted(dc.relu(x)),
    "leaky_relu": lambda x: _weighted(dc.leaky_relu(x)),
    "log": lambda x: _weighted(dc.log(dc.shift(dc.square(x), 0.5))),
    "exp": lambda x: _weighted(dc.exp(x)),
    "square": lambda x: _weighted(dc.square(x)),
    "clip": lambda x: _weighted(dc.clip(x, -5.0, 5.0)),
    "row_softmax": lambda x: _weighted(dc.row_softmax(x)),
    "log_softmax": lambda x: _weighted(dc.log_softmax(x)),
    "reduce_mean": lambda x: dc.reduce_mean(dc.square(x)),
    "reduce_sum": lambda x: dc.reduce_sum(dc.tanh(x)),
    "row_sum": lambda x: _weighted(dc.row_sum(dc.square(x))),
    "concat_rows": lambda x: dc.reduce_sum(
        dc.mul(dc.concat_rows([x, dc.tanh(x)]), x.tape.constant(np.vstack([_WEIGHTS, -_WEIGHTS])))
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    fn = PRIMITIVES[name]
    worst = 0.0
    for _ in range(100):
        point = rng.normal(size=(3, 4))
        if name in ("relu", "leaky_relu", "clip"):
            # keep away from the kink so central differences are valid
            point = np.where(np.abs(point) < 1e-3, 0.5, point)
        worst = max(worst, dc.grad_check(fn, point, 1e-5))
    assert worst <= 1e-5


class TestGradCheck:
    def test_quadratic(self):
        assert dc.grad_check(lambda x: dc.square(x), [[3.0]], 1e-5) <= 1e-6

    def test_constant_function(self):
        f = lambda x: x.tape.constant([[4.2]])
        assert dc.grad_check(f, [[1.0, 2.0]], 1e-5) == 0.0

    def test_two_layer_mlp(self):
        rng = np.random.default_rng(5)
        m = dc.MlpModel.create([3, 8, 1], rng, "tanh", "identity")
        f = lambda x: dc.reduce_sum(dc.forward(m, x, trainable=False))
        assert dc.grad_check(f, rng.normal(size=(2, 3)), 1e-5) <= 1e-5

    def test_rejects_bad_step(self):
        with pytest.raises(ContractError):
            dc.grad_check(lambda x: dc.square(x), [[1.0]], 0.0)

    def test_nonfinite_value(self):
        with pytest.raises(EvaluationError):
            with np.errstate(over="ignore"):
                dc.grad_check(lambda x: dc.exp(x), [[1e4]], 1e-5)


class TestOptimizer:
    def test_sgd_arithmetic(self):
        p = [np.array([[1.0]])]
        dc.optimizer_step(p, [np.array([[2.0]])], dc.OptimizerState("sgd", lr=0.1))
        assert p[0][0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_adam_zero_gradient_is_noop(self):
        p = [np.array([[1.0, -2.0]])]
        state = dc.OptimizerState("adam", lr=0.1)
        for _ in range(3):
            dc.optimizer_step(p, [np.zeros((1, 2))], state)
        np.testing.assert_array_equal(p[0], [[1.0, -2.0]])
        assert state.step == 3

    def test_adam_matches_scalar_reference(self):
        lr, b1, b2, eps, g = 0.05, 0.9, 0.999, 1e-8, 0.7
        # scalar reference computation
        x, m, v, ref = 1.0, 0.0, 0.0, []
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            ref.append(x)
        p = [np.array([[1.0]])]
        state = dc.OptimizerState("adam", lr=lr)
        got = []
        for _ in range(2):
            dc.optimizer_step(p, [np.array([[g]])], state)
            got.append(p[0][0, 0])
        assert got == pytest.approx(ref, abs=1e-15)
        assert 1.0 > got[0] > got[1]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dc.optimizer_step([np.zeros((2, 2))], [np.zeros((1, 2))], dc.OptimizerState())


class TestCheckpointDict:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        m = dc.MlpModel.create([2, 5, 3], rng, "tanh", "sigmoid")
        back = dc.model_from_dict(dc.model_to_dict(m))
        for a, b in zip(m.parameters(), back.parameters()):
            assert a.tobytes() == b.tobytes()
        assert [l.activation for l in back.layers] == ["tanh", "sigmoid"]

    def test_unknown_version(self):
        from fsgan.errors import CheckpointError

        doc = dc.model_to_dict(dc.MlpModel.create([1, 1], np.random.default_rng(0)))
        doc["format_version"] = 99
        with pytest.raises(CheckpointError):
            dc.model_from_dict(doc)
