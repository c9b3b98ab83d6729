"""Reverse-mode automatic differentiation over dense float64 matrices.

A :class:`Tape` records every primitive in execution order. Because parents
are always recorded before their children, running the tape backwards from a
scalar root is a valid topological traversal and no graph search is needed.

Every value is a 2-D ``numpy.ndarray`` with one sample per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, ShapeError

LOG_FLOOR = 1e-12

ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu", "leaky_relu")
LEAKY_SLOPE = 0.2


def as_matrix(data, checked: bool = True) -> np.ndarray:
    """Coerce ``data`` into a 2-D float64 array.

    Scalars become 1x1 and vectors become a single row. In checked mode
    non-finite entries are rejected.
    """
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with ndim={arr.ndim}")
    if checked and not np.all(np.isfinite(arr)):
        raise EvaluationError("matrix contains NaN or Inf")
    return arr


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, tape, index, value, parents, backward_fn, requires_grad, op):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.op} shape={self.value.shape})"

    def __add__(self, other):
        if isinstance(other, Node):
            if other.shape == self.shape:
                return add(self, other)
            return add_bias(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self, checked: bool = False):
        self.nodes: list[Node] = []
        self.checked = checked
        self._bound: dict[int, list[Node]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, value, parents, backward_fn, op) -> Node:
        if self.checked and not np.all(np.isfinite(value)):
            raise EvaluationError(f"non-finite value produced by {op}")
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, tuple(parents), backward_fn, requires_grad, op)
        self.nodes.append(node)
        return node

    def leaf(self, value, requires_grad: bool = True) -> Node:
        if not (isinstance(value, np.ndarray) and value.ndim == 2 and value.dtype == np.float64):
            value = as_matrix(value, checked=self.checked)
        elif self.checked and not np.all(np.isfinite(value)):
            raise EvaluationError("leaf contains NaN or Inf")
        node = Node(self, len(self.nodes), value, (), None, requires_grad, "leaf")
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def params_of(self, model: "MlpModel", trainable: bool = True) -> list[Node]:
        """Leaf nodes wrapping ``model``'s parameters, created once per tape."""
        key = id(model)
        if key not in self._bound:
            self._bound[key] = [self.leaf(p, requires_grad=trainable) for p in model.parameters()]
        return self._bound[key]


class GradientMap(dict):
    """Node -> gradient. Nodes that never received a gradient read as zeros."""

    def __missing__(self, node: Node) -> np.ndarray:
        return np.zeros_like(node.value)


def backward(tape: Tape, root: Node, seed: float = 1.0) -> GradientMap:
    if root.tape is not tape:
        raise ContractError("root node belongs to a different tape")
    if root.value.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 root, got {root.value.shape}")
    grads = GradientMap()
    grads[root] = np.full((1, 1), float(seed))
    for node in reversed(tape.nodes[: root.index + 1]):
        g = dict.get(grads, node)
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = dict.get(grads, parent)
            grads[parent] = pg if prev is None else prev + pg
    return grads


# ---------------------------------------------------------------------------
# primitives


def _check_same(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return a.tape._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add(a: Node, b: Node) -> Node:
    _check_same(a, b, "add")
    return a.tape._record(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _check_same(a, b, "sub")
    return a.tape._record(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape._record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def add_bias(a: Node, bias: Node) -> Node:
    """Broadcast a 1 x cols row across every row of ``a``."""
    if bias.shape != (1, a.shape[1]):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {a.shape}")
    return a.tape._record(
        a.value + bias.value, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_bias"
    )


def scale(a: Node, c: float) -> Node:
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Node, c: float) -> Node:
    return a.tape._record(a.value + c, (a,), lambda g: (g,), "shift")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Node, slope: float = LEAKY_SLOPE) -> Node:
    factor = np.where(a.value > 0, 1.0, slope)
    return a.tape._record(a.value * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def log(a: Node) -> Node:
    """Guarded natural log: ``log(max(u, 1e-12))``."""
    u = a.value
    safe = np.maximum(u, LOG_FLOOR)
    inside = u > LOG_FLOOR
    return a.tape._record(np.log(safe), (a,), lambda g: (np.where(inside, g / safe, 0.0),), "log")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape._record(out, (a,), lambda g: (g * out,), "exp")


def square(a: Node) -> Node:
    av = a.value
    return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def clip(a: Node, lo: float, hi: float) -> Node:
    mask = (a.value >= lo) & (a.value <= hi)
    return a.tape._record(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clip")


def row_softmax(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return a.tape._record(s, (a,), back, "row_softmax")


def log_softmax(a: Node) -> Node:
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return a.tape._record(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),), "log_softmax")


def reduce_sum(a: Node) -> Node:
    shape = a.shape
    return a.tape._record(
        np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "reduce_sum"
    )


def reduce_mean(a: Node) -> Node:
    shape = a.shape
    n = a.value.size
    return a.tape._record(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "reduce_mean"
    )


def row_sum(a: Node) -> Node:
    """Sum across columns, one value per row (n x 1)."""
    cols = a.shape[1]
    return a.tape._record(
        a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, cols, axis=1),), "row_sum"
    )


def concat_rows(parts: Sequence[Node]) -> Node:
    if not parts:
        raise ContractError("concat_rows needs at least one input")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts {cols} and {p.shape[1]} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return parts[0].tape._record(np.vstack([p.value for p in parts]), tuple(parts), back, "concat_rows")


_ACTIVATION_FNS: dict[str, Callable[[Node], Node]] = {
    "identity": lambda x: x,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
}


# ---------------------------------------------------------------------------
# models


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class MlpModel:
    """Feed-forward network stored as a chain of dense layers."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("MlpModel needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @classmethod
    def create(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "MlpModel":
        """Randomly initialised network with layer widths ``dims``.

        Weights are Glorot-uniform; biases start at zero.
        """
        if len(dims) < 2:
            raise ContractError("dims needs an input and an output width")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = math.sqrt(6.0 / (n_in + n_out))
            act = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(
                Layer(rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros((1, n_out)), act)
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def output_activation(self) -> str:
        return self.layers[-1].activation

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def copy(self) -> "MlpModel":
        return MlpModel([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def __call__(self, inputs) -> np.ndarray:
        """Tape-free evaluation."""
        x = as_matrix(inputs, checked=False)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, model expects {self.input_dim}")
        for layer in self.layers:
            x = _apply_activation_np(x @ layer.weight + layer.bias, layer.activation)
        return x


def _apply_activation_np(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return x
    if activation == "tanh":
        return np.tanh(x)
    if activation == "sigmoid":
        return _sigmoid(x)
    if activation == "relu":
        return np.maximum(x, 0.0)
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def forward(
    model: MlpModel,
    inputs: Node,
    tape: Tape | None = None,
    trainable: bool = True,
    pre_activation: bool = False,
) -> Node:
    """Record ``model(inputs)`` on the tape of ``inputs``.

    With ``pre_activation`` the final activation is skipped, which gives the
    logit of a sigmoid discriminator without a lossy log/exp round trip.
    """
    tape = tape or inputs.tape
    if inputs.tape is not tape:
        raise ContractError("input node belongs to a different tape")
    if inputs.shape[1] != model.input_dim:
        raise ShapeError(f"input has {inputs.shape[1]} columns, model expects {model.input_dim}")
    params = tape.params_of(model, trainable=trainable)
    x = inputs
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        w, b = params[2 * i], params[2 * i + 1]
        x = add_bias(matmul(x, w), b)
        if not (pre_activation and i == last):
            x = _ACTIVATION_FNS[layer.activation](x)
    return x


def param_grads(tape: Tape, model: MlpModel, grads: GradientMap) -> list[np.ndarray]:
    return [grads[n] for n in tape.params_of(model)]


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState
) -> list[np.ndarray]:
    """Update ``params`` in place and return them."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= state.lr * g
        return params
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(function: Callable[[Node], Node], point, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``function`` maps a leaf node to a 1x1 node using tape primitives. The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = as_matrix(point)

    def value_at(x: np.ndarray) -> float:
        tape = Tape()
        out = function(tape.leaf(x))
        val = float(out.value.reshape(-1)[0])
        if not math.isfinite(val):
            raise EvaluationError(f"function value is {val}")
        return val

    tape = Tape()
    leaf = tape.leaf(x0.copy())
    root = function(leaf)
    if not np.isfinite(root.value).all():
        raise EvaluationError("function value is not finite")
    analytic = backward(tape, root)[leaf]

    worst = 0.0
    for idx in np.ndindex(*x0.shape):
        plus = x0.copy()
        minus = x0.copy()
        plus[idx] += step
        minus[idx] -= step
        numeric = (value_at(plus) - value_at(minus)) / (2.0 * step)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint documents

FORMAT_VERSION = 1


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dims": [model.input_dim] + [l.weight.shape[1] for l in model.layers],
        "activations": [l.activation for l in model.layers],
        "weights": [l.weight.tolist() for l in model.layers],
        "biases": [l.bias.tolist() for l in model.layers],
    }


def model_from_dict(doc: dict) -> MlpModel:
    from .errors import CheckpointError

    version = doc.get("format_version") if isinstance(doc, dict) else None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    try:
        layers = [
            Layer(
                np.array(w, dtype=np.float64).reshape(d_in, d_out),
                np.array(b, dtype=np.float64).reshape(1, d_out),
                act,
            )
            for w, b, act, d_in, d_out in zip(
                doc["weights"], doc["biases"], doc["activations"], doc["dims"][:-1], doc["dims"][1:]
            )
        ]
        if len(layers) != len(doc["dims"]) - 1:
            raise CheckpointError("layer count does not match dims")
        return MlpModel(layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def clamp_weights(model: MlpModel, bound: float) -> None:
    """Clip every weight and bias of ``model`` into ``[-bound, bound]`` in place."""
    for p in model.parameters():
        np.clip(p, -bound, bound, out=p)

