"""Multi-head classifier: pre-training on generated data, MHLoss fine-tuning.

The classifier is a shared feature body followed by ``H`` linear heads. The
multi-head loss is the mean over heads of each head's softmax cross-entropy
plus an L2 penalty on that head's weight matrix (biases are not penalised).
Predictions average the heads' class probabilities.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, DataError

log = logging.getLogger(__name__)

# Uniform bound for fresh heads; None means Glorot. Small heads start every
# head near the uniform prediction so they follow similar trajectories.
HEAD_INIT_SCALES = {"small": 0.01, "glorot": None}


@dataclass
class FinetuneConfig:
    heads: int = 5
    epochs: int = 100
    gamma: float = 1e-3
    lr: float = 0.01
    optimizer: str = "adam"
    freeze_body: bool = True
    head_init: str = "small"
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.head_init not in HEAD_INIT_SCALES:
            raise ConfigError(f"unknown head init {self.head_init!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 3e-3
    gamma: float = 1e-4
    heads: int = 1
    body_hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("pretraining needs at least one epoch")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.body_hidden = tuple(self.body_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["body_hidden"] = list(self.body_hidden)
        return d


@dataclass
class Head:
    weight: np.ndarray
    bias: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        return [self.weight, self.bias]


@dataclass
class MultiHeadClassifier:
    body: dc.MlpModel
    heads: list[Head]
    n_classes: int
    history: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.heads:
            raise ContractError("classifier needs at least one head")
        for h in self.heads:
            if h.weight.shape != (self.body.output_dim, self.n_classes):
                raise ContractError(
                    f"head {h.weight.shape} does not map {self.body.output_dim} features to {self.n_classes} classes"
                )

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def head_parameters(self) -> list[np.ndarray]:
        return [p for h in self.heads for p in h.parameters()]

    def copy(self) -> "MultiHeadClassifier":
        return MultiHeadClassifier(
            self.body.copy(), [Head(h.weight.copy(), h.bias.copy()) for h in self.heads], self.n_classes
        )

    def predict_proba(self, X) -> np.ndarray:
        return predict(self, X)[0]

    def to_dict(self) -> dict:
        return {
            "format_version": dc.FORMAT_VERSION,
            "n_classes": self.n_classes,
            "body": dc.model_to_dict(self.body),
            "heads": [{"weight": h.weight.tolist(), "bias": h.bias.tolist()} for h in self.heads],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MultiHeadClassifier":
        from .errors import CheckpointError

        if doc.get("format_version") != dc.FORMAT_VERSION:
            raise CheckpointError(f"unsupported classifier format_version {doc.get('format_version')!r}")
        try:
            body = dc.model_from_dict(doc["body"])
            n_classes = int(doc["n_classes"])
            heads = [
                Head(
                    np.array(h["weight"], dtype=np.float64).reshape(body.output_dim, n_classes),
                    np.array(h["bias"], dtype=np.float64).reshape(1, n_classes),
                )
                for h in doc["heads"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed classifier checkpoint: {exc}") from exc
        return cls(body, heads, n_classes)


def _init_head(n_features: int, n_classes: int, rng: np.random.Generator, scale: float | None = None) -> Head:
    bound = np.sqrt(6.0 / (n_features + n_classes)) if scale is None else scale
    return Head(rng.uniform(-bound, bound, size=(n_features, n_classes)), np.zeros((1, n_classes)))


def head_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent streams per head; head ``h`` gets the same stream for any count > h."""
    return [np.random.default_rng([seed, h]) for h in range(count)]


def build_classifier(
    n_features: int, n_classes: int, config: PretrainConfig, rng: np.random.Generator
) -> MultiHeadClassifier:
    dims = [n_features, *config.body_hidden, config.feature_dim]
    body = dc.MlpModel.create(dims, rng, config.activation, config.activation)
    heads = [_init_head(config.feature_dim, n_classes, r) for r in head_rngs(config.seed, config.heads)]
    return MultiHeadClassifier(body, heads, n_classes)


def _one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= n_classes or not np.all(y == np.round(y))):
        raise DataError(f"labels must be integers in [0, {n_classes})")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y.astype(int)] = 1.0
    return out


def _targets(Y, n_classes: int) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim == 2 and Y.shape[1] == n_classes:
        if not np.allclose(Y.sum(axis=1), 1.0) or np.any((Y != 0) & (Y != 1)):
            raise DataError("one-hot targets must have exactly one 1 per row")
        return Y.astype(np.float64)
    return _one_hot(Y, n_classes)


def _mh_loss_nodes(model: MultiHeadClassifier, tape: dc.Tape, X, targets: np.ndarray, gamma: float, train_body: bool):
    x = tape.constant(X)
    feats = dc.forward(model.body, x, trainable=train_body)
    y = tape.constant(targets)
    inv_n = -1.0 / targets.shape[0]
    head_nodes, per_head = [], []
    for head in model.heads:
        w, b = tape.leaf(head.weight), tape.leaf(head.bias)
        head_nodes.append((w, b))
        logits = dc.add_bias(dc.matmul(feats, w), b)
        ce = dc.scale(dc.reduce_sum(dc.mul(dc.log_softmax(logits), y)), inv_n)
        term = dc.add(ce, dc.scale(dc.reduce_sum(dc.square(w)), gamma)) if gamma else ce
        per_head.append(term)
    total = per_head[0]
    for t in per_head[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / len(per_head)), head_nodes


def mh_loss(model: MultiHeadClassifier, X, Y, gamma: float) -> float:
    """(1/H) * sum over heads of (cross-entropy + gamma * ||W_h||^2)."""
    X = dc.as_matrix(X)
    if X.shape[0] == 0:
        raise DataError("empty batch")
    loss, _ = _mh_loss_nodes(model, dc.Tape(), X, _targets(Y, model.n_classes), gamma, False)
    return float(loss.value[0, 0])


def _loss_and_grads(model, X, targets, gamma, train_body):
    tape = dc.Tape()
    loss, head_nodes = _mh_loss_nodes(model, tape, X, targets, gamma, train_body)
    grads = dc.backward(tape, loss)
    g = [grads[n] for pair in head_nodes for n in pair]
    params = model.head_parameters()
    if train_body:
        params = model.body.parameters() + params
        g = dc.param_grads(tape, model.body, grads) + g
    return float(loss.value[0, 0]), params, g


def predict(model: MultiHeadClassifier, X):
    """Head-averaged class probabilities and argmax labels (ties -> lowest index)."""
    feats = model.body(dc.as_matrix(X, checked=False))
    probs = np.zeros((feats.shape[0], model.n_classes))
    for head in model.heads:
        logits = feats @ head.weight + head.bias
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs += e / e.sum(axis=1, keepdims=True)
    probs /= model.n_heads
    return probs, np.argmax(probs, axis=1)


def combined_cross_entropy(model: MultiHeadClassifier, X, y) -> float:
    """Cross-entropy of the head-averaged prediction."""
    probs, _ = predict(model, X)
    t = _targets(y, model.n_classes)
    return float(-np.mean(np.log(np.maximum(np.sum(probs * t, axis=1), dc.LOG_FLOOR))))


def pretrain(X, y, config: PretrainConfig, n_classes: int | None = None) -> MultiHeadClassifier:
    """Train body and heads jointly on labelled (generated) data with minibatch Adam."""
    X = dc.as_matrix(X)
    y = np.asarray(y).reshape(-1).astype(int)
    if X.shape[0] != y.size or y.size == 0:
        raise DataError("features and labels must be non-empty and aligned")
    if np.unique(y).size < 2:
        raise DataError("pretraining needs at least two classes")
    n_classes = n_classes or int(y.max()) + 1
    rng = np.random.default_rng([config.seed, 1_000_003])
    model = build_classifier(X.shape[1], n_classes, config, rng)
    targets = _one_hot(y, n_classes)
    opt = dc.OptimizerState("adam", lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, X.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, params, grads = _loss_and_grads(model, X[idx], targets[idx], config.gamma, True)
            dc.optimizer_step(params, grads, opt)
            total += loss * len(idx)
        losses.append(total / X.shape[0])
        if epoch >= 10 and losses[-1] > losses[-11] + 0.05:
            log.warning("pretraining loss rose over 10 epochs: %.4f -> %.4f", losses[-11], losses[-1])
    model.history = [{"epoch": i, "loss": l} for i, l in enumerate(losses)]
    return model


def finetune(
    model: MultiHeadClassifier, X, y, config: FinetuneConfig, allow_zero_epochs: bool = False
) -> MultiHeadClassifier:
    """Fine-tune a copy of ``model`` on a support set with the multi-head loss.

    Heads are re-initialised (one seed per head) and trained for
    ``config.epochs`` full-batch steps; the body is frozen unless
    ``config.freeze_body`` is off. Each history entry records the multi-head
    loss and the cross-entropy of the combined prediction after the step.
    """
    X = dc.as_matrix(X)
    y = np.asarray(y).reshape(-1)
    if X.shape[0] == 0:
        raise DataError("support set is empty")
    if y.size and int(y.max()) >= model.n_classes:
        raise ContractError(f"support has label {int(y.max())} but model has {model.n_classes} classes")
    if config.epochs == 0:
        if not allow_zero_epochs:
            raise ConfigError("zero fine-tuning epochs requires allow_zero_epochs")
        return model.copy()
    out = model.copy()
    out.heads = [
        _init_head(out.body.output_dim, out.n_classes, r, HEAD_INIT_SCALES[config.head_init])
        for r in head_rngs(config.seed, config.heads)
    ]
    targets = _one_hot(y, out.n_classes)
    opt = dc.OptimizerState(config.optimizer, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        loss, params, grads = _loss_and_grads(out, X, targets, config.gamma, not config.freeze_body)
        dc.optimizer_step(params, grads, opt)
        if not np.isfinite(loss):
            raise DataError(f"fine-tuning loss is not finite at epoch {epoch}")
        history.append({"epoch": epoch, "mh_loss": loss, "combined_ce": combined_cross_entropy(out, X, y)})
    out.history = history
    return out


def epochs_to_loss(model: MultiHeadClassifier, threshold: float, key: str = "combined_ce") -> int | None:
    """First epoch (1-based) at which ``key`` in the history drops below ``threshold``."""
    for entry in model.history:
        if entry[key] <= threshold:
            return entry["epoch"] + 1
    return None
