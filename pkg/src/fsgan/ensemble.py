"""Combining sub-discriminators and calibrating the combined output.

Sub-discriminators either end in a sigmoid (probabilities) or are raw WGAN
critics; critic scores are read as logits so both kinds flow through the same
combination and calibration code.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .errors import CalibrationDegenerate, ConfigError, ContractError, DataError

PROB_CLAMP = 1e-6
LOGIT_BOUND = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)

COMBINE_KINDS = ("softmax-weighted", "mean-probability", "mean-logit")


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.log(p) - np.log1p(-p)


@dataclass
class CombineRule:
    kind: str = "softmax-weighted"
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in COMBINE_KINDS:
            raise ContractError(f"unknown combine rule {self.kind!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ContractError("combine weights must be non-negative and sum to 1")
            self.weights = w

    def weights_for(self, count: int) -> np.ndarray:
        if self.kind != "softmax-weighted" or self.weights is None:
            return np.full(count, 1.0 / count)
        if len(self.weights) != count:
            raise ContractError(f"{len(self.weights)} weights for {count} sub-discriminators")
        return self.weights


@dataclass
class Calibration:
    """Order-preserving logistic map ``sigmoid(a * logit(p) + b)``."""

    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not self.a > 0:
            raise ContractError("calibration scale must be positive")

    def apply(self, p: np.ndarray) -> np.ndarray:
        return dc._sigmoid(self.a * _logit(np.asarray(p, dtype=np.float64)) + self.b)

    @property
    def is_identity(self) -> bool:
        return self.a == 1.0 and self.b == 0.0


@dataclass
class EnsembleDiscriminator:
    sub_discriminators: list[dc.MlpModel]
    rule: CombineRule = field(default_factory=CombineRule)
    calibration: Calibration = field(default_factory=Calibration)

    def __post_init__(self):
        if not self.sub_discriminators:
            raise ContractError("ensemble needs at least one sub-discriminator")
        dims = {m.input_dim for m in self.sub_discriminators}
        if len(dims) != 1:
            raise ContractError(f"sub-discriminators disagree on input dim: {sorted(dims)}")
        self.rule.weights_for(len(self.sub_discriminators))

    @property
    def size(self) -> int:
        return len(self.sub_discriminators)

    @property
    def input_dim(self) -> int:
        return self.sub_discriminators[0].input_dim

    def member_logits(self, x) -> np.ndarray:
        """(T, n) array of each member's logit (critic score for WGAN)."""
        x = dc.as_matrix(x, checked=False)
        return np.stack([_pre_activation(m, x)[:, 0] for m in self.sub_discriminators])

    def raw(self, x) -> np.ndarray:
        """Combined, uncalibrated D(x)."""
        return combine_logits(self.member_logits(x), self.rule)

    def evaluate(self, x) -> np.ndarray:
        """Calibrated D_cal(x)."""
        return self.calibration.apply(self.raw(x))

    def log_density_ratio(self, x) -> np.ndarray:
        u = self.calibration.a * _logit(self.raw(x)) + self.calibration.b
        return np.clip(u, -LOGIT_BOUND, LOGIT_BOUND)

    def to_dict(self) -> dict:
        return {
            "combine_kind": self.rule.kind,
            "weights": self.rule.weights_for(self.size).tolist(),
            "cal_a": self.calibration.a,
            "cal_b": self.calibration.b,
        }


def _pre_activation(model: dc.MlpModel, x: np.ndarray) -> np.ndarray:
    for layer in model.layers[:-1]:
        x = dc._apply_activation_np(x @ layer.weight + layer.bias, layer.activation)
    last = model.layers[-1]
    return x @ last.weight + last.bias


def combine(sub_outputs: Sequence[np.ndarray], rule: CombineRule) -> np.ndarray:
    """Combine T probability vectors into one probability vector."""
    probs = np.atleast_2d(np.asarray(sub_outputs, dtype=np.float64))
    if probs.shape[0] < 1:
        raise ContractError("combine needs at least one sub-output")
    if np.any(probs < 0) or np.any(probs > 1):
        raise ContractError("sub-outputs must be probabilities")
    w = rule.weights_for(probs.shape[0])
    if rule.kind == "mean-logit":
        return dc._sigmoid(_logit(probs).mean(axis=0))
    return w @ probs


def combine_logits(logits: np.ndarray, rule: CombineRule) -> np.ndarray:
    """Same as :func:`combine` but starting from member logits."""
    w = rule.weights_for(logits.shape[0])
    if rule.kind == "mean-logit":
        return dc._sigmoid(np.clip(logits.mean(axis=0), -LOGIT_BOUND, LOGIT_BOUND))
    return w @ dc._sigmoid(logits)


def combined_probability_node(member_logits: Sequence[dc.Node], rule: CombineRule) -> dc.Node:
    """Tape version of :func:`combine_logits` for n x 1 member logit nodes."""
    w = rule.weights_for(len(member_logits))
    if rule.kind == "mean-logit":
        total = member_logits[0]
        for node in member_logits[1:]:
            total = dc.add(total, node)
        return dc.sigmoid(dc.clip(dc.scale(total, 1.0 / len(member_logits)), -LOGIT_BOUND, LOGIT_BOUND))
    if len(member_logits) == 1:
        return dc.sigmoid(member_logits[0])
    total = dc.scale(dc.sigmoid(member_logits[0]), w[0])
    for wt, node in zip(w[1:], member_logits[1:]):
        total = dc.add(total, dc.scale(dc.sigmoid(node), wt))
    return total


def log_density_ratio_node(ensemble: EnsembleDiscriminator, x: dc.Node) -> dc.Node:
    """n x 1 node holding log d(x) = logit(clamped D_cal(x)), differentiable in x."""
    logits = [dc.forward(m, x, trainable=False, pre_activation=True) for m in ensemble.sub_discriminators]
    cal = ensemble.calibration
    if ensemble.rule.kind == "mean-logit":
        total = logits[0]
        for node in logits[1:]:
            total = dc.add(total, node)
        logit = dc.clip(dc.scale(total, 1.0 / len(logits)), -LOGIT_BOUND, LOGIT_BOUND)
    else:
        p = dc.clip(combined_probability_node(logits, ensemble.rule), PROB_CLAMP, 1.0 - PROB_CLAMP)
        logit = dc.sub(dc.log(p), dc.log(dc.shift(dc.scale(p, -1.0), 1.0)))
    return dc.clip(dc.shift(dc.scale(logit, cal.a), cal.b), -LOGIT_BOUND, LOGIT_BOUND)


def density_ratio(ensemble: EnsembleDiscriminator, x) -> np.ndarray:
    """d(x) = D_cal(x) / (1 - D_cal(x)) after clamping D_cal into (0, 1)."""
    return np.exp(ensemble.log_density_ratio(x))


def ratio_from_probability(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return p / (1.0 - p)


def _binary_loglik(p: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)))


def _holdout(real, fake) -> tuple[np.ndarray, np.ndarray]:
    real = dc.as_matrix(real)
    fake = dc.as_matrix(fake)
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise DataError("holdout sets must be non-empty")
    labels = np.concatenate([np.ones(real.shape[0]), np.zeros(fake.shape[0])])
    return np.vstack([real, fake]), labels


def fit_softmax_weights(sub_discriminators: Sequence[dc.MlpModel], holdout_real, holdout_fake) -> np.ndarray:
    """Softmax over each member's mean holdout log-likelihood."""
    if np.size(holdout_real) == 0 or np.size(holdout_fake) == 0:
        raise DataError("holdout sets must be non-empty")
    x, labels = _holdout(holdout_real, holdout_fake)
    scores = np.array(
        [_binary_loglik(dc._sigmoid(_pre_activation(m, x)[:, 0]), labels) for m in sub_discriminators]
    )
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    # renormalise so the sum is 1 to within the CombineRule tolerance
    return w / w.sum()


def fit_calibration(
    probs: np.ndarray, labels: np.ndarray, steps: int = 500, lr: float = 0.1, tol: float = 1e-10
) -> Calibration:
    """Maximise the binary log-likelihood of ``sigmoid(a*logit(p)+b)``.

    Full-batch gradient ascent on ``(log a, b)`` starting from the identity map.
    """
    s = _logit(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    if np.ptp(s) == 0.0:
        raise CalibrationDegenerate("all discriminator outputs on the holdout are equal")
    alpha, b = 0.0, 0.0
    for _ in range(steps):
        a = math.exp(alpha)
        resid = labels - dc._sigmoid(a * s + b)
        g_alpha = a * float(np.mean(resid * s))
        g_b = float(np.mean(resid))
        alpha += lr * g_alpha
        b += lr * g_b
        if g_alpha * g_alpha + g_b * g_b < tol:
            break
    return Calibration(math.exp(alpha), b)


def calibrate(ensemble: EnsembleDiscriminator, holdout_real, holdout_fake, **kwargs) -> Calibration:
    x, labels = _holdout(holdout_real, holdout_fake)
    return fit_calibration(ensemble.raw(x), labels, **kwargs)


def calibration_loglik(cal: Calibration, probs: np.ndarray, labels: np.ndarray) -> float:
    return _binary_loglik(cal.apply(probs), np.asarray(labels, dtype=np.float64))


def fit_ensemble(
    sub_discriminators: Sequence[dc.MlpModel],
    holdout_real,
    holdout_fake,
    kind: str = "softmax-weighted",
    calibrate_output: bool = True,
) -> EnsembleDiscriminator:
    """Fit combination weights and calibration on one holdout.

    A degenerate holdout falls back to the identity calibration.
    """
    weights = None
    if kind == "softmax-weighted":
        weights = fit_softmax_weights(sub_discriminators, holdout_real, holdout_fake)
    ens = EnsembleDiscriminator(list(sub_discriminators), CombineRule(kind, weights))
    if calibrate_output:
        try:
            ens.calibration = calibrate(ens, holdout_real, holdout_fake)
        except CalibrationDegenerate:
            ens.calibration = Calibration()
    return ens


def ensemble_from_dict(sub_discriminators: Sequence[dc.MlpModel], doc: dict) -> EnsembleDiscriminator:
    return EnsembleDiscriminator(
        list(sub_discriminators),
        CombineRule(doc["combine_kind"], np.array(doc["weights"]) if doc["combine_kind"] == "softmax-weighted" else None),
        Calibration(doc["cal_a"], doc["cal_b"]),
    )


@dataclass
class EnsembleConfig:
    """How sub-discriminators are trained and combined.

    ``refine_steps`` extra discriminator updates against the frozen generator
    run before the combination weights and calibration are fitted on a
    holdout of ``holdout_fraction`` of the real rows.
    """

    members: int = 5
    bootstrap: bool = True
    combine_kind: str = "softmax-weighted"
    calibrate: bool = True
    holdout_fraction: float = 0.2
    refine_steps: int = 0

    def __post_init__(self):
        if self.members < 1:
            raise ConfigError("members must be >= 1")
        if self.combine_kind not in COMBINE_KINDS:
            raise ConfigError(f"unknown combine rule {self.combine_kind!r}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        if self.refine_steps < 0:
            raise ConfigError("refine_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)
