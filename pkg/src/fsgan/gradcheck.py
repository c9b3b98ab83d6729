"""Finite-difference checks for every differentiable primitive and the latent-target gradient."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc
from .ensemble import Calibration, CombineRule, EnsembleDiscriminator
from .gancore import GanConfig, LatentPrior, build_discriminator, build_generator
from .sampler import log_target_node

_WEIGHTS = np.random.default_rng(99).normal(size=(3, 4))


def _weighted(node: dc.Node) -> dc.Node:
    w = node.tape.constant(_WEIGHTS[: node.shape[0], : node.shape[1]])
    return dc.reduce_sum(dc.mul(node, w))


# Each case maps a 3x4 leaf to a scalar through (mainly) one primitive.
PRIMITIVE_CASES: dict[str, Callable[[dc.Node], dc.Node]] = {
    "matmul": lambda x: _weighted(dc.matmul(x, x.tape.constant(np.eye(4) + 0.3))),
    "matmul_right": lambda x: _weighted(dc.matmul(x.tape.constant(np.full((3, 3), 0.5)), x)),
    "add": lambda x: _weighted(dc.add(x, dc.square(x))),
    "sub": lambda x: _weighted(dc.sub(dc.tanh(x), x)),
    "mul": lambda x: _weighted(dc.mul(x, dc.tanh(x))),
    "add_bias": lambda x: _weighted(dc.add_bias(x, x.tape.constant(np.arange(4.0).reshape(1, 4)))),
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

_KINKED = ("relu", "leaky_relu", "clip")


def latent_target_case(mode: str = "gan", latent_dim: int = 4, data_dim: int = 2, members: int = 3, seed: int = 0):
    """A random generator and calibrated ensemble; returns ``z -> sum log_target(z)``."""
    rng = np.random.default_rng(seed)
    config = GanConfig(mode=mode, latent_dim=latent_dim, generator_hidden=(16,), discriminator_hidden=(16,))
    generator = build_generator(config, data_dim, rng)
    subs = [build_discriminator(config, data_dim, rng) for _ in range(members)]
    weights = rng.dirichlet(np.ones(members))
    ensemble = EnsembleDiscriminator(subs, CombineRule("softmax-weighted", weights), Calibration(1.3, -0.2))
    prior = LatentPrior(latent_dim)
    return lambda z: dc.reduce_sum(log_target_node(z, generator, ensemble, prior)[0])


def _avoid_kinks(point: np.ndarray) -> np.ndarray:
    return np.where(np.abs(point) < 1e-3, 0.5, point)


def run_gradchecks(points: int = 100, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error over ``points`` random inputs for each case."""
    results = {}
    for i, name in enumerate(sorted(PRIMITIVE_CASES)):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(points):
            x = rng.normal(size=(3, 4))
            if name in _KINKED:
                x = _avoid_kinks(x)
            worst = max(worst, dc.grad_check(PRIMITIVE_CASES[name], x, step))
        results[name] = worst
    for mode in ("gan", "wgan"):
        fn = latent_target_case(mode, seed=seed)
        rng = np.random.default_rng([seed, 1000, len(mode)])
        results[f"latent_target_{mode}"] = max(dc.grad_check(fn, rng.normal(size=(2, 4)), step) for _ in range(points))
    return results
