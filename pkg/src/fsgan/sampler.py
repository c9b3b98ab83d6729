"""Latent-space Metropolis-Hastings with Langevin proposals.

Chains live in the generator's latent space. The target density over a latent
``z`` is the prior tilted by the calibrated discriminator's density ratio at
``G(z)``::

    log_target(z) = log p0(z) + log d(G(z)),   d = D_cal / (1 - D_cal)

Proposals are Langevin steps ``z' = z + (tau/2) grad log_target(z) + sqrt(tau) eps``
and are accepted with the usual MH ratio, which corrects the discretisation
error of the Langevin step. All chains are advanced together as rows of one
matrix, but every chain draws its noise from its own random stream so its
trajectory does not depend on how many other chains are running.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import diffcore as dc
from .ensemble import EnsembleDiscriminator, log_density_ratio_node
from .errors import ConfigError, SamplerError
from .gancore import LatentPrior, TrainedGan

log = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.574


class Target(Protocol):
    dim: int

    def evaluate(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(log_target, grad, x)`` for a batch of latent rows."""


class LatentTarget:
    """Prior tilted by the discriminator density ratio, differentiated on a tape."""

    def __init__(self, generator: dc.MlpModel, ensemble: EnsembleDiscriminator, prior: LatentPrior):
        if generator.input_dim != prior.dim:
            raise ConfigError(f"generator expects {generator.input_dim}-d latents, prior is {prior.dim}-d")
        if generator.output_dim != ensemble.input_dim:
            raise ConfigError("generator output and discriminator input dims differ")
        self.generator = generator
        self.ensemble = ensemble
        self.prior = prior
        self.dim = prior.dim

    def evaluate(self, z: np.ndarray):
        tape = dc.Tape()
        zn = tape.leaf(np.array(z, dtype=np.float64, ndmin=2))
        lt, x = log_target_node(zn, self.generator, self.ensemble, self.prior)
        grad = dc.backward(tape, dc.reduce_sum(lt))[zn]
        return lt.value[:, 0].copy(), grad, x.value


def log_target_node(z: dc.Node, generator: dc.MlpModel, ensemble: EnsembleDiscriminator, prior: LatentPrior):
    """Per-row log p0(z) + log d(G(z)) as an (n, 1) node, plus the G(z) node."""
    x = dc.forward(generator, z, trainable=False)
    return dc.add(prior.log_density_node(z), log_density_ratio_node(ensemble, x)), x


class AnalyticTarget:
    """Target given by closed-form log density and gradient (identity generator)."""

    def __init__(self, dim: int, log_fn, grad_fn):
        self.dim = dim
        self.log_fn = log_fn
        self.grad_fn = grad_fn

    def evaluate(self, z: np.ndarray):
        z = np.array(z, dtype=np.float64, ndmin=2)
        return np.asarray(self.log_fn(z), dtype=np.float64).reshape(-1), np.asarray(self.grad_fn(z), dtype=np.float64).reshape(z.shape), z


def log_target(z, generator: dc.MlpModel, ensemble: EnsembleDiscriminator, prior: LatentPrior) -> np.ndarray:
    """log p0(z) + log d(G(z)) for each latent row."""
    z = np.array(z, dtype=np.float64, ndmin=2)
    return prior.log_density(z) + ensemble.log_density_ratio(generator(z))


@dataclass
class SamplerConfig:
    tau: float = 0.05
    chain_length: int = 60
    burn_in: int | None = None
    thinning: int = 3
    n_chains: int = 500
    init: str = "prior-draw"
    init_k: int = 64
    adapt: bool = True
    target_acceptance: float = TARGET_ACCEPTANCE
    use_gradient: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError("tau must be positive and finite")
        if self.chain_length < 1 or self.n_chains < 1:
            raise ConfigError("chain_length and n_chains must be >= 1")
        if self.burn_in is None:
            self.burn_in = self.chain_length // 2
        if not 0 <= self.burn_in < self.chain_length:
            raise ConfigError("burn_in must be in [0, chain_length)")
        if self.thinning < 1:
            raise ConfigError("thinning must be >= 1")
        if self.init not in ("prior-draw", "best-of-k-prior"):
            raise ConfigError(f"unknown init kind {self.init!r}")

    @property
    def kept_per_chain(self) -> int:
        return (self.chain_length - self.burn_in) // self.thinning

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainState:
    """Current point of every chain; row i belongs to chain i."""

    z: np.ndarray
    x: np.ndarray
    log_target: np.ndarray
    grad: np.ndarray

    @classmethod
    def at(cls, target: Target, z: np.ndarray) -> "ChainState":
        lt, grad, x = target.evaluate(z)
        state = cls(np.array(z, dtype=np.float64, ndmin=2), x, lt, grad)
        state.check()
        return state

    def check(self) -> None:
        bad = ~(np.isfinite(self.log_target) & np.all(np.isfinite(self.grad), axis=1))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise SamplerError(f"non-finite log target or gradient at chain {i}", z=self.z[i].copy())


@dataclass
class ChainDiagnostics:
    acceptance_rate: np.ndarray
    mean_accepted_step: np.ndarray
    log_target_trace: np.ndarray
    tau_final: np.ndarray
    n_kept: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "acceptance_rate": float(np.mean(self.acceptance_rate)),
            "acceptance_rate_per_chain": self.acceptance_rate.tolist(),
            "mean_accepted_step": float(np.nanmean(self.mean_accepted_step)) if np.any(np.isfinite(self.mean_accepted_step)) else 0.0,
            "n_kept": self.n_kept,
            "tau_final": float(np.mean(self.tau_final)),
            "warnings": list(self.warnings),
        }


def _as_rngs(rng, n: int) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return [rng] * n
    rngs = list(rng)
    if len(rngs) != n:
        raise ConfigError(f"{len(rngs)} random streams for {n} chains")
    return rngs


def _normals(rngs: Sequence[np.random.Generator], dim: int) -> np.ndarray:
    if len(set(map(id, rngs))) == 1:
        return rngs[0].standard_normal((len(rngs), dim))
    return np.stack([r.standard_normal(dim) for r in rngs])


def _uniforms(rngs: Sequence[np.random.Generator]) -> np.ndarray:
    if len(set(map(id, rngs))) == 1:
        return rngs[0].random(len(rngs))
    return np.array([r.random() for r in rngs])


def _tau_column(tau, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1, 1), (n, 1))


def proposal_log_density(z_to: np.ndarray, z_from: np.ndarray, grad_from: np.ndarray, tau, use_gradient: bool = True) -> np.ndarray:
    """log q(z_to | z_from) for the diagonal normal Langevin proposal."""
    tau_col = _tau_column(tau, z_to.shape[0])
    mean = z_from + 0.5 * tau_col * grad_from if use_gradient else z_from
    d = z_to.shape[1]
    sq = np.sum((z_to - mean) ** 2, axis=1)
    return -sq / (2.0 * tau_col[:, 0]) - 0.5 * d * np.log(2.0 * math.pi * tau_col[:, 0])


def langevin_propose(state: ChainState, tau, rng, noise: np.ndarray | None = None, use_gradient: bool = True):
    """One Langevin proposal per chain.

    Returns ``(z_prop, log q(z_prop | z_k))``. ``noise`` overrides the
    standard-normal draw, which makes the map deterministic for testing.
    """
    n, d = state.z.shape
    if not np.all(np.isfinite(state.grad)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(state.grad), axis=1))[0])
        raise SamplerError("non-finite log-target gradient", z=state.z[bad].copy())
    eps = _normals(_as_rngs(rng, n), d) if noise is None else np.asarray(noise, dtype=np.float64).reshape(n, d)
    tau_col = _tau_column(tau, n)
    drift = 0.5 * tau_col * state.grad if use_gradient else 0.0
    z_prop = state.z + drift + np.sqrt(tau_col) * eps
    return z_prop, proposal_log_density(z_prop, state.z, state.grad, tau, use_gradient)


def mh_log_ratio(state: ChainState, proposed: ChainState, tau, use_gradient: bool = True) -> np.ndarray:
    forward = proposal_log_density(proposed.z, state.z, state.grad, tau, use_gradient)
    reverse = proposal_log_density(state.z, proposed.z, proposed.grad, tau, use_gradient)
    return (proposed.log_target + reverse) - (state.log_target + forward)


def acceptance_probability(log_ratio: np.ndarray) -> np.ndarray:
    """min(1, exp(log_ratio)); non-finite ratios are rejected outright."""
    log_ratio = np.asarray(log_ratio, dtype=np.float64)
    alpha = np.exp(np.minimum(log_ratio, 0.0))
    return np.where(np.isnan(log_ratio), 0.0, alpha)


def mh_accept(state: ChainState, z_prop: np.ndarray, tau, rng, target: Target, use_gradient: bool = True):
    """Accept or reject each chain's proposal.

    Returns ``(accepted, alpha, next_state)``; rejected chains keep their
    current ``z`` and ``x``.
    """
    lt, grad, x = target.evaluate(z_prop)
    finite = np.isfinite(lt) & np.all(np.isfinite(grad), axis=1)
    grad = np.where(finite[:, None], grad, 0.0)
    proposed = ChainState(np.asarray(z_prop, dtype=np.float64), x, np.where(finite, lt, -np.inf), grad)
    with np.errstate(invalid="ignore"):
        log_ratio = mh_log_ratio(state, proposed, tau, use_gradient)
    alpha = acceptance_probability(np.where(finite, log_ratio, -np.inf))
    u = _uniforms(_as_rngs(rng, state.z.shape[0]))
    accepted = u < alpha
    keep = accepted[:, None]
    nxt = ChainState(
        np.where(keep, proposed.z, state.z),
        np.where(keep, proposed.x, state.x),
        np.where(accepted, proposed.log_target, state.log_target),
        np.where(keep, proposed.grad, state.grad),
    )
    return accepted, alpha, nxt


class _DualAveraging:
    """Per-chain step-size adaptation on log tau (Hoffman and Gelman style)."""

    def __init__(self, tau0: np.ndarray, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * tau0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = np.zeros_like(tau0)
        self.log_tau_bar = np.log(tau0)
        self.t = 0

    def update(self, alpha: np.ndarray) -> np.ndarray:
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - alpha)
        log_tau = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        eta = t ** (-self.kappa)
        self.log_tau_bar = eta * log_tau + (1.0 - eta) * self.log_tau_bar
        return np.exp(log_tau)

    @property
    def final(self) -> np.ndarray:
        return np.exp(self.log_tau_bar)


def chain_rngs(seed: int, n_chains: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def initial_latents(target: Target, config: SamplerConfig, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    d = target.dim
    if config.init == "prior-draw":
        return np.stack([r.standard_normal(d) for r in rngs])
    starts = []
    for r in rngs:
        cand = r.standard_normal((config.init_k, d))
        lt, _, _ = target.evaluate(cand)
        lt = np.where(np.isfinite(lt), lt, -np.inf)
        starts.append(cand[int(np.argmax(lt))])
    return np.stack(starts)


def run_chains(target: Target, config: SamplerConfig, z0: np.ndarray | None = None):
    """Run ``config.n_chains`` chains; return kept latents, kept samples, diagnostics."""
    rngs = chain_rngs(config.seed, config.n_chains)
    z = initial_latents(target, config, rngs) if z0 is None else np.array(z0, dtype=np.float64, ndmin=2)
    state = ChainState.at(target, z)
    n = config.n_chains
    tau = np.full(n, float(config.tau))
    adapter = _DualAveraging(tau.copy(), config.target_acceptance) if config.adapt and config.burn_in > 0 else None

    kept_z, kept_x = [], []
    accepts = np.zeros(n)
    step_sum = np.zeros(n)
    trace = np.empty((n, config.chain_length))
    for k in range(1, config.chain_length + 1):
        z_prop, _ = langevin_propose(state, tau, rngs, use_gradient=config.use_gradient)
        accepted, alpha, nxt = mh_accept(state, z_prop, tau, rngs, target, config.use_gradient)
        step_sum += np.where(accepted, np.linalg.norm(nxt.z - state.z, axis=1), 0.0)
        accepts += accepted
        state = nxt
        if not np.all(np.isfinite(state.z)):
            raise SamplerError("chain state became non-finite", z=state.z.copy())
        trace[:, k - 1] = state.log_target
        if adapter is not None and k <= config.burn_in:
            tau = adapter.update(alpha)
            if k == config.burn_in:
                tau = adapter.final
        if k > config.burn_in and (k - config.burn_in) % config.thinning == 0:
            kept_z.append(state.z.copy())
            kept_x.append(state.x.copy())

    rate = accepts / config.chain_length
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_step = np.where(accepts > 0, step_sum / np.maximum(accepts, 1), np.nan)
    # chain-major order: all kept states of chain 0, then chain 1, ...
    Z = np.stack(kept_z, axis=1).reshape(-1, state.z.shape[1]) if kept_z else np.empty((0, target.dim))
    X = np.stack(kept_x, axis=1).reshape(-1, state.x.shape[1]) if kept_x else np.empty((0, state.x.shape[1]))
    diag = ChainDiagnostics(rate, mean_step, trace, tau, Z.shape[0])
    if np.mean(rate) < 0.01:
        msg = f"acceptance rate {np.mean(rate):.4f} is below 0.01"
        diag.warnings.append(msg)
        log.warning(msg)
    return Z, X, diag


def run_chain(gan: TrainedGan, ensemble: EnsembleDiscriminator, config: SamplerConfig):
    """Correct ``gan``'s generator toward the ensemble's implied distribution.

    Returns ``(X, diagnostics)`` where ``X`` stacks the kept samples of all
    chains.
    """
    target = LatentTarget(gan.generator, ensemble, gan.prior)
    _, X, diag = run_chains(target, config)
    return X, diag
