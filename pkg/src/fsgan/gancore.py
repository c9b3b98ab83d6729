"""GAN and WGAN training against one or several sub-discriminators."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .ensemble import COMBINE_KINDS, CombineRule, combined_probability_node
from .errors import ConfigError, ContractError, DataError, TrainingDiverged

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LatentPrior:
    """Standard normal prior over the latent space."""

    dim: int

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim))

    def log_density(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * _LOG_2PI

    def log_density_node(self, z: dc.Node) -> dc.Node:
        return dc.shift(dc.scale(dc.row_sum(dc.square(z)), -0.5), -0.5 * self.dim * _LOG_2PI)


@dataclass
class GanConfig:
    mode: str = "gan"
    latent_dim: int = 16
    batch_size: int = 64
    steps: int = 1000
    d_steps: int | None = None
    clip: float = 0.01
    optimizer: str = "adam"
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.999
    generator_hidden: tuple[int, ...] = (64, 64)
    discriminator_hidden: tuple[int, ...] = (64, 64)
    generator_activation: str = "tanh"
    discriminator_activation: str = "leaky_relu"
    saturating: bool = False
    combine_kind: str = "mean-probability"
    identical_members: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("gan", "wgan"):
            raise ConfigError(f"unknown GAN mode {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode == "wgan" and not self.clip > 0:
            raise ConfigError("wgan mode needs a positive clip bound")
        if self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("batch size and latent dim must be positive")
        if self.combine_kind not in COMBINE_KINDS:
            raise ConfigError(f"unknown combine rule {self.combine_kind!r}")
        self.generator_hidden = tuple(self.generator_hidden)
        self.discriminator_hidden = tuple(self.discriminator_hidden)

    @property
    def critic_steps(self) -> int:
        if self.d_steps is not None:
            return self.d_steps
        return 5 if self.mode == "wgan" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator_hidden"] = list(self.generator_hidden)
        d["discriminator_hidden"] = list(self.discriminator_hidden)
        return d


@dataclass
class TrainedGan:
    generator: dc.MlpModel
    sub_discriminators: list[dc.MlpModel]
    config: GanConfig
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)
    bootstrap_indices: list[np.ndarray] | None = None

    @property
    def prior(self) -> LatentPrior:
        return LatentPrior(self.config.latent_dim)

    @property
    def data_dim(self) -> int:
        return self.generator.output_dim


def gan_batch_value(d_real, d_fake) -> float:
    """Minimax value: mean log D(x) + mean log(1 - D(G(z)))."""
    d_real = np.asarray(d_real, dtype=np.float64).reshape(-1)
    d_fake = np.asarray(d_fake, dtype=np.float64).reshape(-1)
    for arr in (d_real, d_fake):
        if arr.size == 0 or np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
            raise ContractError("discriminator outputs must be probabilities")
    return float(
        np.mean(np.log(np.maximum(d_real, dc.LOG_FLOOR)))
        + np.mean(np.log(np.maximum(1.0 - d_fake, dc.LOG_FLOOR)))
    )


def wgan_batch_value(critic_real, critic_fake) -> float:
    critic_real = np.asarray(critic_real, dtype=np.float64).reshape(-1)
    critic_fake = np.asarray(critic_fake, dtype=np.float64).reshape(-1)
    if not (np.all(np.isfinite(critic_real)) and np.all(np.isfinite(critic_fake))):
        raise ContractError("critic scores must be finite")
    return float(np.mean(critic_real) - np.mean(critic_fake))


def generate(g: dc.MlpModel, prior: LatentPrior, n: int, rng: np.random.Generator):
    """Draw ``n`` latents from the prior and push them through ``g``."""
    if n < 1:
        raise ContractError("n must be >= 1")
    z = prior.sample(n, rng)
    return z, g(z)


def build_generator(config: GanConfig, data_dim: int, rng: np.random.Generator) -> dc.MlpModel:
    dims = [config.latent_dim, *config.generator_hidden, data_dim]
    return dc.MlpModel.create(dims, rng, config.generator_activation, "identity")


def build_discriminator(config: GanConfig, data_dim: int, rng: np.random.Generator) -> dc.MlpModel:
    out_act = "sigmoid" if config.mode == "gan" else "identity"
    dims = [data_dim, *config.discriminator_hidden, 1]
    return dc.MlpModel.create(dims, rng, config.discriminator_activation, out_act)


def _optimizer(config: GanConfig, lr: float) -> dc.OptimizerState:
    return dc.OptimizerState(config.optimizer, lr=lr, beta1=config.beta1, beta2=config.beta2)


def _draw_rows(pool: np.ndarray, batch: int, rng: np.random.Generator) -> np.ndarray:
    n = pool.shape[0]
    idx = rng.choice(n, size=batch, replace=batch > n)
    return pool[idx]


def _member_loss(member: dc.MlpModel, real: np.ndarray, fake: np.ndarray, mode: str):
    """Record one sub-discriminator's loss on a fresh tape.

    Real and fake rows share one forward pass; per-row signs and weights turn
    the summed log-sigmoid into the two separate means of the GAN objective.
    """
    tape = dc.Tape()
    n_real, n_fake = real.shape[0], fake.shape[0]
    x = tape.constant(np.vstack([real, fake]))
    h = dc.forward(member, x, trainable=True, pre_activation=(mode == "gan"))
    if mode == "gan":
        signs = np.concatenate([np.ones(n_real), -np.ones(n_fake)]).reshape(-1, 1)
        weights = np.concatenate([np.full(n_real, 1.0 / n_real), np.full(n_fake, 1.0 / n_fake)])
        ll = dc.log(dc.sigmoid(dc.mul(h, tape.constant(signs))))
        loss = dc.scale(dc.reduce_sum(dc.mul(ll, tape.constant(weights.reshape(-1, 1)))), -1.0)
    else:
        weights = np.concatenate([np.full(n_real, 1.0 / n_real), np.full(n_fake, -1.0 / n_fake)])
        loss = dc.scale(dc.reduce_sum(dc.mul(h, tape.constant(weights.reshape(-1, 1)))), -1.0)
    return tape, loss


def _generator_loss(generator, members, z: np.ndarray, config: GanConfig, rule: CombineRule):
    tape = dc.Tape()
    fake = dc.forward(generator, tape.constant(z), trainable=True)
    if config.mode == "wgan":
        w = rule.weights_for(len(members))
        scores = [dc.reduce_mean(dc.forward(m, fake, trainable=False)) for m in members]
        total = dc.scale(scores[0], w[0])
        for wt, s in zip(w[1:], scores[1:]):
            total = dc.add(total, dc.scale(s, wt))
        return tape, dc.scale(total, -1.0)
    logits = [dc.forward(m, fake, trainable=False, pre_activation=True) for m in members]
    p = combined_probability_node(logits, rule)
    if config.saturating:
        loss = dc.reduce_mean(dc.log(dc.shift(dc.scale(p, -1.0), 1.0)))
    else:
        loss = dc.scale(dc.reduce_mean(dc.log(p)), -1.0)
    return tape, loss


def bootstrap_indices(n: int, count: int, seed_seq: np.random.SeedSequence) -> list[np.ndarray]:
    """One with-replacement resample of ``range(n)`` per ensemble member."""
    return [np.random.default_rng(child).integers(0, n, size=n) for child in seed_seq.spawn(count)]


def train_gan(
    data,
    config: GanConfig,
    T: int = 5,
    bootstrap: bool = True,
    rng: np.random.Generator | None = None,
) -> TrainedGan:
    """Train a generator against ``T`` sub-discriminators.

    The generator is updated against the combined discriminator. With
    ``bootstrap`` each sub-discriminator sees only its own resample of the
    real rows; fake batches are drawn fresh every step and shared.

    Args:
        data: real samples, one per row.
        config: training settings; ``config.seed`` fixes every random stream
            unless ``rng`` is given, in which case a base seed is drawn from it.
        T: number of sub-discriminators.
        bootstrap: resample real rows per sub-discriminator.
    """
    data = dc.as_matrix(data)
    if data.shape[0] == 0:
        raise DataError("cannot train a GAN on empty data")
    if T < 1:
        raise ContractError("T must be >= 1")
    base = int(rng.integers(2**63)) if rng is not None else config.seed
    root = np.random.SeedSequence(base)
    gen_seq, fake_seq, boot_seq, member_root = root.spawn(4)
    if config.identical_members:
        pairs = [tuple(member_root.spawn(1)[0].spawn(2))] * T
    else:
        pairs = [tuple(s.spawn(2)) for s in member_root.spawn(T)]

    n, data_dim = data.shape
    generator = build_generator(config, data_dim, np.random.default_rng(gen_seq))
    members, member_rngs = [], []
    for init_seq, batch_seq in pairs:
        members.append(build_discriminator(config, data_dim, np.random.default_rng(init_seq)))
        member_rngs.append(np.random.default_rng(batch_seq))

    if bootstrap:
        if config.identical_members:
            boots = bootstrap_indices(n, 1, boot_seq) * T
        else:
            boots = bootstrap_indices(n, T, boot_seq)
        pools = [data[idx] for idx in boots]
    else:
        boots = None
        pools = [data] * T

    fake_rng = np.random.default_rng(fake_seq)
    prior = LatentPrior(config.latent_dim)
    rule = CombineRule(config.combine_kind)
    g_opt = _optimizer(config, config.lr_g)
    d_opts = [_optimizer(config, config.lr_d) for _ in members]
    history: list[tuple[int, float, float]] = []
    batch = config.batch_size

    for step in range(config.steps):
        d_losses = []
        for _ in range(config.critic_steps):
            fake = generator(prior.sample(batch, fake_rng))
            d_losses = []
            for member, pool, mrng, opt in zip(members, pools, member_rngs, d_opts):
                real = _draw_rows(pool, batch, mrng)
                tape, loss = _member_loss(member, real, fake, config.mode)
                grads = dc.backward(tape, loss)
                dc.optimizer_step(member.parameters(), dc.param_grads(tape, member, grads), opt)
                if config.mode == "wgan":
                    dc.clamp_weights(member, config.clip)
                d_losses.append(float(loss.value[0, 0]))
        z = prior.sample(batch, fake_rng)
        tape, g_loss = _generator_loss(generator, members, z, config, rule)
        grads = dc.backward(tape, g_loss)
        dc.optimizer_step(generator.parameters(), dc.param_grads(tape, generator, grads), g_opt)
        d_loss = float(np.mean(d_losses))
        g_val = float(g_loss.value[0, 0])
        if not (math.isfinite(d_loss) and math.isfinite(g_val)):
            raise TrainingDiverged("GAN loss became non-finite", step)
        history.append((step, d_loss, g_val))

    log.debug("trained GAN T=%d bootstrap=%s final d=%.4f g=%.4f", T, bootstrap, *history[-1][1:])
    return TrainedGan(generator, members, config, history, boots)


def refine_discriminators(
    gan: TrainedGan, data, steps: int, rng: np.random.Generator | None = None
) -> None:
    """Keep training the sub-discriminators against the frozen generator.

    Each member continues on its own bootstrap pool, which sharpens the
    density ratio it encodes before calibration.
    """
    if steps <= 0:
        return
    data = dc.as_matrix(data)
    config = gan.config
    rng = rng or np.random.default_rng(config.seed + 1)
    prior = gan.prior
    pools = [data[idx] for idx in gan.bootstrap_indices] if gan.bootstrap_indices else [data] * len(gan.sub_discriminators)
    opts = [_optimizer(config, config.lr_d) for _ in gan.sub_discriminators]
    for _ in range(steps):
        fake = gan.generator(prior.sample(config.batch_size, rng))
        for member, pool, opt in zip(gan.sub_discriminators, pools, opts):
            real = _draw_rows(pool, config.batch_size, rng)
            tape, loss = _member_loss(member, real, fake, config.mode)
            grads = dc.backward(tape, loss)
            dc.optimizer_step(member.parameters(), dc.param_grads(tape, member, grads), opt)
            if config.mode == "wgan":
                dc.clamp_weights(member, config.clip)
