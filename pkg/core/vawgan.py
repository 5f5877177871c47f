"""
VAW-GAN networks - convolutional encoder, emotion/F0-conditioned generator
and Wasserstein critic - with their losses and the single training update
"""
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from core.errors import (
    BatchTooSmallError,
    ConditioningError,
    EmptyBatchError,
    InvalidParameterError,
    NonFiniteError,
    ShapeMismatchError,
)
from core.logger import get_logger
from core.neuro import (
    Activation,
    Crop,
    Flatten,
    Layer,
    LayerKind,
    LayerSpec,
    Lift,
    ParameterStore,
    Sequential,
    Squeeze,
    Tensor,
    Unflatten,
    ensure_finite,
    rmsprop_step,
)

logger = get_logger()

PROSODY_WIDTH = 138
SPECTRUM_WIDTH = 139


def _tuple_fields(cls, mapping: Mapping[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    return {k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items() if k in names}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants (config section 'model')"""

    feature_dim: int = 513
    latent_dim: int = 128
    num_emotions: int = 10
    use_f0_condition: bool = True
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 128, 256)
    encoder_kernel: int = 7
    encoder_stride: int = 3
    seed_channels: int = 64
    generator_channels: Tuple[int, ...] = (32, 16, 8, 1)
    generator_kernels: Tuple[int, ...] = (9, 7, 7, 1025)
    generator_strides: Tuple[int, ...] = (3, 3, 3, 1)
    discriminator_channels: Tuple[int, ...] = (16, 32, 64)
    discriminator_kernels: Tuple[int, ...] = (7, 7, 115)
    discriminator_stride: int = 3
    lrelu_slope: float = 0.2

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ModelConfig":
        return cls(**_tuple_fields(cls, mapping))

    @property
    def condition_width(self) -> int:
        return self.latent_dim + self.num_emotions + int(self.use_f0_condition)

    @property
    def seed_length(self) -> int:
        return math.ceil(self.feature_dim / math.prod(self.generator_strides))

    def reduced(self, feature_dim: int = 32, divisor: int = 8) -> "ModelConfig":
        """Same topology with channels divided by `divisor` (at least 1)"""
        def shrink(chans):
            return tuple(max(1, c // divisor) for c in chans)

        return replace(
            self,
            feature_dim=feature_dim,
            encoder_channels=shrink(self.encoder_channels),
            seed_channels=max(1, self.seed_channels // divisor),
            generator_channels=shrink(self.generator_channels[:-1]) + (1,),
            discriminator_channels=shrink(self.discriminator_channels),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings (config section 'training')"""

    lr: float = 1e-5
    batch: int = 256
    epochs: int = 45
    steps: Optional[int] = None
    n_critic: int = 5
    clip_c: float = 0.01
    lambda_adv: float = 1.0
    lambda_kl: float = 1.0
    rmsprop_decay: float = 0.9
    log_interval: int = 50
    energy_gate_db: float = -60.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidParameterError("lr must be non-negative")
        for name in ("batch", "epochs", "n_critic"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise InvalidParameterError("steps must be >= 1")
        if self.clip_c <= 0 or self.lambda_adv < 0 or self.lambda_kl < 0:
            raise InvalidParameterError("clip_c must be positive and loss weights non-negative")
        if not 0 < self.rmsprop_decay < 1:
            raise InvalidParameterError("rmsprop_decay must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "TrainConfig":
        return cls(**_tuple_fields(cls, mapping))

    def total_steps(self, num_frames: int) -> int:
        """Explicit step count, else epochs over the frame pool"""
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, math.ceil(num_frames / self.batch))


def _conv_stack(prefix: str, channels, kernels, strides, in_channels: int,
                slope: float, store: ParameterStore, rng, kind=LayerKind.CONV1D,
                last_linear: bool = False):
    layers = []
    for i, (out_ch, kernel, stride) in enumerate(zip(channels, kernels, strides)):
        linear = last_linear and i == len(channels) - 1
        spec = LayerSpec(
            kind, in_channels, out_ch, kernel, stride,
            activation=Activation.LINEAR if linear else Activation.LRELU, slope=slope,
        )
        layers.append(Layer(f"{prefix}.{kind.value}{i + 1}", spec, store, rng))
        in_channels = out_ch
    return layers


def build_encoder(cfg: ModelConfig, rng: np.random.Generator) -> Sequential:
    """Five strided convs then a dense layer emitting [mu | logvar]"""
    store = ParameterStore()
    count = len(cfg.encoder_channels)
    convs = _conv_stack(
        "encoder", cfg.encoder_channels, [cfg.encoder_kernel] * count,
        [cfg.encoder_stride] * count, 1, cfg.lrelu_slope, store, rng,
    )
    length = cfg.feature_dim
    for layer in convs:
        length = layer.spec.output_length(length)
    flat = cfg.encoder_channels[-1] * length
    head = Layer(
        "encoder.dense",
        LayerSpec(LayerKind.DENSE, flat, 2 * cfg.latent_dim, activation=Activation.LINEAR),
        store, rng,
    )
    return Sequential([Lift(), *convs, Flatten(), head], store)


def build_generator(cfg: ModelConfig, rng: np.random.Generator) -> Sequential:
    """Dense merge of [z | condition] into a seed tensor, four deconvs, crop to feature_dim"""
    store = ParameterStore()
    merge = Layer(
        "generator.dense",
        LayerSpec(LayerKind.DENSE, cfg.condition_width, cfg.seed_channels * cfg.seed_length,
                  activation=Activation.LRELU, slope=cfg.lrelu_slope),
        store, rng,
    )
    deconvs = _conv_stack(
        "generator", cfg.generator_channels, cfg.generator_kernels, cfg.generator_strides,
        cfg.seed_channels, cfg.lrelu_slope, store, rng,
        kind=LayerKind.DECONV1D, last_linear=True,
    )
    return Sequential(
        [merge, Unflatten(cfg.seed_channels, cfg.seed_length), *deconvs, Squeeze(),
         Crop(cfg.feature_dim)],
        store,
    )


def build_discriminator(cfg: ModelConfig, rng: np.random.Generator) -> Sequential:
    """Three strided convs then a linear scalar critic head"""
    store = ParameterStore()
    count = len(cfg.discriminator_channels)
    convs = _conv_stack(
        "critic", cfg.discriminator_channels, cfg.discriminator_kernels,
        [cfg.discriminator_stride] * count, 1, cfg.lrelu_slope, store, rng,
    )
    length = cfg.feature_dim
    for layer in convs:
        length = layer.spec.output_length(length)
    head = Layer(
        "critic.dense",
        LayerSpec(LayerKind.DENSE, cfg.discriminator_channels[-1] * length, 1,
                  activation=Activation.LINEAR),
        store, rng,
    )
    return Sequential([Lift(), *convs, Flatten(), head], store)


@dataclass(frozen=True, eq=False)
class LatentCode:
    """z = mu + exp(0.5 * logvar) * eps for the recorded eps"""

    mu: Tensor
    logvar: Tensor
    z: Tensor
    eps: Tensor


def validate_one_hot(emotion: Tensor, num_emotions: int = 10) -> Tensor:
    """Rows must hold exactly one nonzero entry, equal to 1"""
    emotion = np.atleast_2d(np.asarray(emotion, dtype=np.float64))
    if emotion.shape[1] != num_emotions:
        raise ConditioningError(
            f"Emotion ID has width {emotion.shape[1]}, expected {num_emotions}"
        )
    nonzero = np.count_nonzero(emotion, axis=1)
    if np.any(nonzero != 1) or np.any(emotion.max(axis=1) != 1.0):
        raise ConditioningError("Emotion ID is not a one-hot vector")
    return emotion


def build_condition(emotion: Tensor, f0: Optional[Tensor] = None,
                    num_emotions: int = 10) -> Tensor:
    """Per-frame condition block: one-hot emotion, then the F0 scalar when given"""
    emotion = validate_one_hot(emotion, num_emotions)
    if f0 is None:
        return emotion
    f0 = np.asarray(f0, dtype=np.float64).reshape(-1, 1)
    if f0.shape[0] != emotion.shape[0]:
        raise ConditioningError(f"{f0.shape[0]} F0 scalars for {emotion.shape[0]} frames")
    return np.concatenate([emotion, f0], axis=1)


def clip_weights(store: ParameterStore, c: float):
    """Clamp every parameter of the store to [-c, c]"""
    for _, param in store.items():
        np.clip(param.value, -c, c, out=param.value)


class VawGan:
    """Encoder, generator and critic for one feature stream"""

    def __init__(self, cfg: ModelConfig, seed: int = 0, clip_c: Optional[float] = 0.01):
        if cfg.condition_width not in (PROSODY_WIDTH, SPECTRUM_WIDTH):
            raise ConditioningError(
                f"Condition width {cfg.condition_width} is neither {PROSODY_WIDTH} "
                f"(prosody) nor {SPECTRUM_WIDTH} (spectrum)"
            )
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = build_encoder(cfg, rng)
        self.generator = build_generator(cfg, rng)
        self.discriminator = build_discriminator(cfg, rng)
        if clip_c is not None:
            clip_weights(self.discriminator.store, clip_c)

    @property
    def condition_width(self) -> int:
        return self.cfg.condition_width

    def _check_frames(self, frames: Tensor) -> Tensor:
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        if frames.shape[1] != self.cfg.feature_dim:
            raise ShapeMismatchError(
                f"Frame dimension {frames.shape[1]} != feature dim {self.cfg.feature_dim}"
            )
        return frames

    def _generator_input(self, z: Tensor, emotion: Tensor, f0: Optional[Tensor]) -> Tensor:
        if self.cfg.use_f0_condition and f0 is None:
            raise ConditioningError("This network needs a per-frame F0 condition")
        if not self.cfg.use_f0_condition and f0 is not None:
            raise ConditioningError("This network takes no F0 condition")
        cond = build_condition(emotion, f0, self.cfg.num_emotions)
        z = np.atleast_2d(z)
        if cond.shape[0] == 1 and z.shape[0] > 1:
            cond = np.repeat(cond, z.shape[0], axis=0)
        if z.shape[1] + cond.shape[1] != self.condition_width:
            raise ConditioningError(
                f"Concatenated width {z.shape[1] + cond.shape[1]} != {self.condition_width}"
            )
        return np.concatenate([z, cond], axis=1)

    def encode(self, frames: Tensor, eps: Optional[Tensor] = None,
               rng: Optional[np.random.Generator] = None) -> LatentCode:
        """
        Encode frames to a latent code

        Args:
            frames: (N, feature_dim) frames
            eps: Reparameterisation noise; zeros give z = mu
            rng: Source of eps when eps is not given (zeros without either)
        """
        frames = self._check_frames(frames)
        stats = self.encoder.predict(frames)
        mu, logvar = np.split(stats, 2, axis=1)
        if eps is None:
            eps = rng.standard_normal(mu.shape) if rng is not None else np.zeros_like(mu)
        z = mu + np.exp(0.5 * logvar) * eps
        return LatentCode(mu, logvar, ensure_finite(z, "latent code"), eps)

    def decode(self, z: Tensor, emotion: Tensor, f0: Optional[Tensor] = None) -> Tensor:
        """Generate (N, feature_dim) frames from latent codes and conditions"""
        return self.generator.predict(self._generator_input(z, emotion, f0))

    def discriminate(self, frames: Tensor) -> Tensor:
        """One unbounded critic score per frame"""
        return self.discriminator.predict(self._check_frames(frames))[:, 0]

    def convert(self, frames: Tensor, emotion: Tensor, f0: Optional[Tensor] = None) -> Tensor:
        """Deterministic encode (z = mu) then decode under a new condition"""
        code = self.encode(frames)
        return self.decode(code.mu, emotion, f0)

    def to_arrays(self) -> Dict[str, Tensor]:
        arrays = {}
        for net in (self.encoder, self.generator, self.discriminator):
            arrays.update(net.store.to_arrays())
        return arrays

    def load_arrays(self, arrays: Mapping[str, Tensor]):
        for net in (self.encoder, self.generator, self.discriminator):
            net.store.load_arrays(dict(arrays))

    @property
    def stores(self) -> Tuple[ParameterStore, ParameterStore, ParameterStore]:
        return self.encoder.store, self.generator.store, self.discriminator.store


def kl_loss(mu: Tensor, logvar: Tensor) -> float:
    """
    0.5 * sum(mu^2 + exp(logvar) - 1 - logvar); batches average the per-frame sums
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeMismatchError("mu and logvar shapes differ")
    terms = 0.5 * (mu ** 2 + np.exp(logvar) - 1.0 - logvar)
    if mu.ndim == 1:
        return float(terms.sum())
    return float(terms.sum(axis=1).mean())


def recon_loss(x: Tensor, x_hat: Tensor) -> float:
    """Mean squared error"""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatchError("Reconstruction shape differs from target")
    if x.size == 0:
        raise EmptyBatchError("Reconstruction loss over an empty batch")
    return float(np.mean((x - x_hat) ** 2))


def wgan_losses(real_scores: Tensor, fake_scores: Tensor) -> Tuple[float, float]:
    """(d_loss, g_adv_loss) = (mean(fake) - mean(real), -mean(fake))"""
    real = np.asarray(real_scores, dtype=np.float64).reshape(-1)
    fake = np.asarray(fake_scores, dtype=np.float64).reshape(-1)
    if real.size == 0 or fake.size == 0:
        raise EmptyBatchError("Critic losses need non-empty score batches")
    return float(fake.mean() - real.mean()), float(-fake.mean())


@dataclass(frozen=True)
class TrainBatch:
    """Frames with their emotion one-hots and, for the spectrum net, F0 scalars"""

    features: Tensor
    emotions: Tensor
    f0: Optional[Tensor] = None

    @property
    def size(self) -> int:
        return int(np.asarray(self.features).shape[0])


@dataclass(frozen=True)
class LossReport:
    recon: float
    kl: float
    g_adv: float
    d_loss: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "recon": self.recon,
            "kl": self.kl,
            "g_adv": self.g_adv,
            "d_loss": self.d_loss,
            "total": self.total,
        }


def train_step(batch: TrainBatch, nets: VawGan, cfg: TrainConfig,
               rng: np.random.Generator) -> LossReport:
    """
    n_critic clipped critic updates, then one encoder + generator update

    The generator objective is recon + lambda_kl * KL + lambda_adv * g_adv.
    All updates use RMSProp.
    """
    if batch.size < 2:
        raise BatchTooSmallError(f"Batch of {batch.size} frames; need at least 2")
    frames = nets._check_frames(batch.features)
    count = frames.shape[0]
    latent = nets.cfg.latent_dim
    encoder, generator, critic = nets.encoder, nets.generator, nets.discriminator

    d_loss = 0.0
    for _ in range(cfg.n_critic):
        code = nets.encode(frames, rng=rng)
        fake = nets.decode(code.z, batch.emotions, batch.f0)
        scores, caches = critic.forward(np.concatenate([frames, fake], axis=0))
        d_loss, _ = wgan_losses(scores[:count, 0], scores[count:, 0])
        grad = np.concatenate([np.full(count, -1.0 / count), np.full(count, 1.0 / count)])
        critic.store.zero_grad()
        critic.backward(grad[:, None], caches)
        rmsprop_step(critic.store, cfg.lr, cfg.rmsprop_decay)
        clip_weights(critic.store, cfg.clip_c)

    stats, enc_caches = encoder.forward(frames)
    mu, logvar = np.split(stats, 2, axis=1)
    eps = rng.standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    x_hat, gen_caches = generator.forward(nets._generator_input(z, batch.emotions, batch.f0))
    fake_scores, critic_caches = critic.forward(x_hat)

    recon = recon_loss(frames, x_hat)
    kl = kl_loss(mu, logvar)
    _, g_adv = wgan_losses(np.zeros(1), fake_scores[:, 0])
    total = recon + cfg.lambda_kl * kl + cfg.lambda_adv * g_adv
    if not np.isfinite(total):
        raise NonFiniteError(f"Non-finite training loss (recon={recon}, kl={kl}, g_adv={g_adv})")

    grad_x_hat = 2.0 * (x_hat - frames) / frames.size
    critic.store.zero_grad()
    grad_x_hat += cfg.lambda_adv * critic.backward(np.full((count, 1), -1.0 / count), critic_caches)
    critic.store.zero_grad()

    encoder.store.zero_grad()
    generator.store.zero_grad()
    grad_input = generator.backward(grad_x_hat, gen_caches)
    grad_z = grad_input[:, :latent]
    grad_mu = grad_z + cfg.lambda_kl * mu / count
    grad_logvar = grad_z * eps * 0.5 * std + cfg.lambda_kl * 0.5 * (np.exp(logvar) - 1.0) / count
    encoder.backward(np.concatenate([grad_mu, grad_logvar], axis=1), enc_caches)
    rmsprop_step(ParameterStore.merged(encoder.store, generator.store), cfg.lr, cfg.rmsprop_decay)

    report = LossReport(recon, kl, g_adv, d_loss, float(total))
    logger.debug(
        f"step recon={recon:.5f} kl={kl:.5f} g_adv={g_adv:.5f} d_loss={d_loss:.5f}"
    )
    return report
