"""Momentum-SGD training loops for both phases.

Phase A trains the denoiser (plus its condition adapter) against a frozen
encoder snapshot; Phase B tunes the encoder against the frozen denoiser.
Every random draw comes from a stream keyed by (seed, step, sample id), so
the loss and gradients are invariant to batch-internal sample order and a
run is bit-reproducible from its config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .condition import RecapStrategy, build_condition, build_condition_batch
from .denoiser import (
    DenoiserConfig,
    denoise,
    denoise_batch,
    diffusion_loss,
    init_denoiser_params,
)
from .encoder import EncoderConfig, encode, encode_batch, init_encoder_params
from .errors import ConfigError, ShapeError
from .layers import freeze, head_mask, thaw
from .rng import RngStream
from .schedule import NoiseSchedule, forward_diffuse
from .tensor import Tape, Tensor, backward, repeat_interleave0, sample_gaussian

PHASE_A = "A"  # denoiser pretraining, encoder frozen
PHASE_B = "B"  # encoder tuning, denoiser frozen


@dataclass
class TrainConfig:
    phase: str
    steps: int
    batch_size: int = 32
    states_per_image: int = 2
    learning_rate: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    strategy: RecapStrategy = field(default_factory=lambda: RecapStrategy.random_subset(0.15))

    def __post_init__(self):
        if self.phase not in (PHASE_A, PHASE_B):
            raise ConfigError(f"phase must be 'A' or 'B', got {self.phase!r}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.states_per_image < 1:
            raise ConfigError(f"states_per_image must be >= 1, got {self.states_per_image}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict

    @staticmethod
    def init(config: EncoderConfig, rng: RngStream) -> "EncoderModel":
        return EncoderModel(config, init_encoder_params(config, rng.split("encoder-init")))


@dataclass
class DenoiserModel:
    config: DenoiserConfig
    params: dict

    @staticmethod
    def init(config: DenoiserConfig, rng: RngStream) -> "DenoiserModel":
        return DenoiserModel(config, init_denoiser_params(config, rng.split("denoiser-init")))


class OptimizerState:
    """Per-parameter velocity buffers, created lazily for updated params."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}


def sgd_update(
    params: dict,
    grads: dict,
    state: OptimizerState,
    learning_rate: float,
    momentum: float,
) -> dict:
    """v <- momentum*v + g; p <- p - lr*v. Params without grads pass through."""
    updated = {}
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = tensor
            continue
        if g.shape != tensor.shape:
            raise ShapeError(
                f"sgd_update: grad shape {g.shape} does not match param "
                f"{name!r} shape {tensor.shape}"
            )
        v = state.velocity.get(name)
        v = g if v is None else momentum * v + g
        state.velocity[name] = v
        updated[name] = Tensor(tensor.data - learning_rate * v, grad_enabled=tensor.grad_enabled)
    return updated


@dataclass
class StepResult:
    loss: float
    grads: dict  # param name -> ndarray, trainable side only
    timestep_draws: int
    noise_draws: int


def train_step(
    batch,
    encoder: EncoderModel,
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    strategy: RecapStrategy,
    step_rng: RngStream,
    states_per_image: int,
    phase: str,
) -> StepResult:
    """One optimization step's loss and gradients over a batch.

    ``batch`` is a sequence of (sample_id, image Tensor) pairs. Per-sample
    streams are keyed by sample_id and accumulation runs in sample_id order,
    so the result does not depend on batch-internal ordering.
    """
    trainable = denoiser.params if phase == PHASE_A else encoder.params
    by_name = {id(t): name for name, t in trainable.items()}
    n_pairs = len(batch) * states_per_image
    grad_acc: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    t_draws = 0
    e_draws = 0

    for sample_id, image in sorted(batch, key=lambda kv: kv[0]):
        srng = step_rng.split("sample", sample_id)
        with Tape() as tape:
            ts = encode(image, encoder.params, encoder.config)
            cond = build_condition(ts, strategy, srng.split("recap"))
            img_loss = None
            for s in range(states_per_image):
                t = srng.split("timestep", s).integers(1, sched.T)
                t_draws += 1
                eps = sample_gaussian(image.shape, srng.split("noise", s))
                e_draws += 1
                x_t = forward_diffuse(image, t, eps, sched)
                pair = diffusion_loss(denoise(x_t, t, cond, denoiser.params, denoiser.config), eps)
                img_loss = pair if img_loss is None else img_loss + pair
            scaled = img_loss * (1.0 / n_pairs)
        loss_sum += img_loss.item()
        for tensor, g in backward(scaled, tape).items():
            name = by_name.get(id(tensor))
            if name is None:
                continue
            if name in grad_acc:
                grad_acc[name] = grad_acc[name] + g
            else:
                grad_acc[name] = g

    loss = loss_sum / n_pairs
    if not np.isfinite(loss):
        raise ShapeError(f"training loss is not finite: {loss}")
    return StepResult(loss=loss, grads=grad_acc, timestep_draws=t_draws, noise_draws=e_draws)


def train_step_batched(
    batch,
    encoder: EncoderModel,
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    strategy: RecapStrategy,
    step_rng: RngStream,
    states_per_image: int,
    phase: str,
) -> StepResult:
    """Same contract and RNG consumption as train_step, one fused graph.

    All per-image computations stack into (B, ...) / (B*N, ...) tensors and
    one backward pass produces the step's gradients; train_step is the
    straight-line reference this is tested against.
    """
    trainable = denoiser.params if phase == PHASE_A else encoder.params
    by_name = {id(t): name for name, t in trainable.items()}
    ordered = sorted(batch, key=lambda kv: kv[0])
    n = states_per_image
    srngs = [step_rng.split("sample", sid) for sid, _ in ordered]

    timesteps = []
    x_rows = []
    eps_rows = []
    for (_, image), srng in zip(ordered, srngs):
        for s in range(n):
            t = srng.split("timestep", s).integers(1, sched.T)
            eps = srng.split("noise", s).normal(image.shape)
            abar = sched.alpha_bar[t]
            x_rows.append(float(np.sqrt(abar)) * image.data + float(np.sqrt(1.0 - abar)) * eps)
            eps_rows.append(eps)
            timesteps.append(t)
    x_stack = Tensor(np.stack(x_rows))
    eps_stack = Tensor(np.stack(eps_rows))

    with Tape() as tape:
        tokens = encode_batch(
            Tensor(np.stack([img.data for _, img in ordered])),
            encoder.params,
            encoder.config,
        )
        kv, active = build_condition_batch(tokens, strategy, [r.split("recap") for r in srngs])
        kv_rep = repeat_interleave0(kv, n) if n > 1 else kv
        mask = None
        if active is not None:
            mask = head_mask(np.repeat(active, n, axis=0), denoiser.config.heads)
        eps_hat = denoise_batch(
            x_stack, timesteps, kv_rep, denoiser.params, denoiser.config, cond_mask=mask
        )
        loss = diffusion_loss(eps_hat, eps_stack)
    grads = {
        by_name[id(t)]: g for t, g in backward(loss, tape).items() if id(t) in by_name
    }
    value = loss.item()
    if not np.isfinite(value):
        raise ShapeError(f"training loss is not finite: {value}")
    return StepResult(
        loss=value, grads=grads, timestep_draws=len(timesteps), noise_draws=len(eps_rows)
    )


@dataclass
class MetricsRow:
    step: int
    phase: str
    loss: float
    learning_rate: float


@dataclass
class RunResult:
    encoder: EncoderModel
    denoiser: DenoiserModel
    metrics: list


def run_training(
    images,
    encoder: EncoderModel,
    denoiser: DenoiserModel,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    on_step=None,
) -> RunResult:
    """Run one phase to completion; fully deterministic given cfg.seed.

    ``images`` is a list of image Tensors; their list indices are the sample
    ids. Returns the final models (the frozen side bit-unchanged) and the
    per-step metrics series.
    """
    if not images:
        raise ConfigError("run_training needs a nonempty image list")
    if cfg.phase == PHASE_A:
        enc = EncoderModel(encoder.config, freeze(encoder.params))
        den = DenoiserModel(denoiser.config, thaw(denoiser.params))
    else:
        enc = EncoderModel(encoder.config, thaw(encoder.params))
        den = DenoiserModel(denoiser.config, freeze(denoiser.params))

    rng = RngStream(cfg.seed)
    state = OptimizerState()
    metrics: list[MetricsRow] = []
    order: list[int] = []
    epoch = 0

    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            perm = rng.split("shuffle", epoch).permutation(len(images))
            order.extend(int(i) for i in perm)
            epoch += 1
        take, order = order[: cfg.batch_size], order[cfg.batch_size :]
        batch = [(i, images[i]) for i in take]
        result = train_step_batched(
            batch, enc, den, sched, cfg.strategy,
            rng.split("step", step), cfg.states_per_image, cfg.phase,
        )
        if cfg.phase == PHASE_A:
            den = DenoiserModel(
                den.config,
                sgd_update(den.params, result.grads, state, cfg.learning_rate, cfg.momentum),
            )
        else:
            enc = EncoderModel(
                enc.config,
                sgd_update(enc.params, result.grads, state, cfg.learning_rate, cfg.momentum),
            )
        row = MetricsRow(step=step, phase=cfg.phase, loss=result.loss, learning_rate=cfg.learning_rate)
        metrics.append(row)
        if on_step is not None:
            on_step(row)

    return RunResult(encoder=enc, denoiser=den, metrics=metrics)


def pretrain_denoiser(images, encoder, denoiser, sched, cfg: TrainConfig) -> RunResult:
    """Phase A: train the denoiser against a frozen encoder snapshot."""
    if cfg.phase != PHASE_A:
        raise ConfigError(f"pretrain_denoiser needs phase 'A', got {cfg.phase!r}")
    return run_training(images, encoder, denoiser, sched, cfg)


def tune_encoder(images, encoder, denoiser, sched, cfg: TrainConfig) -> RunResult:
    """Phase B: tune the encoder against the frozen denoiser."""
    if cfg.phase != PHASE_B:
        raise ConfigError(f"tune_encoder needs phase 'B', got {cfg.phase!r}")
    return run_training(images, encoder, denoiser, sched, cfg)
