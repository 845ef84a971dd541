"""Conditional transformer noise predictor.

Tokens are image patches with an additive timestep embedding; blocks
interleave self-attention, cross-attention over the adapter-projected
condition (whose keys carry no positional encoding), and an MLP. The final
projection is zero-initialized so an untrained model predicts zero noise.

denoise() handles one (x_t, t, condition); denoise_batch() runs a stack of
states with per-state timesteps and per-state condition key masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condition import Condition
from .errors import ShapeError
from .encoder import patchify_batch, unpatchify_batch
from .layers import (
    LN_EPS,
    attention,
    init_attention,
    init_layer_norm,
    init_linear,
    init_mlp,
    linear,
    mlp,
)
from .rng import RngStream
from .tensor import Tensor, layer_norm, mean_all, mul, reshape, sub


@dataclass(frozen=True)
class DenoiserConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    time_embed_dim: int = 64
    cond_dim: int = 64  # encoder embed dim adapted into this model's width
    num_patches: int = 64  # grid size for the learned positional table

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.time_embed_dim % 2 != 0:
            raise ShapeError(f"time_embed_dim must be even, got {self.time_embed_dim}")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def time_embed(t: int, dim: int) -> Tensor:
    """Sinusoidal timestep embedding: interleaved sin/cos over geometric frequencies."""
    if dim % 2 != 0:
        raise ShapeError(f"time embedding dim must be even, got {dim}")
    t = int(t)
    if t < 0:
        raise ValueError(f"timestep must be nonnegative, got {t}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    emb = np.empty(dim)
    emb[0::2] = np.sin(ang)
    emb[1::2] = np.cos(ang)
    return Tensor(emb)


def init_denoiser_params(config: DenoiserConfig, rng: RngStream) -> dict:
    """Fresh trainable parameter set (includes the condition adapter)."""
    d = config.embed_dim
    params: dict[str, Tensor] = {}
    init_linear(params, "patch_embed.", config.patch_dim, d, rng)
    params["pos_embed"] = Tensor(
        rng.normal((config.num_patches, d)) * 0.02, grad_enabled=True
    )
    init_linear(params, "time_proj.", config.time_embed_dim, d, rng)
    init_linear(params, "cond_adapter.", config.cond_dim, d, rng)
    for i in range(config.depth):
        p = f"blocks.{i}."
        init_layer_norm(params, p + "ln1.", d)
        init_attention(params, p + "self_attn.", d, rng)
        init_layer_norm(params, p + "ln2.", d)
        init_attention(params, p + "cross_attn.", d, rng)
        init_layer_norm(params, p + "ln3.", d)
        init_mlp(params, p + "mlp.", d, 4 * d, rng)
    init_layer_norm(params, "ln_f.", d)
    params["head.w"] = Tensor(np.zeros((d, config.patch_dim)), grad_enabled=True)
    params["head.b"] = Tensor(np.zeros(config.patch_dim), grad_enabled=True)
    return params


def denoise_batch(
    x_stack: Tensor,
    timesteps,
    cond_tokens: Tensor,
    params: dict,
    config: DenoiserConfig,
    cond_mask: Tensor | None = None,
) -> Tensor:
    """Predicted noise for a stack of states: (S, H, W, 3) -> same shape.

    ``timesteps`` is one integer per state; ``cond_tokens`` is (S, L_c,
    cond_dim); ``cond_mask``, when given, is the (S*heads, 1, L_c) additive
    score mask produced by layers.head_mask.
    """
    if x_stack.ndim != 4 or x_stack.shape[3] != 3:
        raise ShapeError(f"denoise_batch expects (S, H, W, 3), got {x_stack.shape}")
    if cond_tokens.ndim != 3 or cond_tokens.shape[2] != config.cond_dim:
        raise ShapeError(
            f"condition stack {cond_tokens.shape} does not match adapter input "
            f"{config.cond_dim}"
        )
    s, h, w, _ = x_stack.shape
    if len(timesteps) != s or cond_tokens.shape[0] != s:
        raise ShapeError(
            f"state count mismatch: x {s}, timesteps {len(timesteps)}, "
            f"conditions {cond_tokens.shape[0]}"
        )
    x = linear(patchify_batch(x_stack, config.patch_size), params, "patch_embed.")
    x = x + params["pos_embed"]
    temb = Tensor(np.stack([time_embed(t, config.time_embed_dim).data for t in timesteps]))
    tvec = linear(temb, params, "time_proj.")
    x = x + reshape(tvec, (s, 1, config.embed_dim))
    c = linear(cond_tokens, params, "cond_adapter.")
    for i in range(config.depth):
        p = f"blocks.{i}."
        hs = layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], LN_EPS)
        x = x + attention(hs, hs, params, p + "self_attn.", config.heads)
        hc = layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], LN_EPS)
        x = x + attention(hc, c, params, p + "cross_attn.", config.heads, mask=cond_mask)
        hm = layer_norm(x, params[p + "ln3.gain"], params[p + "ln3.bias"], LN_EPS)
        x = x + mlp(hm, params, p + "mlp.")
    x = layer_norm(x, params["ln_f.gain"], params["ln_f.bias"], LN_EPS)
    return unpatchify_batch(linear(x, params, "head."), config.patch_size, h, w)


def denoise(x_t: Tensor, t: int, cond: Condition, params: dict, config: DenoiserConfig) -> Tensor:
    """Predicted noise for one x_t at step t given its condition."""
    if x_t.ndim != 3 or x_t.shape[2] != 3:
        raise ShapeError(f"denoise expects an (H, W, 3) tensor, got {x_t.shape}")
    if cond.embed_dim != config.cond_dim:
        raise ShapeError(
            f"condition dim {cond.embed_dim} does not match adapter input "
            f"{config.cond_dim}"
        )
    h, w, _ = x_t.shape
    stack = denoise_batch(
        reshape(x_t, (1, h, w, 3)),
        [t],
        reshape(cond.tokens, (1,) + cond.tokens.shape),
        params,
        config,
    )
    return reshape(stack, (h, w, 3))


def diffusion_loss(eps_hat: Tensor, eps: Tensor) -> Tensor:
    """Mean squared error over all elements (scalar tensor)."""
    if eps_hat.shape != eps.shape:
        raise ShapeError(
            f"diffusion_loss: shapes {eps_hat.shape} and {eps.shape} differ"
        )
    d = sub(eps_hat, eps)
    return mean_all(mul(d, d))
