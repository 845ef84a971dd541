"""Transformer building blocks shared by the image encoder and the denoiser.

Parameters live in flat name->Tensor dicts; each helper takes the dict plus
a name prefix so blocks compose without wrapper objects. Everything runs on
(B, L, D) stacks; per-image callers pass B = 1.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream
from .tensor import (
    Tensor,
    bmm,
    bmm_nt,
    matmul,
    merge_heads,
    reshape,
    softmax,
    split_heads,
    gelu,
)

LN_EPS = 1e-5
MASK_OFF = -1e30  # additive attention-score mask; exp underflows to exact 0


def linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Affine map over the last axis; accepts any leading shape."""
    w = params[prefix + "w"]
    b = params[prefix + "b"]
    if x.ndim == 2:
        return matmul(x, w) + b
    lead = x.shape[:-1]
    rows = int(np.prod(lead))
    flat = reshape(x, (rows, x.shape[-1]))
    return reshape(matmul(flat, w), lead + (w.shape[1],)) + b


def attention(
    q_src: Tensor,
    kv_src: Tensor,
    params: dict,
    prefix: str,
    heads: int,
    mask: Tensor | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention over (B, L, D) stacks.

    Queries come from q_src, keys/values from kv_src; self-attention passes
    the same tensor for both. ``mask``, when given, is an additive constant
    of shape (B*heads, 1, L_kv) whose MASK_OFF entries zero out keys exactly.
    """
    head_dim = q_src.shape[-1] // heads
    scale = 1.0 / np.sqrt(head_dim)
    q = split_heads(linear(q_src, params, prefix + "q.") * scale, heads)
    k = split_heads(linear(kv_src, params, prefix + "k."), heads)
    v = split_heads(linear(kv_src, params, prefix + "v."), heads)
    scores = bmm_nt(q, k)
    if mask is not None:
        scores = scores + mask
    att = softmax(scores, axis=-1)
    return linear(merge_heads(bmm(att, v), heads), params, prefix + "o.")


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    return linear(gelu(linear(x, params, prefix + "1.")), params, prefix + "2.")


def head_mask(active: np.ndarray, heads: int) -> Tensor:
    """Expand a per-image key-activity mask (B, L_kv) for every head.

    Inactive keys get MASK_OFF; the result is a constant (B*heads, 1, L_kv)
    tensor for the attention ``mask`` argument.
    """
    b, lk = active.shape
    add = np.where(active, 0.0, MASK_OFF)
    return Tensor(np.repeat(add[:, None, :], heads, axis=0))


def init_linear(params: dict, prefix: str, fan_in: int, fan_out: int, rng: RngStream):
    """Fan-in scaled normal weights, zero bias."""
    std = 1.0 / np.sqrt(fan_in)
    params[prefix + "w"] = Tensor(rng.normal((fan_in, fan_out)) * std, grad_enabled=True)
    params[prefix + "b"] = Tensor(np.zeros(fan_out), grad_enabled=True)


def init_layer_norm(params: dict, prefix: str, dim: int):
    params[prefix + "gain"] = Tensor(np.ones(dim), grad_enabled=True)
    params[prefix + "bias"] = Tensor(np.zeros(dim), grad_enabled=True)


def init_attention(params: dict, prefix: str, dim: int, rng: RngStream):
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}{name}.", dim, dim, rng)


def init_mlp(params: dict, prefix: str, dim: int, hidden: int, rng: RngStream):
    init_linear(params, prefix + "1.", dim, hidden, rng)
    init_linear(params, prefix + "2.", hidden, dim, rng)


def freeze(params: dict) -> dict:
    """The same values with tape participation turned off."""
    return {name: t.with_grad(False) for name, t in params.items()}


def thaw(params: dict) -> dict:
    """The same values marked trainable."""
    return {name: t.with_grad(True) for name, t in params.items()}
