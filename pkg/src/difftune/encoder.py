"""Small vision transformer producing a class token plus patch tokens.

Images are (H, W, 3) tensors with values in [-1, 1]. encode() handles one
image; encode_batch() runs the same computation over an (B, H, W, 3) stack
and is what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
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
from .tensor import (
    Tensor,
    concat,
    div,
    layer_norm,
    mul,
    narrow,
    register_op,
    reshape,
    sqrt,
    sum_all,
    tile_rows,
)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class TokenSequence:
    """Encoder output: one class token plus a row-major grid of patch tokens."""

    class_token: Tensor  # (embed_dim,)
    patch_tokens: Tensor  # (num_patches, embed_dim)
    embed_dim: int


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Non-overlapping patches flattened row-major: (num_patches, P*P*3)."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"patchify expects (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    stacked = patchify_batch(reshape(image, (1, h, w, 3)), patch_size)
    return reshape(stacked, stacked.shape[1:])


def unpatchify(patches: Tensor, patch_size: int, height: int, width: int) -> Tensor:
    """Inverse of patchify; bit-exact round trip."""
    gh, gw = height // patch_size, width // patch_size
    n = gh * gw
    pd = patch_size * patch_size * 3
    if patches.shape != (n, pd):
        raise ShapeError(
            f"unpatchify expects ({n}, {pd}) for {height}x{width}/{patch_size}, "
            f"got {patches.shape}"
        )
    stacked = unpatchify_batch(reshape(patches, (1, n, pd)), patch_size, height, width)
    return reshape(stacked, (height, width, 3))


def patchify_batch(images: Tensor, patch_size: int) -> Tensor:
    """(B, H, W, 3) -> (B, num_patches, P*P*3), patches in row-major order."""
    if images.ndim != 4 or images.shape[3] != 3:
        raise ShapeError(f"patchify_batch expects (B, H, W, 3), got {images.shape}")
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(
            f"image size {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    n, pd = gh * gw, patch_size * patch_size * c
    out = Tensor(
        np.ascontiguousarray(
            images.data.reshape(b, gh, patch_size, gw, patch_size, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, n, pd)
        )
    )

    def vjp(g):
        back = (
            g.reshape(b, gh, gw, patch_size, patch_size, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, h, w, c)
        )
        return (np.ascontiguousarray(back),)

    return register_op(out, (images,), vjp)


def unpatchify_batch(patches: Tensor, patch_size: int, height: int, width: int) -> Tensor:
    """(B, num_patches, P*P*3) -> (B, H, W, 3); inverse of patchify_batch."""
    gh, gw = height // patch_size, width // patch_size
    n, pd = gh * gw, patch_size * patch_size * 3
    if patches.ndim != 3 or patches.shape[1:] != (n, pd):
        raise ShapeError(
            f"unpatchify_batch expects (B, {n}, {pd}), got {patches.shape}"
        )
    b = patches.shape[0]
    out = Tensor(
        np.ascontiguousarray(
            patches.data.reshape(b, gh, gw, patch_size, patch_size, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, height, width, 3)
        )
    )

    def vjp(g):
        back = (
            g.reshape(b, gh, patch_size, gw, patch_size, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, n, pd)
        )
        return (np.ascontiguousarray(back),)

    return register_op(out, (patches,), vjp)


def init_encoder_params(config: EncoderConfig, rng: RngStream) -> dict:
    """Fresh trainable parameter set for the encoder."""
    d = config.embed_dim
    params: dict[str, Tensor] = {}
    init_linear(params, "patch_embed.", config.patch_dim, d, rng)
    params["class_token"] = Tensor(rng.normal((1, d)) * 0.02, grad_enabled=True)
    params["pos_embed"] = Tensor(
        rng.normal((config.num_patches, d)) * 0.02, grad_enabled=True
    )
    for i in range(config.depth):
        p = f"blocks.{i}."
        init_layer_norm(params, p + "ln1.", d)
        init_attention(params, p + "attn.", d, rng)
        init_layer_norm(params, p + "ln2.", d)
        init_mlp(params, p + "mlp.", d, 4 * d, rng)
    init_layer_norm(params, "ln_f.", d)
    return params


def encode_batch(images: Tensor, params: dict, config: EncoderConfig) -> Tensor:
    """Token stack (B, 1 + num_patches, embed_dim); row 0 is the class token."""
    s = config.image_size
    if images.ndim != 4 or images.shape[1:] != (s, s, 3):
        raise ShapeError(f"encode_batch expects (B, {s}, {s}, 3), got {images.shape}")
    b = images.shape[0]
    tok = linear(patchify_batch(images, config.patch_size), params, "patch_embed.")
    tok = tok + params["pos_embed"]
    x = concat([tile_rows(params["class_token"], b), tok], axis=1)
    for i in range(config.depth):
        p = f"blocks.{i}."
        h = layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], LN_EPS)
        x = x + attention(h, h, params, p + "attn.", config.heads)
        h = layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], LN_EPS)
        x = x + mlp(h, params, p + "mlp.")
    return layer_norm(x, params["ln_f.gain"], params["ln_f.bias"], LN_EPS)


def encode(image: Tensor, params: dict, config: EncoderConfig) -> TokenSequence:
    """Deterministic forward pass image -> TokenSequence."""
    s = config.image_size
    if image.shape != (s, s, 3):
        raise ShapeError(f"encode expects ({s}, {s}, 3), got {image.shape}")
    stack = encode_batch(reshape(image, (1, s, s, 3)), params, config)
    tokens = reshape(stack, stack.shape[1:])
    cls = reshape(narrow(tokens, 0, 0, 1), (config.embed_dim,))
    patches = narrow(tokens, 0, 1, config.num_patches)
    return TokenSequence(class_token=cls, patch_tokens=patches, embed_dim=config.embed_dim)


def embed_global(ts: TokenSequence) -> Tensor:
    """L2-normalized class token."""
    norm_sq = sum_all(mul(ts.class_token, ts.class_token))
    if norm_sq.item() == 0.0:
        raise ShapeError("embed_global: class token is the zero vector")
    return div(ts.class_token, sqrt(norm_sq))


def global_embedding_array(image: Tensor, params: dict, config: EncoderConfig) -> np.ndarray:
    """Normalized class-token embedding as a plain array (probe helper)."""
    return embed_global(encode(image, params, config)).data
