"""Assembles the denoiser condition from encoder tokens.

A condition is [BOS sentinel, class token, recapped patch tokens..., EOS
sentinel]. The recap strategy controls how many patch tokens come along:
none, an independent random subset, 1-D window averages, or all of them.
The sentinels are frozen vectors drawn once from a fixed seed, standing in
for an empty caption's embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .encoder import TokenSequence
from .errors import ConfigError
from .rng import RngStream
from .tensor import Tensor, bmm, concat, matmul, narrow, reshape, tile_rows

CLASS_ONLY = "class_only"
RANDOM_SUBSET = "random_subset"
POOLED_WINDOW = "pooled_window"
ALL_TOKENS = "all"

_SENTINEL_SEED = 0x5E17A135
_sentinel_cache: dict[int, tuple[Tensor, Tensor]] = {}


@dataclass(frozen=True)
class RecapStrategy:
    """Density rule for patch tokens included in the condition."""

    kind: str
    p: float = 0.0
    window: int = 0

    def __post_init__(self):
        if self.kind == RANDOM_SUBSET and not 0.0 < self.p <= 1.0:
            raise ConfigError(f"random_subset needs 0 < p <= 1, got {self.p}")
        if self.kind == POOLED_WINDOW and self.window < 1:
            raise ConfigError(f"pooled_window needs window >= 1, got {self.window}")
        if self.kind not in (CLASS_ONLY, RANDOM_SUBSET, POOLED_WINDOW, ALL_TOKENS):
            raise ConfigError(f"unknown recap strategy {self.kind!r}")

    @staticmethod
    def class_only() -> "RecapStrategy":
        return RecapStrategy(CLASS_ONLY)

    @staticmethod
    def random_subset(p: float) -> "RecapStrategy":
        return RecapStrategy(RANDOM_SUBSET, p=p)

    @staticmethod
    def pooled_window(window: int) -> "RecapStrategy":
        return RecapStrategy(POOLED_WINDOW, window=window)

    @staticmethod
    def all_tokens() -> "RecapStrategy":
        return RecapStrategy(ALL_TOKENS)

    @staticmethod
    def parse(token: str) -> "RecapStrategy":
        """Compact form used on the CLI: class | all | 0.15 | pool6."""
        token = token.strip().lower()
        if token in ("class", CLASS_ONLY):
            return RecapStrategy.class_only()
        if token == ALL_TOKENS:
            return RecapStrategy.all_tokens()
        if token.startswith("pool"):
            try:
                return RecapStrategy.pooled_window(int(token[4:]))
            except ValueError:
                raise ConfigError(f"bad pooled-window token {token!r}") from None
        try:
            return RecapStrategy.random_subset(float(token))
        except ValueError:
            raise ConfigError(f"unrecognized recap strategy token {token!r}") from None

    def label(self) -> str:
        if self.kind == RANDOM_SUBSET:
            return f"{RANDOM_SUBSET}({self.p:g})"
        if self.kind == POOLED_WINDOW:
            return f"{POOLED_WINDOW}({self.window})"
        return self.kind


@dataclass
class Condition:
    """Embedding sequence fed to the denoiser's cross-attention."""

    tokens: Tensor  # (length, embed_dim)
    embed_dim: int

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def sentinel_tokens(embed_dim: int) -> tuple[Tensor, Tensor]:
    """Frozen BOS/EOS vectors, identical across every condition in a run."""
    cached = _sentinel_cache.get(embed_dim)
    if cached is None:
        rng = RngStream(_SENTINEL_SEED).split("sentinels", embed_dim)
        bos = Tensor(rng.normal((1, embed_dim)))
        eos = Tensor(rng.normal((1, embed_dim)))
        cached = (bos, eos)
        _sentinel_cache[embed_dim] = cached
    return cached


def _selection_matrix(indices, num_patches: int) -> Tensor:
    sel = np.zeros((len(indices), num_patches))
    for row, idx in enumerate(indices):
        sel[row, idx] = 1.0
    return Tensor(sel)


def _pooling_matrix(num_patches: int, window: int) -> Tensor:
    rows = ceil(num_patches / window)
    pool = np.zeros((rows, num_patches))
    for r in range(rows):
        lo = r * window
        hi = min(lo + window, num_patches)
        pool[r, lo:hi] = 1.0 / (hi - lo)  # final partial window averages its own length
    return Tensor(pool)


def build_condition(ts: TokenSequence, strategy: RecapStrategy, rng: RngStream) -> Condition:
    """Assemble [BOS, class, recapped patches..., EOS] per the strategy."""
    num_patches = ts.patch_tokens.shape[0]
    bos, eos = sentinel_tokens(ts.embed_dim)
    cls = reshape(ts.class_token, (1, ts.embed_dim))

    if strategy.kind == CLASS_ONLY:
        picked = None
    elif strategy.kind == ALL_TOKENS:
        picked = ts.patch_tokens
    elif strategy.kind == RANDOM_SUBSET:
        mask = rng.uniform(num_patches) < strategy.p
        indices = np.flatnonzero(mask)
        picked = (
            matmul(_selection_matrix(indices, num_patches), ts.patch_tokens)
            if indices.size
            else None
        )
    else:  # POOLED_WINDOW
        picked = matmul(_pooling_matrix(num_patches, strategy.window), ts.patch_tokens)

    parts = [bos, cls] + ([picked] if picked is not None else []) + [eos]
    return Condition(tokens=concat(parts, axis=0), embed_dim=ts.embed_dim)


def build_condition_batch(token_stack: Tensor, strategy: RecapStrategy, streams) -> tuple:
    """Batched condition assembly over an encoder token stack.

    ``token_stack`` is (B, 1 + num_patches, D) with the class token in row 0;
    ``streams`` is one RngStream per image, consumed exactly like
    build_condition consumes its stream. Returns (kv, active) where kv is
    (B, L_c, D) and active is a boolean (B, L_c) key-activity array, or None
    when every key is active. Masking inactive keys in attention is exactly
    equivalent to dropping them, because masked weights underflow to zero.
    """
    b = token_stack.shape[0]
    num_patches = token_stack.shape[1] - 1
    bos, eos = sentinel_tokens(token_stack.shape[2])
    cls = narrow(token_stack, 1, 0, 1)
    patches = narrow(token_stack, 1, 1, num_patches)
    frame = [tile_rows(bos, b), cls]

    if strategy.kind == POOLED_WINDOW:
        pool = _pooling_matrix(num_patches, strategy.window)
        frame.append(bmm(tile_rows(pool, b), patches))
        active = None
    else:
        frame.append(patches)
        if strategy.kind == ALL_TOKENS:
            active = None
        else:
            active = np.ones((b, num_patches + 3), dtype=bool)
            if strategy.kind == CLASS_ONLY:
                active[:, 2:-1] = False
            else:  # RANDOM_SUBSET, same draw as build_condition
                for i, stream in enumerate(streams):
                    active[i, 2:-1] = stream.uniform(num_patches) < strategy.p
    frame.append(tile_rows(eos, b))
    return concat(frame, axis=1), active


def expected_density(strategy: RecapStrategy, num_patches: int) -> float:
    """Expected count of patch-token entries the strategy contributes."""
    if strategy.kind == CLASS_ONLY:
        return 0.0
    if strategy.kind == RANDOM_SUBSET:
        return strategy.p * num_patches
    if strategy.kind == POOLED_WINDOW:
        return float(ceil(num_patches / strategy.window))
    return float(num_patches)
