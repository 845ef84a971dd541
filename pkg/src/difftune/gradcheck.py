"""Finite-difference verification of every differentiable op and the full loss.

Used both by the test suite and the `gradcheck` CLI subcommand. The op
suite checks each primitive through a random scalar probe; the end-to-end
check differentiates the encoder-tuning loss with respect to a sample of
encoder parameters on a deliberately tiny model.
"""

from __future__ import annotations

import numpy as np

from .condition import RecapStrategy, build_condition
from .denoiser import DenoiserConfig, denoise, diffusion_loss, init_denoiser_params
from .encoder import EncoderConfig, encode, init_encoder_params, patchify, unpatchify
from .layers import freeze
from .rng import RngStream
from .schedule import forward_diffuse, make_schedule
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    bmm,
    bmm_nt,
    concat,
    div,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    merge_heads,
    mul,
    narrow,
    neg,
    repeat_interleave0,
    reshape,
    softmax,
    split_heads,
    sqrt,
    sub,
    sum_all,
    tile_rows,
    transpose,
)

OP_TOLERANCE = 1e-6
END_TO_END_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5

TINY_ENCODER = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2)
TINY_DENOISER = DenoiserConfig(
    patch_size=4, embed_dim=8, depth=1, heads=2, time_embed_dim=8, cond_dim=8
)


def _probe(weights: Tensor):
    """Reduce an arbitrary tensor to a scalar with fixed random weights."""

    def apply(t: Tensor) -> Tensor:
        return sum_all(mul(t, weights))

    return apply


def op_check_cases(seed: int = 2024):
    """(name, f, x) triples covering every differentiable primitive."""
    rng = RngStream(seed).split("gradcheck-ops")

    def w(shape):
        return Tensor(rng.normal(shape))

    a44 = rng.normal((4, 4))
    b45 = Tensor(rng.normal((4, 5)))
    m34 = rng.normal((3, 4))
    v4 = rng.normal(4)
    gain = Tensor(rng.normal(4) * 0.5 + 1.0)
    bias = Tensor(rng.normal(4) * 0.1)
    img = rng.normal((8, 8, 3))
    patches = rng.normal((4, 48))
    pos = rng.normal((4, 4)) + 3.0  # keep sqrt away from zero

    p44 = _probe(w((4, 4)))
    p45 = _probe(w((4, 5)))
    p34 = _probe(w((3, 4)))
    p24 = _probe(w((2, 4)))
    p14 = _probe(w((1, 4)))
    p64 = _probe(w((6, 4)))
    pimg = _probe(w((8, 8, 3)))
    ppat = _probe(w((4, 48)))
    other34 = Tensor(rng.normal((3, 4)))
    b234 = rng.normal((2, 3, 4))
    b234_b = rng.normal((2, 3, 4))
    t243 = Tensor(rng.normal((2, 4, 3)))
    b432 = rng.normal((4, 3, 2))
    p234 = _probe(w((2, 3, 4)))
    p233 = _probe(w((2, 3, 3)))
    p243 = _probe(w((2, 4, 3)))
    p432 = _probe(w((4, 3, 2)))
    p434 = _probe(w((4, 3, 4)))

    return [
        ("add", lambda x: p34(add(x, other34)), Tensor(m34)),
        ("add-broadcast", lambda x: p34(add(x, Tensor(v4))), Tensor(m34)),
        ("sub", lambda x: p34(sub(other34, x)), Tensor(m34)),
        ("mul", lambda x: p34(mul(x, other34)), Tensor(m34)),
        ("mul-scalar", lambda x: p34(mul(x, 2.5)), Tensor(m34)),
        ("div", lambda x: p34(div(other34, add(mul(x, x), 1.0))), Tensor(m34)),
        ("neg", lambda x: p34(neg(x)), Tensor(m34)),
        ("sqrt", lambda x: p44(sqrt(x)), Tensor(pos)),
        ("gelu", lambda x: p34(gelu(x)), Tensor(m34)),
        ("matmul-left", lambda x: p45(matmul(x, b45)), Tensor(a44)),
        ("matmul-right", lambda x: p45(matmul(Tensor(a44), x)), b45.copy()),
        ("transpose", lambda x: p44(transpose(x)), Tensor(a44)),
        ("reshape", lambda x: p24(reshape(x, (2, 4))), Tensor(rng.normal((4, 2)))),
        ("narrow", lambda x: p14(narrow(x, 0, 1, 1)), Tensor(m34)),
        ("concat", lambda x: p64(concat([x, other34], axis=0)), Tensor(m34)),
        ("softmax", lambda x: p34(softmax(x, axis=1)), Tensor(m34)),
        ("layer-norm", lambda x: p34(layer_norm(x, gain, bias, 1e-5)), Tensor(m34)),
        (
            "layer-norm-gain",
            lambda g: p34(layer_norm(Tensor(m34), g, bias, 1e-5)),
            gain.copy(),
        ),
        ("sum-all", lambda x: sum_all(x), Tensor(m34)),
        ("mean-all", lambda x: mean_all(mul(x, x)), Tensor(m34)),
        ("patchify", lambda x: ppat(patchify(x, 4)), Tensor(img)),
        ("unpatchify", lambda x: pimg(unpatchify(x, 4, 8, 8)), Tensor(patches)),
        ("bmm-left", lambda x: p233(bmm(x, t243)), Tensor(b234)),
        ("bmm-right", lambda x: p233(bmm(Tensor(b234), x)), t243.copy()),
        ("bmm-nt", lambda x: p233(bmm_nt(Tensor(b234), x)), Tensor(b234_b)),
        ("split-heads", lambda x: p432(split_heads(x, 2)), Tensor(b234)),
        ("merge-heads", lambda x: p234(merge_heads(x, 2)), Tensor(b432)),
        ("tile-rows", lambda x: p234(tile_rows(x, 2)), Tensor(m34)),
        ("repeat-interleave", lambda x: p434(repeat_interleave0(x, 2)), Tensor(b234)),
    ]


def run_op_checks(h: float = DEFAULT_STEP, seed: int = 2024):
    """Finite-difference every primitive; returns [(name, max_rel_err)]."""
    results = []
    for name, f, x in op_check_cases(seed):
        err, _ = finite_diff_check(f, x, h)
        results.append((name, err))
    return results


def _tiny_setup(seed: int):
    rng = RngStream(seed)
    enc_params = init_encoder_params(TINY_ENCODER, rng.split("enc"))
    den_params = freeze(init_denoiser_params(TINY_DENOISER, rng.split("den")))
    image = Tensor(rng.split("img").uniform((8, 8, 3)) * 2.0 - 1.0)
    sched = make_schedule(50, 1e-4, 0.05)
    t = rng.split("t").integers(1, sched.T)
    eps = Tensor(rng.split("eps").normal((8, 8, 3)))
    strategy = RecapStrategy.random_subset(0.5)
    cond_rng_seed = rng.split("mask")

    def loss_fn(params):
        ts = encode(image, params, TINY_ENCODER)
        cond = build_condition(
            ts, strategy, RngStream(cond_rng_seed.seed, cond_rng_seed.stream_index)
        )
        x_t = forward_diffuse(image, t, eps, sched)
        return diffusion_loss(denoise(x_t, t, cond, den_params, TINY_DENOISER), eps)

    return enc_params, loss_fn


def end_to_end_check(num_entries: int = 64, h: float = DEFAULT_STEP, seed: int = 7):
    """Max rel error of d(loss)/d(theta) over sampled encoder entries."""
    enc_params, loss_fn = _tiny_setup(seed)
    with Tape() as tape:
        loss = loss_fn(enc_params)
    grads = backward(loss, tape)
    by_name = {name: grads.get(t) for name, t in enc_params.items()}

    names = sorted(enc_params)
    pick_rng = RngStream(seed).split("pick")
    worst = 0.0
    checked = 0
    while checked < num_entries:
        name = names[pick_rng.integers(0, len(names) - 1)]
        tensor = enc_params[name]
        flat_idx = pick_rng.integers(0, tensor.size - 1)
        analytic_arr = by_name[name]
        analytic = 0.0 if analytic_arr is None else float(analytic_arr.ravel()[flat_idx])

        def bumped_loss(delta):
            data = tensor.data.copy()
            data.ravel()[flat_idx] += delta
            trial = dict(enc_params)
            trial[name] = Tensor(data, grad_enabled=False)
            return loss_fn(trial).item()

        numeric = (bumped_loss(h) - bumped_loss(-h)) / (2.0 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
        worst = max(worst, rel)
        checked += 1
    return worst
