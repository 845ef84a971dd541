"""Noise predictor: time embedding, conditioning contracts, loss."""

import numpy as np
import pytest

from difftune.condition import Condition, RecapStrategy, build_condition
from difftune.denoiser import (
    DenoiserConfig,
    denoise,
    denoise_batch,
    diffusion_loss,
    init_denoiser_params,
    time_embed,
)
from difftune.encoder import EncoderConfig, encode, init_encoder_params
from difftune.errors import ShapeError
from difftune.rng import RngStream
from difftune.tensor import Tape, Tensor, backward, mul, sum_all

TINY_D = DenoiserConfig(
    patch_size=4, embed_dim=8, depth=1, heads=2, time_embed_dim=8, cond_dim=8, num_patches=4
)
TINY_E = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2)


def _setup(seed=0):
    rng = RngStream(seed)
    den = init_denoiser_params(TINY_D, rng.split("d"))
    enc = init_encoder_params(TINY_E, rng.split("e"))
    img = Tensor(rng.split("img").uniform((8, 8, 3)) * 2 - 1)
    cond = build_condition(
        encode(img, enc, TINY_E), RecapStrategy.all_tokens(), rng.split("c")
    )
    return den, img, cond


def test_time_embed_zero_is_alternating():
    emb = time_embed(0, 8).data
    assert np.array_equal(emb, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


def test_time_embed_distinct_across_schedule():
    # exhaustive scan: no two timesteps in 1..1000 share an embedding
    embs = np.stack([time_embed(t, 16).data for t in range(1, 1001)])
    for start in range(0, 1000, 100):
        chunk = embs[start : start + 100]
        diff = np.abs(chunk[:, None, :] - embs[None, :, :]).max(axis=2)
        diff[np.arange(100), start + np.arange(100)] = np.inf
        assert diff.min() > 1e-6


def test_time_embed_rejects_odd_dim():
    with pytest.raises(ShapeError):
        time_embed(5, 7)


def test_denoise_preserves_shape():
    den, img, cond = _setup()
    out = denoise(img, 37, cond, den, TINY_D)
    assert out.shape == img.shape


def test_denoise_deterministic():
    den, img, cond = _setup(1)
    a = denoise(img, 11, cond, den, TINY_D)
    b = denoise(img, 11, cond, den, TINY_D)
    assert np.array_equal(a.data, b.data)


def test_condition_patch_segment_permutation_invariance():
    den, img, cond = _setup(2)
    out = denoise(img, 100, cond, den, TINY_D)
    # permute the patch-token rows (keep sentinels and class in place)
    perm = cond.tokens.data.copy()
    perm[2:-1] = perm[2:-1][::-1]
    out_p = denoise(img, 100, Condition(tokens=Tensor(perm), embed_dim=8), den, TINY_D)
    assert np.max(np.abs(out.data - out_p.data)) < 1e-10


def test_gradient_reaches_condition_tokens():
    den, img, cond = _setup(3)
    # generic parameters: the freshly-initialized head is all zeros, which
    # would zero the probe's gradient identically
    rng = RngStream(77)
    den = dict(den)
    den["head.w"] = Tensor(rng.normal(den["head.w"].shape) * 0.1, grad_enabled=True)
    den["head.b"] = Tensor(rng.normal(den["head.b"].shape) * 0.1, grad_enabled=True)
    leaf = Tensor(cond.tokens.data.copy(), grad_enabled=True)
    with Tape() as tape:
        out = denoise(img, 50, Condition(tokens=leaf, embed_dim=8), den, TINY_D)
        loss = sum_all(mul(out, out))
    grads = backward(loss, tape)
    assert leaf in grads
    assert np.max(np.abs(grads[leaf])) > 0


def test_denoise_rejects_condition_dim_mismatch():
    den, img, _ = _setup(4)
    bad = Condition(tokens=Tensor(np.zeros((3, 16))), embed_dim=16)
    with pytest.raises(ShapeError):
        denoise(img, 5, bad, den, TINY_D)


def test_denoise_batch_matches_single(monkeypatch):
    den, img, cond = _setup(5)
    rng = RngStream(6)
    img2 = Tensor(rng.uniform((8, 8, 3)) * 2 - 1)
    single_1 = denoise(img, 3, cond, den, TINY_D)
    single_2 = denoise(img2, 700, cond, den, TINY_D)
    stack = denoise_batch(
        Tensor(np.stack([img.data, img2.data])),
        [3, 700],
        Tensor(np.stack([cond.tokens.data, cond.tokens.data])),
        den,
        TINY_D,
    )
    assert np.allclose(stack.data[0], single_1.data, atol=1e-12)
    assert np.allclose(stack.data[1], single_2.data, atol=1e-12)


def test_diffusion_loss_perfect_prediction_zero():
    x = Tensor(RngStream(7).normal((4, 4, 3)))
    assert diffusion_loss(x, x).item() == 0.0


def test_diffusion_loss_unit_noise_scale():
    # predicting zero against standard noise gives mean-square about 1
    rng = RngStream(8)
    total = 0.0
    for i in range(10_000):
        eps = rng.split(i).normal(48)
        total += float(np.mean(eps * eps))
    assert abs(total / 10_000 - 1.0) < 0.05


def test_diffusion_loss_is_plain_mse():
    rng = RngStream(9)
    a = Tensor(rng.normal((4, 4, 3)))
    b = Tensor(rng.normal((4, 4, 3)))
    want = float(np.mean((a.data - b.data) ** 2))
    assert diffusion_loss(a, b).item() == pytest.approx(want, abs=1e-15)


def test_diffusion_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        diffusion_loss(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((4, 4, 3))))


def test_constant_condition_degenerates_to_unconditional():
    # with one fixed condition, the predictor is a function of (x_t, t) alone
    den, img, cond = _setup(10)
    fixed = Condition(tokens=Tensor(RngStream(11).normal((3, 8))), embed_dim=8)
    rng = RngStream(12)
    losses = []
    for i in range(3):
        x_t = Tensor(rng.split("x", i).normal((8, 8, 3)))
        eps = Tensor(rng.split("e", i).normal((8, 8, 3)))
        eps_hat = denoise(x_t, 40, fixed, den, TINY_D)
        by_formula = float(np.mean((eps_hat.data - eps.data) ** 2))
        losses.append((diffusion_loss(eps_hat, eps).item(), by_formula))
    for got, want in losses:
        assert got == pytest.approx(want, abs=1e-15)
