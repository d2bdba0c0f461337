import numpy as np
import pytest
import torch

from mcseg.errors import ConfigError
from mcseg.nn import MiniSegNetConfig, build_model, mc_predict, predict_proba
from mcseg.nn.network import _dropout

CFG = MiniSegNetConfig(in_channels=1, base_channels=2, depth=1, dropout_rate=0.4)


def one_image(seed=0, size=16):
    rng = np.random.default_rng(seed)
    return rng.random((size, size)).astype(np.float32)


def test_zero_dropout_mc_reduces_to_deterministic_pass():
    cfg = MiniSegNetConfig(in_channels=1, base_channels=2, depth=1, dropout_rate=0.0)
    model = build_model(cfg, init_seed=0)
    img = one_image()
    out = mc_predict(model, img, t_passes=5, seed=3)
    x = torch.from_numpy(img[None, None])
    with torch.no_grad():
        logits, log_var = model(x, dropout_active=False)
    prob = torch.sigmoid(logits)[0].numpy()
    eps = torch.exp(log_var)[0].numpy()
    assert np.allclose(out.prob_mean, prob, atol=1e-6)
    assert np.allclose(out.epistemic, eps, rtol=1e-5)
    assert np.allclose(out.logit_spread, 0.0, atol=1e-9)


def test_t1_equals_single_stochastic_pass():
    model = build_model(CFG, init_seed=1)
    img = one_image(1)
    out = mc_predict(model, img, t_passes=1, seed=7)
    pass_seed = int(np.random.SeedSequence(7).spawn(1)[0].generate_state(1)[0])
    gen = torch.Generator().manual_seed(pass_seed)
    with torch.no_grad():
        logits, log_var = model(
            torch.from_numpy(img[None, None]), dropout_active=True, generator=gen
        )
    assert np.allclose(out.prob_mean, torch.sigmoid(logits)[0].numpy(), atol=1e-7)
    assert np.allclose(out.epistemic, torch.exp(log_var)[0].numpy(), rtol=1e-6)


def test_mc_outputs_respect_bounds():
    model = build_model(CFG, init_seed=2)
    imgs = np.stack([one_image(s) for s in range(5)])
    outs = mc_predict(model, imgs, t_passes=8, seed=11)
    for out in outs:
        assert out.prob_mean.min() >= 0.0 and out.prob_mean.max() <= 1.0
        assert out.epistemic.min() >= 0.0
        assert out.t_passes == 8


def test_mc_predict_deterministic_in_seed():
    model = build_model(CFG, init_seed=3)
    imgs = np.stack([one_image(s) for s in range(3)])
    a = mc_predict(model, imgs, t_passes=6, seed=5)
    b = mc_predict(model, imgs, t_passes=6, seed=5)
    c = mc_predict(model, imgs, t_passes=6, seed=6)
    for x, y in zip(a, b):
        assert np.array_equal(x.prob_mean, y.prob_mean)
        assert np.array_equal(x.epistemic, y.epistemic)
    assert not np.array_equal(a[0].prob_mean, c[0].prob_mean)


def test_mc_convergence_towards_large_t():
    model = build_model(CFG, init_seed=4)
    img = one_image(4)
    big = mc_predict(model, img, t_passes=1000, seed=9, keep_passes=True)
    small = mc_predict(model, img, t_passes=30, seed=10)
    per_pass_prob = 1.0 / (1.0 + np.exp(-big.per_pass_logits.astype(np.float64)))
    std = per_pass_prob.std(axis=0)
    band = 3.0 * std * (1.0 / np.sqrt(1000) + 1.0 / np.sqrt(30)) + 1e-6
    assert np.all(np.abs(big.prob_mean - small.prob_mean) <= band)


def test_keep_passes_shape():
    model = build_model(CFG, init_seed=5)
    out = mc_predict(model, one_image(5), t_passes=4, seed=1, keep_passes=True)
    assert out.per_pass_logits.shape == (4, 16, 16)


def test_t_must_be_positive():
    model = build_model(CFG, init_seed=6)
    with pytest.raises(ConfigError):
        mc_predict(model, one_image(), t_passes=0, seed=0)


def test_inverted_dropout_is_unbiased():
    # expectation over many masks matches the deterministic activation
    gen = torch.Generator().manual_seed(13)
    x = torch.randn(4, 4, generator=gen, dtype=torch.float64)
    rate = 0.4
    n = 10_000
    mask_gen = torch.Generator().manual_seed(14)
    total = torch.zeros_like(x)
    for _ in range(n):
        total += _dropout(x, rate, True, mask_gen)
    mean = total / n
    se = x.abs() * np.sqrt(rate / (1 - rate) / n)
    assert torch.all((mean - x).abs() <= 3.5 * se + 1e-9)


def test_predict_proba_matches_sigmoid_of_deterministic_logits():
    model = build_model(CFG, init_seed=7)
    imgs = np.stack([one_image(s) for s in range(3)])
    probs = predict_proba(model, imgs)
    with torch.no_grad():
        logits, _ = model(torch.from_numpy(imgs[:, None]), dropout_active=False)
    assert np.allclose(probs, torch.sigmoid(logits).numpy(), atol=1e-7)
    assert probs.shape == (3, 16, 16)
