import math

import numpy as np
import pytest
import torch

from mcseg.errors import ShapeError
from mcseg.nn import attenuated_bce_loss


def plain_bce(logits, labels):
    return float(torch.nn.functional.binary_cross_entropy_with_logits(logits, labels))


def test_zero_noise_limit_reduces_to_plain_bce():
    gen = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 8, 8, generator=gen)
    labels = (torch.rand(3, 8, 8, generator=gen) > 0.5).float()
    log_var = torch.full_like(logits, -30.0)
    value = float(attenuated_bce_loss(logits, log_var, labels, 10, torch.Generator().manual_seed(1)))
    assert abs(value - plain_bce(logits, labels)) < 1e-6


def test_zero_logits_give_ln2_per_pixel():
    logits = torch.zeros(2, 4, 4)
    labels = (torch.rand(2, 4, 4, generator=torch.Generator().manual_seed(2)) > 0.3).float()
    log_var = torch.full_like(logits, -30.0)
    value = float(attenuated_bce_loss(logits, log_var, labels, 5, torch.Generator().manual_seed(3)))
    assert value == pytest.approx(math.log(2.0), abs=1e-6)


def test_sample_means_sit_inside_monte_carlo_oracle_band():
    # single pixel: mean over S of BCE(z + sigma*eps) vs a 1e5-draw average
    logit, log_var, label = 0.3, 0.5, 1.0
    sigma = math.exp(0.5 * log_var)
    rng = np.random.default_rng(42)
    eps = rng.standard_normal(100_000)
    z = logit + sigma * eps
    losses = np.maximum(z, 0) - z * label + np.log1p(np.exp(-np.abs(z)))
    mu, sd = losses.mean(), losses.std()

    logits_t = torch.full((1, 1, 1), logit, dtype=torch.float32)
    log_var_t = torch.full((1, 1, 1), log_var, dtype=torch.float32)
    labels_t = torch.full((1, 1, 1), label, dtype=torch.float32)
    for s in (1, 10):
        value = float(
            attenuated_bce_loss(logits_t, log_var_t, labels_t, s, torch.Generator().manual_seed(7))
        )
        assert abs(value - mu) <= 3.0 * sd / math.sqrt(s)


def test_non_binary_labels_rejected():
    logits = torch.zeros(1, 2, 2)
    with pytest.raises(ShapeError, match="binary"):
        attenuated_bce_loss(logits, logits, torch.full((1, 2, 2), 0.5), 3)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError, match="mismatch"):
        attenuated_bce_loss(torch.zeros(1, 4, 4), torch.zeros(1, 2, 2), torch.zeros(1, 4, 4), 3)


def test_more_samples_reduce_spread():
    gen = torch.Generator().manual_seed(4)
    logits = torch.randn(2, 8, 8, generator=gen)
    log_var = torch.zeros_like(logits)
    labels = (torch.rand(2, 8, 8, generator=gen) > 0.5).float()

    def spread(s):
        values = [
            float(attenuated_bce_loss(logits, log_var, labels, s, torch.Generator().manual_seed(i)))
            for i in range(30)
        ]
        return np.std(values)

    assert spread(16) < spread(1)
