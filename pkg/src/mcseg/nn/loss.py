"""Training loss: binary cross-entropy with learned attenuation.

The log-variance head is trained by corrupting logits with Gaussian noise of
the predicted scale and averaging BCE over ``S`` draws:

    loss = mean_s BCE(logits + exp(log_var / 2) * eps_s, labels)

High predicted variance can absorb errors on ambiguous pixels at the price of
noisier logits, so the head learns per-pixel noise levels. As log_var -> -inf
the loss reduces to plain BCE, which anchors the zero-noise limit tests.
"""

from __future__ import annotations

import torch

from ..errors import ShapeError


def bce_with_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Numerically stable elementwise binary cross-entropy (mean-reduced)."""
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)


def attenuated_bce_loss(
    logits: torch.Tensor,
    log_var: torch.Tensor,
    labels: torch.Tensor,
    attenuation_samples: int = 10,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean BCE over ``attenuation_samples`` noise-corrupted logit draws."""
    if logits.shape != log_var.shape or logits.shape != labels.shape:
        raise ShapeError(
            f"shape mismatch: logits {tuple(logits.shape)}, log_var {tuple(log_var.shape)}, "
            f"labels {tuple(labels.shape)}"
        )
    if attenuation_samples < 1:
        raise ShapeError("attenuation_samples must be >= 1")
    if not torch.all((labels == 0) | (labels == 1)):
        raise ShapeError("labels must be binary (0/1)")
    eps = torch.randn(
        (attenuation_samples, *logits.shape), generator=generator, dtype=logits.dtype
    )
    corrupted = logits.unsqueeze(0) + torch.exp(0.5 * log_var).unsqueeze(0) * eps
    target = labels.unsqueeze(0).expand_as(corrupted)
    return torch.nn.functional.binary_cross_entropy_with_logits(corrupted, target)
