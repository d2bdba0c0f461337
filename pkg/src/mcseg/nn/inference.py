"""Monte Carlo inference.

``mc_predict`` keeps dropout active for T stochastic passes (batch norm stays
on running statistics) and aggregates:

* ``prob_mean``: mean sigmoid of the per-pass logits;
* ``epistemic``: mean of the per-pass predicted logit variances
  exp(log_var_t), the primary uncertainty map;
* ``logit_spread``: across-pass variance of the raw logits, kept as an
  optional diagnostic since the two readings of "variance over MC samples"
  differ and only the first drives the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError, ShapeError
from .network import MiniSegNet, ensure_single_thread

_EVAL_BATCH = 16


@dataclass
class McOutput:
    """Aggregated result of T stochastic forward passes on one image."""

    prob_mean: np.ndarray
    epistemic: np.ndarray
    t_passes: int
    per_pass_logits: np.ndarray | None = None
    logit_spread: np.ndarray | None = None


def _as_batch(images: np.ndarray) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ShapeError(f"images must be 2-D, (N, H, W) or (N, C, H, W), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr)), single


@torch.no_grad()
def predict_proba(model: MiniSegNet, images: np.ndarray) -> np.ndarray:
    """Deterministic single-pass probability maps (dropout off)."""
    ensure_single_thread()
    model.eval()
    x, single = _as_batch(images)
    outs = []
    for start in range(0, x.shape[0], _EVAL_BATCH):
        logits, _ = model(x[start : start + _EVAL_BATCH], dropout_active=False)
        outs.append(torch.sigmoid(logits).numpy().astype(np.float32))
    probs = np.concatenate(outs, axis=0)
    return probs[0] if single else probs


@torch.no_grad()
def mc_predict(
    model: MiniSegNet,
    images: np.ndarray,
    t_passes: int = 30,
    seed: int = 0,
    keep_passes: bool = False,
) -> list[McOutput] | McOutput:
    """Run T MC-dropout passes and aggregate per image.

    Deterministic in (model, images, t_passes, seed): each pass draws its
    dropout masks from a pre-assigned stream, and chunking is fixed.
    """
    if t_passes < 1:
        raise ConfigError("t_passes", "must be >= 1")
    ensure_single_thread()
    model.eval()
    x, single = _as_batch(images)
    n, _, h, w = x.shape

    prob_sum = np.zeros((n, h, w), dtype=np.float64)
    var_sum = np.zeros((n, h, w), dtype=np.float64)
    logit_sum = np.zeros((n, h, w), dtype=np.float64)
    logit_sq_sum = np.zeros((n, h, w), dtype=np.float64)
    passes = np.empty((t_passes, n, h, w), dtype=np.float32) if keep_passes else None

    pass_seeds = np.random.SeedSequence(seed).spawn(t_passes)
    for t in range(t_passes):
        gen = torch.Generator().manual_seed(int(pass_seeds[t].generate_state(1)[0]))
        for start in range(0, n, _EVAL_BATCH):
            logits, log_var = model(
                x[start : start + _EVAL_BATCH], dropout_active=True, generator=gen
            )
            lg = logits.numpy().astype(np.float64)
            stop = start + lg.shape[0]
            prob_sum[start:stop] += 1.0 / (1.0 + np.exp(-lg))
            var_sum[start:stop] += np.exp(log_var.numpy().astype(np.float64))
            logit_sum[start:stop] += lg
            logit_sq_sum[start:stop] += lg * lg
            if passes is not None:
                passes[t, start:stop] = lg.astype(np.float32)

    prob_mean = (prob_sum / t_passes).astype(np.float32)
    epistemic = (var_sum / t_passes).astype(np.float32)
    spread = np.maximum(logit_sq_sum / t_passes - (logit_sum / t_passes) ** 2, 0.0)

    outputs = [
        McOutput(
            prob_mean=np.clip(prob_mean[i], 0.0, 1.0),
            epistemic=epistemic[i],
            t_passes=t_passes,
            per_pass_logits=passes[:, i].copy() if passes is not None else None,
            logit_spread=spread[i].astype(np.float32),
        )
        for i in range(n)
    ]
    return outputs[0] if single else outputs
