"""Training loop with VS1-driven early stopping.

Randomness is split into named streams (init, shuffling, dropout, attenuation
noise) derived from one seed, so training is bit-reproducible and independent
of how many sibling models train concurrently. Validation loss is plain BCE in
deterministic mode (dropout off, running batch-norm statistics); the epoch
with the lowest VS1 loss wins and its weights are restored at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigError, ShapeError, TrainingDivergedError
from .loss import attenuated_bce_loss, bce_with_logits
from .network import MiniSegNet, MiniSegNetConfig, build_model, ensure_single_thread
from .weights_io import ModelWeights, weights_from_module

_EVAL_BATCH = 16


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 60
    patience: int = 3
    attenuation_samples: int = 10
    seed: int = 0

    def validate(self, prefix: str = "train") -> None:
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size", "must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"{prefix}.learning_rate", "must be > 0")
        if self.max_epochs < 1:
            raise ConfigError(f"{prefix}.max_epochs", "must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"{prefix}.patience", "must be >= 1")
        if self.attenuation_samples < 1:
            raise ConfigError(f"{prefix}.attenuation_samples", "must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    vs1_loss: float


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[EpochStats] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,vs1_loss"]
        for row in self.history:
            lines.append(f"{row.epoch},{row.train_loss:.8f},{row.vs1_loss:.8f}")
        return "\n".join(lines) + "\n"


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ShapeError(f"images must be (N, H, W) or (N, C, H, W), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr))


def train_step(
    model: MiniSegNet,
    optimizer: torch.optim.Optimizer,
    batch_images: torch.Tensor,
    batch_labels: torch.Tensor,
    attenuation_samples: int,
    dropout_generator: torch.Generator,
    noise_generator: torch.Generator,
) -> float:
    """One forward/backward/update; returns the pre-update loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    logits, log_var = model(batch_images, dropout_active=True, generator=dropout_generator)
    loss = attenuated_bce_loss(
        logits, log_var, batch_labels, attenuation_samples, generator=noise_generator
    )
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(-1, -1, "loss non-finite before update")
    loss.backward()
    optimizer.step()
    return value


@torch.no_grad()
def evaluate_bce(model: MiniSegNet, images: np.ndarray, labels: np.ndarray) -> float:
    """Deterministic-mode (no dropout, running BN stats) mean BCE per pixel."""
    ensure_single_thread()
    model.eval()
    x = _to_nchw(images)
    y = torch.from_numpy(np.ascontiguousarray(np.asarray(labels, dtype=np.float32)))
    total = 0.0
    count = 0
    for start in range(0, x.shape[0], _EVAL_BATCH):
        bx = x[start : start + _EVAL_BATCH]
        by = y[start : start + _EVAL_BATCH]
        logits, _ = model(bx, dropout_active=False)
        loss = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, by, reduction="sum"
        )
        total += float(loss)
        count += by.numel()
    return total / count


def train(
    model_config: MiniSegNetConfig,
    train_images: np.ndarray,
    train_masks: np.ndarray,
    vs1_images: np.ndarray,
    vs1_masks: np.ndarray,
    train_config: TrainConfig,
) -> TrainResult:
    """Train up to max_epochs with early stopping on VS1 loss.

    Stops after ``patience`` consecutive epochs without a strict VS1
    improvement and returns the best epoch's weights.
    """
    ensure_single_thread()
    model_config.validate()
    train_config.validate()
    if len(train_images) == 0 or len(vs1_images) == 0:
        raise ShapeError("train and vs1 splits must be non-empty")

    ss = np.random.SeedSequence(train_config.seed)
    init_ss, shuffle_ss, dropout_ss, noise_ss = ss.spawn(4)
    model = build_model(model_config, init_seed=int(init_ss.generate_state(1)[0]))
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.beta1, train_config.beta2),
        eps=train_config.adam_eps,
    )
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    dropout_gen = torch.Generator().manual_seed(int(dropout_ss.generate_state(1)[0]))
    noise_gen = torch.Generator().manual_seed(int(noise_ss.generate_state(1)[0]))

    x = _to_nchw(train_images)
    y = torch.from_numpy(np.ascontiguousarray(np.asarray(train_masks, dtype=np.float32)))
    if y.ndim != 3 or y.shape[0] != x.shape[0]:
        raise ShapeError(f"masks must be (N, H, W) matching images, got {tuple(y.shape)}")

    history: list[EpochStats] = []
    best_vs1 = math.inf
    best_state: dict | None = None
    best_epoch = 0
    bad_epochs = 0
    n = x.shape[0]

    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        seen = 0
        for batch_idx, start in enumerate(range(0, n, train_config.batch_size)):
            sel = torch.from_numpy(order[start : start + train_config.batch_size].copy())
            try:
                value = train_step(
                    model,
                    optimizer,
                    x[sel],
                    y[sel],
                    train_config.attenuation_samples,
                    dropout_gen,
                    noise_gen,
                )
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(epoch, batch_idx, str(exc)) from None
            loss_sum += value * sel.shape[0]
            seen += sel.shape[0]
        train_loss = loss_sum / seen
        vs1_loss = evaluate_bce(model, vs1_images, vs1_masks)
        if not math.isfinite(vs1_loss):
            raise TrainingDivergedError(epoch, -1, "validation loss non-finite")
        history.append(EpochStats(epoch=epoch, train_loss=train_loss, vs1_loss=vs1_loss))

        if vs1_loss < best_vs1:
            best_vs1 = vs1_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                break

    assert best_state is not None
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        weights=weights_from_module(model),
        history=history,
        stopped_epoch=len(history),
        best_epoch=best_epoch,
    )
