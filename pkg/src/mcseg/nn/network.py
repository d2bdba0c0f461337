"""Network definition and deterministic initialization."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import torch
from torch import nn

from ..errors import ConfigError, ShapeError

_SINGLE_THREAD_SET = False


def ensure_single_thread() -> None:
    """Pin torch to one intra-op thread.

    Reduction order inside multi-threaded conv kernels is not guaranteed
    stable, and the pipeline promises bit-identical results regardless of the
    caller's worker count; parallelism happens across models instead.
    """
    global _SINGLE_THREAD_SET
    if not _SINGLE_THREAD_SET:
        torch.set_num_threads(1)
        _SINGLE_THREAD_SET = True


@dataclass(frozen=True)
class MiniSegNetConfig:
    """Architecture knobs for the mini encoder-decoder.

    ``logit_bias_init`` presets the segmentation head's bias; the stacked
    combiner uses it to start near the members' calibration (its inputs are
    already probability maps), which the training budget otherwise spends
    rediscovering.
    """

    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    dropout_rate: float = 0.4
    dropout_rates: tuple[float, ...] | None = None  # optional per-decoder-level override
    use_attention: bool = True
    logit_bias_init: float | None = None

    def validate(self, prefix: str = "model") -> None:
        if self.in_channels < 1:
            raise ConfigError(f"{prefix}.in_channels", "must be >= 1")
        if self.base_channels < 1:
            raise ConfigError(f"{prefix}.base_channels", "must be >= 1")
        if self.depth < 1:
            raise ConfigError(f"{prefix}.depth", "must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"{prefix}.dropout_rate", "must lie in [0, 1)")
        if self.dropout_rates is not None:
            if len(self.dropout_rates) != self.depth:
                raise ConfigError(
                    f"{prefix}.dropout_rates", f"need one rate per decoder level ({self.depth})"
                )
            for r in self.dropout_rates:
                if not (0.0 <= r < 1.0):
                    raise ConfigError(f"{prefix}.dropout_rates", "rates must lie in [0, 1)")

    def rate_for_level(self, level: int) -> float:
        if self.dropout_rates is not None:
            return self.dropout_rates[level]
        return self.dropout_rate

    def fingerprint(self) -> str:
        doc = dataclasses.asdict(self)
        if doc["dropout_rates"] is not None:
            doc["dropout_rates"] = list(doc["dropout_rates"])
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


def _dropout(x: torch.Tensor, rate: float, active: bool, generator) -> torch.Tensor:
    """Inverted dropout with an explicit generator (unbiased in expectation)."""
    if not active or rate == 0.0:
        return x
    if generator is None:
        raise ShapeError("dropout_active=True with rate > 0 requires an rng stream")
    keep = 1.0 - rate
    mask = (torch.rand(x.shape, generator=generator, dtype=x.dtype) < keep).to(x.dtype)
    return x * mask / keep


_BN_MOMENTUM = 0.3  # short epochs: running stats must track the weights closely


class ConvBNRelu(nn.Module):
    """3x3 conv + batch norm + ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout, momentum=_BN_MOMENTUM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.bn(self.conv(x)))


class AttentionGate(nn.Module):
    """Multiplicative gate on a skip connection.

    Both the decoder signal and the skip are projected by 1x1 convs, combined,
    and squashed to a sigmoid weight map that scales the skip features.
    """

    def __init__(self, channels: int):
        super().__init__()
        inter = max(channels // 2, 1)
        self.project_gate = nn.Conv2d(channels, inter, kernel_size=1)
        self.project_skip = nn.Conv2d(channels, inter, kernel_size=1)
        self.psi = nn.Conv2d(inter, 1, kernel_size=1)

    def forward(self, gate: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        weight = torch.sigmoid(self.psi(torch.relu(self.project_gate(gate) + self.project_skip(skip))))
        return skip * weight


class DecoderBlock(nn.Module):
    """Upsample + conv, attention-gated skip concat, two conv units.

    Dropout follows every ReLU in this block (and only decoder blocks carry
    dropout at all).
    """

    def __init__(self, cin: int, cout: int, rate: float, use_attention: bool):
        super().__init__()
        self.rate = rate
        self.up = ConvBNRelu(cin, cout)
        self.attention = AttentionGate(cout) if use_attention else None
        self.conv1 = ConvBNRelu(2 * cout, cout)
        self.conv2 = ConvBNRelu(cout, cout)

    def forward(self, x, skip, dropout_active: bool, generator) -> torch.Tensor:
        x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = _dropout(self.up(x), self.rate, dropout_active, generator)
        gated = self.attention(x, skip) if self.attention is not None else skip
        x = torch.cat([gated, x], dim=1)
        x = _dropout(self.conv1(x), self.rate, dropout_active, generator)
        return _dropout(self.conv2(x), self.rate, dropout_active, generator)


class MiniSegNet(nn.Module):
    """Encoder-decoder with skip connections and two 1x1 output heads.

    ``forward`` returns (logits, log_var), each shaped (N, H, W); the log
    variance head exists so the training loss can learn per-pixel noise and
    MC inference can average predicted variances into an epistemic map.
    """

    def __init__(self, config: MiniSegNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch = [config.base_channels * (2**i) for i in range(config.depth + 1)]

        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for lvl in range(config.depth):
            self.encoders.append(
                nn.Sequential(ConvBNRelu(cin, ch[lvl]), ConvBNRelu(ch[lvl], ch[lvl]))
            )
            cin = ch[lvl]
        self.bottleneck = nn.Sequential(
            ConvBNRelu(ch[config.depth - 1], ch[config.depth]),
            ConvBNRelu(ch[config.depth], ch[config.depth]),
        )
        self.decoders = nn.ModuleList(
            DecoderBlock(ch[lvl + 1], ch[lvl], config.rate_for_level(lvl), config.use_attention)
            for lvl in reversed(range(config.depth))
        )
        self.logit_head = nn.Conv2d(ch[0], 1, kernel_size=1)
        self.log_var_head = nn.Conv2d(ch[0], 1, kernel_size=1)

    def forward(
        self,
        x: torch.Tensor,
        dropout_active: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4:
            raise ShapeError(f"input must be NCHW, got shape {tuple(x.shape)}")
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ShapeError(
                f"encoder level 0 expects {self.config.in_channels} channels, got {c}"
            )
        factor = 2**self.config.depth
        if h % factor or w % factor:
            raise ShapeError(
                f"spatial dims must be divisible by {factor} for depth {self.config.depth}, got {h}x{w}"
            )

        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = torch.nn.functional.max_pool2d(x, kernel_size=2)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip, dropout_active, generator)
        logits = self.logit_head(x)[:, 0]
        log_var = self.log_var_head(x)[:, 0]
        return logits, log_var


def _init_conv(conv: nn.Conv2d, generator: torch.Generator) -> None:
    """Kaiming-uniform fan-in init with ReLU gain; bias uniform in
    +-1/sqrt(fan_in)."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=generator)
        if conv.bias is not None:
            b = 1.0 / math.sqrt(fan_in)
            conv.bias.uniform_(-b, b, generator=generator)


def build_model(config: MiniSegNetConfig, init_seed: int | None = None) -> MiniSegNet:
    """Construct a MiniSegNet; with a seed, initialize deterministically."""
    ensure_single_thread()
    model = MiniSegNet(config)
    if init_seed is not None:
        gen = torch.Generator().manual_seed(int(init_seed) & 0x7FFFFFFFFFFFFFFF)
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                _init_conv(module, gen)
            elif isinstance(module, nn.BatchNorm2d):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()
                    module.running_mean.zero_()
                    module.running_var.fill_(1.0)
        with torch.no_grad():
            # start with near-zero predicted noise so early training is plain
            # BCE; the head then raises variance only where errors persist
            model.log_var_head.bias.fill_(-4.0)
            if config.logit_bias_init is not None:
                model.logit_head.bias.fill_(config.logit_bias_init)
            for module in model.modules():
                if isinstance(module, AttentionGate):
                    module.psi.bias.fill_(1.0)  # gates mostly open at init
    model.eval()  # callers opt into train mode; BN buffers stay frozen otherwise
    return model
