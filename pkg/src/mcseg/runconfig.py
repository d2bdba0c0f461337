"""Run configuration: one JSON-serializable tree covering every stage.

A single master seed governs every derived training/inference/statistics
stream (per-candidate seeds, MC dropout masks, permutation and bootstrap
replicates). The dataset keeps its own seed inside the phantom section so one
fixed dataset can be studied under several pipeline seeds.

Overrides use dotted paths (``--set train.learning_rate=0.001``); values are
parsed as JSON with a plain-string fallback. The config digest feeds the
stage ledger and is embedded in every report; ``out_dir`` and ``threads``
are excluded from it since they must not change results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError
from .nn import MiniSegNetConfig, TrainConfig
from .phantom import PhantomConfig
from .uqstats import DivergenceConfig


@dataclass(frozen=True)
class EnsembleConfig:
    m_candidates: int = 15
    policy: str = "top_k"
    top_k: int = 3
    theta: float = 0.5
    include_image_channel: bool = False

    def validate(self, prefix: str = "ensemble") -> None:
        if self.m_candidates < 1:
            raise ConfigError(f"{prefix}.m_candidates", "must be >= 1")
        if self.policy not in ("top_k", "threshold"):
            raise ConfigError(f"{prefix}.policy", "must be 'top_k' or 'threshold'")
        if self.policy == "top_k" and not (1 <= self.top_k <= self.m_candidates):
            raise ConfigError(f"{prefix}.top_k", f"must lie in [1, {self.m_candidates}]")
        if self.theta < 0:
            raise ConfigError(f"{prefix}.theta", "must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 7
    out_dir: str = "runs/default"
    threads: int = 1
    t_passes: int = 30
    gamma: float = 0.8
    b_replicates: int = 1000
    ci_level: float = 0.95
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: MiniSegNetConfig = field(default_factory=MiniSegNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)

    def validate(self) -> None:
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        if self.t_passes < 1:
            raise ConfigError("t_passes", "must be >= 1")
        if not (0 < self.gamma <= 1):
            raise ConfigError("gamma", "must lie in (0, 1]")
        if self.b_replicates < 1:
            raise ConfigError("b_replicates", "must be >= 1")
        if not (0 < self.ci_level < 1):
            raise ConfigError("ci_level", "must lie in (0, 1)")
        self.phantom.validate("phantom")
        self.model.validate("model")
        self.train.validate("train")
        self.ensemble.validate("ensemble")
        self.divergence.validate("divergence")

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        ph = doc["phantom"]
        ph["vessel_count_range"] = list(ph["vessel_count_range"])
        ph["vessel_radius_range"] = list(ph["vessel_radius_range"])
        if doc["model"]["dropout_rates"] is not None:
            doc["model"]["dropout_rates"] = list(doc["model"]["dropout_rates"])
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(", ", ": "), indent=1) + "\n"

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")
        doc.pop("threads")
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("ascii")).hexdigest()[:16]


_SECTION_TYPES = {
    "phantom": PhantomConfig,
    "model": MiniSegNetConfig,
    "train": TrainConfig,
    "ensemble": EnsembleConfig,
    "divergence": DivergenceConfig,
}

_TUPLE_FIELDS = {
    ("phantom", "vessel_count_range"),
    ("phantom", "vessel_radius_range"),
    ("model", "dropout_rates"),
}


def _coerce(section: str, name: str, value: Any, target_type) -> Any:
    if (section, name) in _TUPLE_FIELDS and value is not None:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{name}" if section else name, "expected a list")
        return tuple(value)
    return value


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) plain dict."""
    if not isinstance(doc, dict):
        raise ConfigError("config", "top-level config must be an object")
    top_fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key not in top_fields:
            raise ConfigError(key, "unknown config field")
        if key in _SECTION_TYPES:
            sec_type = _SECTION_TYPES[key]
            sec_fields = {f.name for f in dataclasses.fields(sec_type)}
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            sec_kwargs = {}
            for sub, sub_value in value.items():
                if sub not in sec_fields:
                    raise ConfigError(f"{key}.{sub}", "unknown config field")
                sec_kwargs[sub] = _coerce(key, sub, sub_value, None)
            kwargs[key] = sec_type(**sec_kwargs)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def apply_override(config: RunConfig, dotted: str, raw_value: str) -> RunConfig:
    """Apply one ``--set path=value`` override and return the new config."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    parts = dotted.split(".")
    if len(parts) == 1:
        name = parts[0]
        if name in _SECTION_TYPES or name not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ConfigError(dotted, "unknown config field")
        return dataclasses.replace(config, **{name: value})
    if len(parts) == 2:
        section, name = parts
        if section not in _SECTION_TYPES:
            raise ConfigError(dotted, "unknown config section")
        sec = getattr(config, section)
        if name not in {f.name for f in dataclasses.fields(sec)}:
            raise ConfigError(dotted, "unknown config field")
        value = _coerce(section, name, value, None)
        try:
            new_sec = dataclasses.replace(sec, **{name: value})
        except TypeError as exc:
            raise ConfigError(dotted, str(exc)) from exc
        return dataclasses.replace(config, **{section: new_sec})
    raise ConfigError(dotted, "override paths have at most two components")


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults <- optional JSON file <- --set overrides, then validate."""
    if path is not None:
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
        config = config_from_dict(doc)
    else:
        config = RunConfig()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        config = apply_override(config, dotted.strip(), raw.strip())
    return config
