"""Weight persistence: JSON manifest + raw little-endian float32 blob.

The manifest records the architecture fingerprint and, per parameter, its
name, shape, and byte offset into the blob. Loading verifies the fingerprint
against the expected architecture. Integer bookkeeping buffers (batch-norm
step counters) are not persisted; they do not affect inference.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError, ShapeError
from .network import MiniSegNet, MiniSegNetConfig, build_model

WEIGHTS_JSON = "weights.json"
WEIGHTS_BLOB = "weights.bin"


@dataclass
class ModelWeights:
    """Named float32 parameter arrays plus the architecture fingerprint."""

    fingerprint: str
    arrays: dict[str, np.ndarray]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and list(self.arrays) == list(other.arrays)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def weights_from_module(model: MiniSegNet) -> ModelWeights:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        if not tensor.dtype.is_floating_point:
            continue  # num_batches_tracked and friends
        arrays[name] = tensor.detach().cpu().numpy().astype("<f4", copy=True)
    return ModelWeights(fingerprint=model.config.fingerprint(), arrays=arrays)


def weights_to_module(weights: ModelWeights, config: MiniSegNetConfig) -> MiniSegNet:
    if weights.fingerprint != config.fingerprint():
        raise ConfigError(
            "weights.fingerprint",
            f"weights were saved for architecture {weights.fingerprint}, "
            f"expected {config.fingerprint()}",
        )
    model = build_model(config)
    state = model.state_dict()
    for name, arr in weights.arrays.items():
        if name not in state:
            raise ShapeError(f"unknown parameter '{name}' in weights")
        if tuple(state[name].shape) != arr.shape:
            raise ShapeError(
                f"parameter '{name}' shape {arr.shape} != expected {tuple(state[name].shape)}"
            )
        state[name] = torch.from_numpy(np.ascontiguousarray(arr))
    for name, tensor in state.items():
        if not tensor.dtype.is_floating_point:
            state[name] = torch.zeros_like(tensor)
    model.load_state_dict(state)
    model.eval()
    return model


def save_weights(weights: ModelWeights, directory: str | os.PathLike) -> None:
    out = os.fspath(directory)
    os.makedirs(out, exist_ok=True)
    params = []
    offset = 0
    chunks: list[bytes] = []
    for name, arr in weights.arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"fingerprint": weights.fingerprint, "params": params}
    with open(os.path.join(out, WEIGHTS_JSON), "w", encoding="ascii") as f:
        json.dump(manifest, f, sort_keys=True, separators=(", ", ": "), indent=1)
        f.write("\n")
    with open(os.path.join(out, WEIGHTS_BLOB), "wb") as f:
        f.write(b"".join(chunks))


def load_weights(directory: str | os.PathLike) -> ModelWeights:
    base = os.fspath(directory)
    with open(os.path.join(base, WEIGHTS_JSON), encoding="ascii") as f:
        manifest = json.load(f)
    with open(os.path.join(base, WEIGHTS_BLOB), "rb") as f:
        blob = f.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise ShapeError(
                f"weights blob truncated: parameter '{entry['name']}' needs bytes "
                f"[{start}, {end}) of {len(blob)}"
            )
        arrays[entry["name"]] = (
            np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
        )
    return ModelWeights(fingerprint=manifest["fingerprint"], arrays=arrays)
