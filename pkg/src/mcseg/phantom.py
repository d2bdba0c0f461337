"""Synthetic vessel-phantom dataset.

Each sample is a speckled grayscale image containing 1-3 elliptical vessels
drawn as dark lumens with bright walls, qualitatively mimicking transverse
ultrasound. The lumen pixels form the ground-truth mask. A configurable
fraction of multi-vessel images places two vessels nearly touching, which is
the failure mode that makes per-pixel uncertainty interesting downstream.

Generation is deterministic: every sample's appearance is a pure function of
(config, sample_seed), and sample seeds are pre-assigned as
``master_seed XOR counter`` so the dataset is reproducible byte-for-byte
independent of generation order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .imageio import read_image, write_pgm

MANIFEST_VERSION = 1

_LUMEN_INTENSITY = 0.08
_WALL_INTENSITY = 0.95
_BACKGROUND_INTENSITY = 0.55
_WALL_WIDTH_PX = 2.0
# blood is nearly anechoic: speckle lives in the surrounding tissue, with only
# a residual fraction inside lumens and walls
_VESSEL_SPECKLE_FRACTION = 0.25


@dataclass(frozen=True)
class PhantomConfig:
    """Knobs of the synthetic dataset generator."""

    image_size: int = 64
    n_train: int = 256
    n_vs1: int = 64
    n_vs2: int = 64
    n_test: int = 128
    vessel_count_range: tuple[int, int] = (1, 3)
    vessel_radius_range: tuple[float, float] = (0.06, 0.18)
    speckle_sigma: float = 0.15
    adjacency_prob: float = 0.2
    master_seed: int = 7

    def validate(self, prefix: str = "phantom") -> None:
        if self.image_size < 16:
            raise ConfigError(f"{prefix}.image_size", "must be >= 16")
        for name in ("n_train", "n_vs1", "n_vs2", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "split sizes must be >= 1")
        lo, hi = self.vessel_count_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"{prefix}.vessel_count_range", "need 1 <= lo <= hi")
        rlo, rhi = self.vessel_radius_range
        if not (0.0 < rlo <= rhi < 0.5):
            raise ConfigError(
                f"{prefix}.vessel_radius_range", "radii must lie in (0, 0.5)"
            )
        if self.speckle_sigma < 0:
            raise ConfigError(f"{prefix}.speckle_sigma", "must be >= 0")
        if not (0.0 <= self.adjacency_prob <= 1.0):
            raise ConfigError(f"{prefix}.adjacency_prob", "must lie in [0, 1]")


@dataclass(frozen=True)
class Vessel:
    """One rendered ellipse: center, semi-axes (pixels), rotation (radians)."""

    cx: float
    cy: float
    rx: float
    ry: float
    theta: float


@dataclass
class Sample:
    """One phantom image with its lumen mask, evaluation ROI, and id."""

    image: np.ndarray
    mask: np.ndarray
    roi: np.ndarray
    id: str
    vessels: tuple[Vessel, ...] = ()


@dataclass
class DatasetManifest:
    """Binds generated sample ids to their splits; serialized as JSON."""

    version: int
    config: PhantomConfig
    splits: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "config": dataclasses.asdict(self.config),
            "splits": self.splits,
        }
        return json.dumps(doc, sort_keys=True, separators=(", ", ": "), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        cfg = doc["config"]
        for key in ("vessel_count_range", "vessel_radius_range"):
            cfg[key] = tuple(cfg[key])
        return cls(
            version=doc["version"],
            config=PhantomConfig(**cfg),
            splits={k: list(v) for k, v in doc["splits"].items()},
        )


def make_roi(config: PhantomConfig) -> np.ndarray:
    """Centered full-width band of height ``image_size // 2``.

    The band is label-independent so restricting evaluation to it cannot leak
    ground truth, and it covers exactly half the image.
    """
    size = config.image_size
    roi = np.zeros((size, size), dtype=np.float32)
    top = size // 4
    roi[top : top + size // 2, :] = 1.0
    return roi


def _ellipse_mask(size: int, v: Vessel, grow: float = 0.0) -> np.ndarray:
    """Pixels whose integer-grid centers fall inside the (grown) ellipse."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs - v.cx
    dy = ys - v.cy
    c, s = math.cos(v.theta), math.sin(v.theta)
    u = dx * c + dy * s
    w = -dx * s + dy * c
    rx, ry = v.rx + grow, v.ry + grow
    return (u / rx) ** 2 + (w / ry) ** 2 <= 1.0


def _draw_vessel_params(rng: np.random.Generator, config: PhantomConfig) -> Vessel:
    size = config.image_size
    rlo, rhi = config.vessel_radius_range
    rx = rng.uniform(rlo, rhi) * size
    ry = rng.uniform(rlo, rhi) * size
    theta = rng.uniform(0.0, math.pi)
    margin = max(rx, ry) + _WALL_WIDTH_PX + 1.0
    margin = min(margin, size / 2 - 1)
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    return Vessel(cx=cx, cy=cy, rx=rx, ry=ry, theta=theta)


def _place_adjacent(
    rng: np.random.Generator, config: PhantomConfig, first: Vessel
) -> Vessel:
    """A second vessel whose wall sits within ~2 px of the first vessel's."""
    size = config.image_size
    rlo, rhi = config.vessel_radius_range
    rx = rng.uniform(rlo, rhi) * size
    ry = rng.uniform(rlo, rhi) * size
    theta = rng.uniform(0.0, math.pi)
    direction = rng.uniform(0.0, 2.0 * math.pi)
    gap = rng.uniform(0.0, 2.0)
    dist = max(first.rx, first.ry) + max(rx, ry) + 2.0 * _WALL_WIDTH_PX + gap
    cx = min(max(first.cx + dist * math.cos(direction), 1.0), size - 2.0)
    cy = min(max(first.cy + dist * math.sin(direction), 1.0), size - 2.0)
    return Vessel(cx=cx, cy=cy, rx=rx, ry=ry, theta=theta)


def generate_sample(
    config: PhantomConfig, sample_seed: int, sample_id: str = ""
) -> Sample:
    """Render one phantom image; deterministic in (config, sample_seed)."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    size = config.image_size

    lo, hi = config.vessel_count_range
    count = int(rng.integers(lo, hi + 1))
    vessels = [_draw_vessel_params(rng, config)]
    adjacent = count >= 2 and rng.random() < config.adjacency_prob
    if adjacent:
        vessels.append(_place_adjacent(rng, config, vessels[0]))
    while len(vessels) < count:
        vessels.append(_draw_vessel_params(rng, config))

    image = np.full((size, size), _BACKGROUND_INTENSITY, dtype=np.float64)
    mask = np.zeros((size, size), dtype=bool)
    vessel_area = np.zeros((size, size), dtype=bool)
    for v in vessels:
        lumen = _ellipse_mask(size, v)
        wall = _ellipse_mask(size, v, grow=_WALL_WIDTH_PX) & ~lumen
        image[wall] = _WALL_INTENSITY
        image[lumen] = _LUMEN_INTENSITY
        mask |= lumen
        vessel_area |= lumen | wall

    noise = rng.normal(0.0, 1.0, size=(size, size))
    if config.speckle_sigma > 0:
        amplitude = np.where(vessel_area, _VESSEL_SPECKLE_FRACTION, 1.0)
        image = image + config.speckle_sigma * amplitude * noise
    image = np.clip(image, 0.0, 1.0)

    return Sample(
        image=image.astype(np.float32),
        mask=mask.astype(np.float32),
        roi=make_roi(config),
        id=sample_id,
        vessels=tuple(vessels),
    )


SPLIT_NAMES = ("train", "vs1", "vs2", "test")


def sample_seed_for(config: PhantomConfig, counter: int) -> int:
    """Pre-assigned per-sample seed stream: master_seed XOR counter."""
    return (config.master_seed ^ counter) & 0xFFFFFFFFFFFFFFFF


def generate_dataset(config: PhantomConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    """Generate all splits under ``out_dir`` and write the manifest.

    Layout: ``<out_dir>/<split>/<id>.pgm`` + ``<id>.mask.pgm``, the shared ROI
    at ``<out_dir>/roi.pgm``, and ``<out_dir>/manifest.json``.
    """
    config.validate()
    out = os.fspath(out_dir)
    os.makedirs(out, exist_ok=True)

    sizes = {
        "train": config.n_train,
        "vs1": config.n_vs1,
        "vs2": config.n_vs2,
        "test": config.n_test,
    }
    manifest = DatasetManifest(version=MANIFEST_VERSION, config=config)
    counter = 0
    for split in SPLIT_NAMES:
        split_dir = os.path.join(out, split)
        os.makedirs(split_dir, exist_ok=True)
        ids: list[str] = []
        for i in range(sizes[split]):
            sid = f"{split}-{i:04d}"
            sample = generate_sample(config, sample_seed_for(config, counter), sid)
            try:
                write_pgm(os.path.join(split_dir, f"{sid}.pgm"), sample.image)
                write_pgm(os.path.join(split_dir, f"{sid}.mask.pgm"), sample.mask)
            except OSError as exc:
                raise OSError(f"failed writing sample files for {sid} under {split_dir}: {exc}") from exc
            ids.append(sid)
            counter += 1
        manifest.splits[split] = ids

    write_pgm(os.path.join(out, "roi.pgm"), make_roi(config))
    with open(os.path.join(out, "manifest.json"), "w", encoding="ascii") as f:
        f.write(manifest.to_json())
    return manifest


def load_manifest(data_dir: str | os.PathLike) -> DatasetManifest:
    with open(os.path.join(os.fspath(data_dir), "manifest.json"), encoding="ascii") as f:
        return DatasetManifest.from_json(f.read())


def load_split(
    data_dir: str | os.PathLike, manifest: DatasetManifest, split: str
) -> tuple[np.ndarray, np.ndarray]:
    """Load one split as stacked (N, H, W) image and mask arrays."""
    base = os.fspath(data_dir)
    images, masks = [], []
    for sid in manifest.splits[split]:
        images.append(read_image(os.path.join(base, split, f"{sid}.pgm")))
        masks.append(read_image(os.path.join(base, split, f"{sid}.mask.pgm")))
    return np.stack(images), np.stack(masks)


def load_roi(data_dir: str | os.PathLike) -> np.ndarray:
    return read_image(os.path.join(os.fspath(data_dir), "roi.pgm"))
