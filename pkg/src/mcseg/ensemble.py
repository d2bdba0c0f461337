"""Three-stage ensemble: bagged overproduction, decorrelation selection,
stacked combiner.

Stage 1 trains M candidates on with-replacement resamples of the training
split. Stage 2 scores every candidate on the VS2 split (per-image mean Brier
score inside the ROI), builds the Pearson correlation matrix R of those error
series, and computes each candidate's plural-correlation coefficient

    rho_i^2 = r_i^T R_{-i}^{-1} r_i

where R_{-i} drops row/column i and r_i is the removed column. Low rho^2
means the candidate's errors are poorly explained by the others, i.e. it adds
diversity. Selection keeps either everything below a threshold or the K
lowest. Stage 3 trains a fresh network of the same family whose input
channels are the selected members' deterministic probability maps.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SelectionError, ShapeError
from .nn import (
    MiniSegNetConfig,
    TrainConfig,
    TrainResult,
    predict_proba,
    train,
    weights_to_module,
)
from .seeds import derive_seed
from .validation import check_nonempty_roi, check_unit_interval

_RIDGE = 1e-8


@dataclass
class BagPlan:
    """Pre-drawn with-replacement index lists, one per candidate."""

    n_tr: int
    m_candidates: int
    seed: int
    index_lists: list[np.ndarray] = field(default_factory=list)


@dataclass
class SelectionReport:
    """Plural-correlation coefficients and the resulting member choice."""

    rho2: list[float]
    clamped: list[bool]
    policy: str
    policy_value: float
    selected: list[int]

    def to_json(self) -> str:
        doc = {
            "rho2": [float(v) for v in self.rho2],
            "clamped": [bool(c) for c in self.clamped],
            "policy": self.policy,
            "policy_value": self.policy_value,
            "selected": [int(i) for i in self.selected],
        }
        return json.dumps(doc, sort_keys=True, separators=(", ", ": "), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionReport":
        doc = json.loads(text)
        return cls(
            rho2=[float(v) for v in doc["rho2"]],
            clamped=[bool(c) for c in doc["clamped"]],
            policy=doc["policy"],
            policy_value=doc["policy_value"],
            selected=[int(i) for i in doc["selected"]],
        )


def make_bag_plan(n_tr: int, m_candidates: int, seed: int) -> BagPlan:
    """M independent with-replacement draws of size n_tr over train indices."""
    if n_tr < 1:
        raise ConfigError("bagging.n_tr", "must be >= 1")
    if m_candidates < 1:
        raise ConfigError("ensemble.m_candidates", "must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    lists = [rng.integers(0, n_tr, size=n_tr) for _ in range(m_candidates)]
    return BagPlan(n_tr=n_tr, m_candidates=m_candidates, seed=seed, index_lists=lists)


def candidate_seed(train_seed: int, index: int) -> int:
    return derive_seed(train_seed, "candidate", index)


def _train_one_candidate(args) -> TrainResult:
    (model_config, train_config, images, masks, vs1_images, vs1_masks) = args
    return train(model_config, images, masks, vs1_images, vs1_masks, train_config)


def train_candidates(
    bag_plan: BagPlan,
    model_config: MiniSegNetConfig,
    train_config: TrainConfig,
    train_images: np.ndarray,
    train_masks: np.ndarray,
    vs1_images: np.ndarray,
    vs1_masks: np.ndarray,
    workers: int = 1,
) -> list[TrainResult]:
    """Train every candidate on its bag; candidate i's seed derives from
    (train seed, i), so results do not depend on scheduling."""
    if len(train_images) != bag_plan.n_tr:
        raise ShapeError(
            f"bag plan was drawn for n_tr={bag_plan.n_tr}, got {len(train_images)} images"
        )
    tasks = []
    for i, bag in enumerate(bag_plan.index_lists):
        cfg_i = dataclasses.replace(train_config, seed=candidate_seed(train_config.seed, i))
        tasks.append(
            (model_config, cfg_i, train_images[bag], train_masks[bag], vs1_images, vs1_masks)
        )
    if workers <= 1 or len(tasks) == 1:
        return [_train_one_candidate(t) for t in tasks]
    # threads suffice: tensor ops release the GIL, and every candidate's
    # randomness is pre-assigned, so scheduling cannot change results
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_one_candidate, tasks))


def brier_matrix(
    candidates: list,
    vs2_images: np.ndarray,
    vs2_masks: np.ndarray,
    roi: np.ndarray,
    model_config: MiniSegNetConfig | None = None,
) -> np.ndarray:
    """E[i, j] = mean over ROI pixels of (prob_i(x_j) - label(x_j))^2.

    ``candidates`` may be live modules, ModelWeights (then ``model_config``
    rebuilds them), or precomputed (N, H, W) probability-map stacks.
    Model probabilities come from deterministic single passes.
    """
    if len(vs2_images) == 0:
        raise ShapeError("VS2 split must be non-empty")
    mask = check_nonempty_roi(roi) == 1
    rows = []
    for cand in candidates:
        probs = _candidate_probability_maps(cand, vs2_images, model_config)
        errors = (probs[:, mask].astype(np.float64) - vs2_masks[:, mask].astype(np.float64)) ** 2
        rows.append(errors.mean(axis=1))
    return np.stack(rows)


def _candidate_probability_maps(candidate, images, model_config) -> np.ndarray:
    if isinstance(candidate, np.ndarray):
        if candidate.shape != images.shape:
            raise ShapeError(
                f"precomputed maps shape {candidate.shape} != images {images.shape}"
            )
        return candidate
    model = candidate
    if not hasattr(candidate, "forward"):
        if model_config is None:
            raise ConfigError("candidates", "model_config required for ModelWeights inputs")
        model = weights_to_module(candidate, model_config)
    return predict_proba(model, images)


def correlation_matrix(brier: np.ndarray) -> np.ndarray:
    """Pearson correlation of candidate error series across VS2 images."""
    e = np.asarray(brier, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ShapeError(f"Brier matrix must be (M, n_vs2), got {e.shape}")
    if e.shape[1] < 2:
        raise ShapeError("need at least 2 VS2 images for correlations")
    centered = e - e.mean(axis=1, keepdims=True)
    std = centered.std(axis=1)
    for i, s in enumerate(std):
        if s == 0:
            raise SelectionError(
                f"candidate {i} has a constant Brier series (zero variance); "
                "correlations are undefined for a degenerate constant model"
            )
    r = (centered @ centered.T) / (e.shape[1] * np.outer(std, std))
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


def plural_correlation(r_matrix: np.ndarray, index: int) -> float:
    value, _ = _plural_correlation_flagged(r_matrix, index)
    return value


def _plural_correlation_flagged(r_matrix: np.ndarray, index: int) -> tuple[float, bool]:
    r = np.asarray(r_matrix, dtype=np.float64)
    m = r.shape[0]
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ShapeError(f"correlation matrix must be square, got {r.shape}")
    if m < 2:
        raise SelectionError("plural correlation needs M >= 2 candidates")
    if not (0 <= index < m):
        raise ShapeError(f"candidate index {index} out of range for M={m}")
    keep = [j for j in range(m) if j != index]
    sub = r[np.ix_(keep, keep)]
    cross = r[index, keep]
    try:
        solved = np.linalg.solve(sub, cross)
        if not np.all(np.isfinite(solved)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        # bagging can produce near-duplicate candidates; regularize and retry
        solved = np.linalg.solve(sub + _RIDGE * np.eye(m - 1), cross)
    value = float(cross @ solved)
    clamped = value < 0.0 or value > 1.0
    return min(max(value, 0.0), 1.0), clamped


def select_members(
    r_matrix: np.ndarray,
    policy: str = "top_k",
    top_k: int = 3,
    theta: float = 0.5,
) -> SelectionReport:
    """Choose ensemble members by plural correlation.

    ``threshold`` keeps every candidate with rho^2 <= theta; ``top_k`` keeps
    the K smallest (ties broken toward the smaller candidate index). The
    coefficients are computed once on the full matrix; the screen is a single
    pass, not an iterative elimination.
    """
    r = np.asarray(r_matrix, dtype=np.float64)
    m = r.shape[0]
    values = []
    flags = []
    for i in range(m):
        v, c = _plural_correlation_flagged(r, i)
        values.append(v)
        flags.append(c)
    rho2 = np.array(values)

    if policy == "top_k":
        if not (1 <= top_k <= m):
            raise ConfigError("ensemble.top_k", f"must lie in [1, {m}]")
        order = np.argsort(rho2, kind="stable")  # stable sort = index tie-break
        selected = sorted(int(i) for i in order[:top_k])
        policy_value = float(top_k)
    elif policy == "threshold":
        selected = [int(i) for i in range(m) if rho2[i] <= theta]
        if not selected:
            raise SelectionError(
                f"threshold theta={theta} selects zero members; use the top_k policy instead"
            )
        policy_value = float(theta)
    else:
        raise ConfigError("ensemble.policy", f"unknown policy '{policy}'")

    return SelectionReport(
        rho2=[float(v) for v in values],
        clamped=flags,
        policy=policy,
        policy_value=policy_value,
        selected=selected,
    )


def build_combiner_inputs(
    member_maps: np.ndarray | list[np.ndarray],
    images: np.ndarray | None = None,
) -> np.ndarray:
    """Stack member probability maps as channels, ascending member order.

    ``member_maps`` is (K, N, H, W); the raw image becomes an extra trailing
    channel only when ``images`` is passed (member outputs alone are the
    default input).
    """
    maps = np.stack([check_unit_interval(m, "member map") for m in member_maps])
    if maps.ndim != 4:
        raise ShapeError(f"member maps must stack to (K, N, H, W), got {maps.shape}")
    stacked = np.transpose(maps, (1, 0, 2, 3)).astype(np.float32)
    if images is not None:
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.shape != stacked.shape[:1] + stacked.shape[2:]:
            raise ShapeError(
                f"images shape {imgs.shape} incompatible with member maps {maps.shape}"
            )
        stacked = np.concatenate([stacked, imgs[:, None]], axis=1)
    return stacked


def member_probability_maps(
    members: list,
    images: np.ndarray,
    model_config: MiniSegNetConfig | None = None,
) -> np.ndarray:
    """Deterministic probability maps for each member, shape (K, N, H, W)."""
    return np.stack(
        [_candidate_probability_maps(m, images, model_config) for m in members]
    )


_COMBINER_LOGIT_BIAS = -2.5  # start near the members' calibration (rare foreground)


def combiner_model_config(base: MiniSegNetConfig, k_members: int, include_image: bool) -> MiniSegNetConfig:
    return MiniSegNetConfig(
        in_channels=k_members + (1 if include_image else 0),
        base_channels=base.base_channels,
        depth=base.depth,
        dropout_rate=base.dropout_rate,
        dropout_rates=base.dropout_rates,
        use_attention=base.use_attention,
        logit_bias_init=_COMBINER_LOGIT_BIAS,
    )


def train_combiner(
    member_maps_train: np.ndarray,
    train_masks: np.ndarray,
    member_maps_vs1: np.ndarray,
    vs1_masks: np.ndarray,
    base_model_config: MiniSegNetConfig,
    train_config: TrainConfig,
    train_images: np.ndarray | None = None,
    vs1_images: np.ndarray | None = None,
) -> TrainResult:
    """Train the stacked combiner on member outputs with the shared loss and
    early-stopping machinery. Pass images to append the raw-image channel."""
    include_image = train_images is not None
    x_train = build_combiner_inputs(member_maps_train, train_images)
    x_vs1 = build_combiner_inputs(member_maps_vs1, vs1_images)
    cfg = combiner_model_config(base_model_config, member_maps_train.shape[0], include_image)
    combo_train = dataclasses.replace(train_config, seed=derive_seed(train_config.seed, "combiner"))
    return train(cfg, x_train, train_masks, x_vs1, vs1_masks, combo_train)
