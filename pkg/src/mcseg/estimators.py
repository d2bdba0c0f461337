"""Scikit-learn style estimators wrapping the segmentation models.

Both estimators follow the fit/predict convention with ``get_params`` /
``set_params`` / ``clone`` support so they compose with the wider ecosystem
(parameter search, pipelines operating on image stacks). X is an (N, H, W)
image stack, y the matching (N, H, W) binary mask stack; validation splits
travel as fit parameters because early stopping and member selection are part
of fitting, not of scoring.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .ensemble import (
    make_bag_plan,
    brier_matrix,
    build_combiner_inputs,
    correlation_matrix,
    member_probability_maps,
    combiner_model_config,
    select_members,
    train_candidates,
    train_combiner,
)
from .errors import ShapeError
from .nn import (
    McOutput,
    MiniSegNetConfig,
    TrainConfig,
    mc_predict,
    predict_proba,
    train,
    weights_to_module,
)
from .seeds import derive_seed
from .validation import as_float32, check_binary


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = as_float32(X, "X")
    y = check_binary(y, "y")
    if X.ndim != 3 or y.shape != X.shape:
        raise ShapeError(f"expected matching (N, H, W) stacks, got X {X.shape}, y {y.shape}")
    return X, y


class McDropoutSegmenter(BaseEstimator):
    """Single MC-dropout segmentation network (the baseline model).

    Parameters
    ----------
    model_config, train_config : architecture and optimization settings.
    t_passes : stochastic passes aggregated by ``predict_mc``.
    mc_seed : stream for inference-time dropout masks.
    """

    def __init__(
        self,
        model_config: MiniSegNetConfig | None = None,
        train_config: TrainConfig | None = None,
        t_passes: int = 30,
        mc_seed: int = 0,
    ):
        self.model_config = model_config
        self.train_config = train_config
        self.t_passes = t_passes
        self.mc_seed = mc_seed

    def _configs(self) -> tuple[MiniSegNetConfig, TrainConfig]:
        return (
            self.model_config if self.model_config is not None else MiniSegNetConfig(),
            self.train_config if self.train_config is not None else TrainConfig(),
        )

    def fit(self, X, y, X_val=None, y_val=None):
        """Train with early stopping on the (required) validation split."""
        if X_val is None or y_val is None:
            raise ShapeError("early stopping requires X_val/y_val")
        X, y = _check_xy(X, y)
        X_val, y_val = _check_xy(X_val, y_val)
        model_config, train_config = self._configs()
        result = train(model_config, X, y, X_val, y_val, train_config)
        self.result_ = result
        self.weights_ = result.weights
        self.history_ = result.history
        self.stopped_epoch_ = result.stopped_epoch
        self.model_ = weights_to_module(result.weights, model_config)
        return self

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self.model_, as_float32(X, "X"))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.float32)

    def predict_mc(self, X, t_passes: int | None = None) -> list[McOutput]:
        t = self.t_passes if t_passes is None else t_passes
        out = mc_predict(self.model_, as_float32(X, "X"), t, seed=self.mc_seed)
        return out if isinstance(out, list) else [out]


class StagedEnsembleSegmenter(BaseEstimator):
    """Bagged candidates + decorrelation selection + stacked combiner.

    After ``fit``, ``selection_report_`` carries the rho^2 table and chosen
    member indices, ``candidates_`` the per-candidate training results, and
    prediction routes member probability maps through the combiner network.
    """

    def __init__(
        self,
        model_config: MiniSegNetConfig | None = None,
        train_config: TrainConfig | None = None,
        m_candidates: int = 15,
        policy: str = "top_k",
        top_k: int = 3,
        theta: float = 0.5,
        include_image_channel: bool = False,
        t_passes: int = 30,
        mc_seed: int = 0,
        workers: int = 1,
    ):
        self.model_config = model_config
        self.train_config = train_config
        self.m_candidates = m_candidates
        self.policy = policy
        self.top_k = top_k
        self.theta = theta
        self.include_image_channel = include_image_channel
        self.t_passes = t_passes
        self.mc_seed = mc_seed
        self.workers = workers

    def _configs(self) -> tuple[MiniSegNetConfig, TrainConfig]:
        return (
            self.model_config if self.model_config is not None else MiniSegNetConfig(),
            self.train_config if self.train_config is not None else TrainConfig(),
        )

    def fit(self, X, y, X_vs1=None, y_vs1=None, X_vs2=None, y_vs2=None, roi=None):
        if any(v is None for v in (X_vs1, y_vs1, X_vs2, y_vs2, roi)):
            raise ShapeError("fit requires X_vs1/y_vs1 (early stopping), X_vs2/y_vs2 and roi (selection)")
        X, y = _check_xy(X, y)
        X_vs1, y_vs1 = _check_xy(X_vs1, y_vs1)
        X_vs2, y_vs2 = _check_xy(X_vs2, y_vs2)
        model_config, train_config = self._configs()

        plan = make_bag_plan(len(X), self.m_candidates, derive_seed(train_config.seed, "bagging"))
        self.bag_plan_ = plan
        self.candidates_ = train_candidates(
            plan, model_config, train_config, X, y, X_vs1, y_vs1, workers=self.workers
        )
        candidate_models = [
            weights_to_module(c.weights, model_config) for c in self.candidates_
        ]
        self.brier_matrix_ = brier_matrix(candidate_models, X_vs2, y_vs2, roi)
        self.correlation_matrix_ = correlation_matrix(self.brier_matrix_)
        self.selection_report_ = select_members(
            self.correlation_matrix_, policy=self.policy, top_k=self.top_k, theta=self.theta
        )
        selected = self.selection_report_.selected
        self.member_models_ = [candidate_models[i] for i in selected]

        maps_train = member_probability_maps(self.member_models_, X)
        maps_vs1 = member_probability_maps(self.member_models_, X_vs1)
        self.combiner_result_ = train_combiner(
            maps_train,
            y,
            maps_vs1,
            y_vs1,
            model_config,
            train_config,
            train_images=X if self.include_image_channel else None,
            vs1_images=X_vs1 if self.include_image_channel else None,
        )
        combo_config = combiner_model_config(
            model_config, len(selected), self.include_image_channel
        )
        self.combiner_model_ = weights_to_module(self.combiner_result_.weights, combo_config)
        return self

    def _combiner_inputs(self, X) -> np.ndarray:
        X = as_float32(X, "X")
        maps = member_probability_maps(self.member_models_, X)
        return build_combiner_inputs(maps, X if self.include_image_channel else None)

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self.combiner_model_, self._combiner_inputs(X))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.float32)

    def predict_mc(self, X, t_passes: int | None = None) -> list[McOutput]:
        t = self.t_passes if t_passes is None else t_passes
        out = mc_predict(self.combiner_model_, self._combiner_inputs(X), t, seed=self.mc_seed)
        return out if isinstance(out, list) else [out]
