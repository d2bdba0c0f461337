"""Mini encoder-decoder segmentation network with MC dropout.

The network emits a segmentation logit map and a log-variance map from a
shared decoder trunk. Dropout sits after decoder ReLUs only and can stay
active at inference for Monte Carlo sampling; batch norm always uses running
statistics outside training. Tensor math runs on torch (CPU, single thread
for bit-reproducibility); the public surface speaks numpy float32.
"""

from .network import MiniSegNet, MiniSegNetConfig, build_model
from .loss import attenuated_bce_loss, bce_with_logits
from .train import TrainConfig, TrainResult, train, train_step, evaluate_bce
from .inference import McOutput, mc_predict, predict_proba
from .weights_io import ModelWeights, load_weights, save_weights, weights_from_module, weights_to_module

__all__ = [
    "MiniSegNet",
    "MiniSegNetConfig",
    "build_model",
    "attenuated_bce_loss",
    "bce_with_logits",
    "TrainConfig",
    "TrainResult",
    "train",
    "train_step",
    "evaluate_bce",
    "McOutput",
    "mc_predict",
    "predict_proba",
    "ModelWeights",
    "save_weights",
    "load_weights",
    "weights_from_module",
    "weights_to_module",
]
