"""Trainable detectors, calibration, the hard-label facade, and attribution."""

from .attribution import global_importance, tree_shap
from .detector import Detector, calibrate_threshold, predict_label, predict_score
from .ffnn import FfnnConfig, FfnnModel, loss_and_grad, train_ffnn
from .gbdt import GbdtConfig, GbdtModel, Tree, train_gbdt
from .linear import LinearConfig, LinearModel, train_linear
from .store import (
    KIND_FFNN,
    KIND_GBDT,
    KIND_LINEAR,
    KIND_POLICY,
    load_container,
    load_model,
    save_container,
    save_model,
)

__all__ = [
    "Detector", "calibrate_threshold", "predict_label", "predict_score",
    "GbdtConfig", "GbdtModel", "Tree", "train_gbdt",
    "LinearConfig", "LinearModel", "train_linear",
    "FfnnConfig", "FfnnModel", "train_ffnn", "loss_and_grad",
    "tree_shap", "global_importance",
    "save_model", "load_model", "save_container", "load_container",
    "KIND_GBDT", "KIND_LINEAR", "KIND_FFNN", "KIND_POLICY",
]
