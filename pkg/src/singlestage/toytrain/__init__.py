"""Desk-scale end-to-end harness on synthetic shapes."""

from .data import SHAPES, ToyDataset, ToyDatasetConfig, gen_dataset
from .model import ModelConfig, ToyNet
from .train import (Metrics, TrainConfig, TrainingError, eval_iou, evaluate, predict,
                    predict_labels, train)

__all__ = [
    "SHAPES", "ToyDataset", "ToyDatasetConfig", "gen_dataset", "ModelConfig", "ToyNet",
    "Metrics", "TrainConfig", "TrainingError", "eval_iou", "evaluate", "predict",
    "predict_labels", "train",
]
