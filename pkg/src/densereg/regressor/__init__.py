"""Hand-written fully-convolutional quantized regressor and cascade."""
from .cascade import CascadeModel, forward_cascade, heatmap_loss, render_heatmap_targets, stage2_probe
from .checkpoint import load_checkpoint, save_checkpoint
from .model import HeadOutputs, TinyFCN, dense_loss, forward, oracle_heads, predict_field
from .train import TrainConfig, TrainingError, TrainLog, make_batch, train

__all__ = [
    "CascadeModel",
    "HeadOutputs",
    "TinyFCN",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "dense_loss",
    "forward",
    "forward_cascade",
    "heatmap_loss",
    "load_checkpoint",
    "make_batch",
    "oracle_heads",
    "predict_field",
    "render_heatmap_targets",
    "save_checkpoint",
    "stage2_probe",
    "train",
]
