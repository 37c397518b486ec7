"""Weakly-supervised audio-visual video parsing with messenger-guided mid-fusion."""

from .data import SynthConfig, VideoSample, generate_synthetic, read_dataset, write_dataset
from .metrics import EvalReport, binarize, evaluate
from .model import MMT, ModelConfig, PredictionSet
from .objectives import WeakLabels, bce, capc_loss, classification_loss, total_loss
from .tensor import Tensor, backward, grad_check
from .train import Checkpoint, TrainConfig, load_checkpoint, run_pipeline, save_checkpoint

__version__ = "0.1.0"
