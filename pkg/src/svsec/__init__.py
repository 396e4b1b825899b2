"""Dual-branch endoscopy classifier: shifted-window transformer plus saliency-fused VGG."""

from .cnn import CnnBranch, CnnConfig
from .data import ImageSet, SplitManifest, load_image, scan_dataset, stratified_split
from .metrics import EvalReport, PredictionSet, evaluate, render_report
from .model import ModelConfig, SVSECModel, load_checkpoint, reduced_config, save_checkpoint
from .saliency import SaliencyMap, compute_saliency, resize_map
from .swin import SwinBranch, SwinConfig
from .tensor_core import Rng, Tape, Tensor, backward, grad_check, precision
from .train import TrainHyper, train

__version__ = "0.1.0"
