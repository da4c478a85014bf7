"""Group-wise object co-segmentation.

Given N images sharing an object category, the network produces per-image
foreground masks.  A spectral spatial modulator clusters the group's fused
feature descriptors into foreground/background heatmaps; a hierarchical
second-order pooling branch learns a channel selector under co-category
supervision; both modulate a pyramid segmentation head trained jointly with
a three-part loss.
"""

from .backbone import BackboneConfig, FeaturePyramid
from .data import ImageGroup, SynthConfig, gen_synthetic, load_dataset
from .gradcheck import grad_check
from .metrics import MetricReport, evaluate, mask_scores
from .model import CosegModel, ModelConfig
from .tensor import Graph, Tensor, backward
from .train import TrainConfig, load_model, save_model, train

__all__ = [
    "BackboneConfig", "CosegModel", "FeaturePyramid", "Graph", "ImageGroup",
    "MetricReport", "ModelConfig", "SynthConfig", "Tensor", "TrainConfig",
    "backward", "evaluate", "gen_synthetic", "grad_check", "load_dataset",
    "load_model", "mask_scores", "save_model", "train",
]

__version__ = "0.1.0"
