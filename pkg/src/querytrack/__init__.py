"""Open-vocabulary multi-object tracking on synthetic desk-scale scenes.

End-to-end: a category bank of paired text/image embeddings, a fusion
encoder over rasterized scenes, a dual-branch decoder with attention
isolation, cross-frame query propagation, Hungarian supervision, a track
lifecycle runtime, and CLEAR-style evaluation.
"""

from .autodiff import Tensor, ParameterStore, backward, finite_diff_check, no_grad
from .bank import CategoryBank, build_surrogate_bank, sample_categories
from .config import BankConfig, RunConfig, load_config, save_config
from .decoder import Decoder, LayerOutput, QuerySet, ROLE_DETECT, ROLE_TRACK
from .encoder import FeatureGrid, FusionEncoder, TextFeatures, rasterize_scene
from .geometry import Box, box_from_corners, encode_boxes, giou, iou
from .isolation import category_isolation_mask, content_isolation_mask, difference_matrix
from .losses import FrameTargets, LossWeights, frame_loss, hungarian_match, match_frame, sequence_loss
from .metrics import MetricReport, dump_from_scenario, evaluate
from .model import ModelConfig, TrackingModel
from .runtime import RuntimeConfig, TrackDump, TrackLedger, Tracker, run_sequence
from .scenario import AugmentConfig, Scenario, dynamic_mosaic, generate_scenario, sampler_schedule
from .training import TrainConfig, clip_loss, fit

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ParameterStore", "backward", "finite_diff_check", "no_grad",
    "CategoryBank", "build_surrogate_bank", "sample_categories",
    "BankConfig", "RunConfig", "load_config", "save_config",
    "Decoder", "LayerOutput", "QuerySet", "ROLE_DETECT", "ROLE_TRACK",
    "FeatureGrid", "FusionEncoder", "TextFeatures", "rasterize_scene",
    "Box", "box_from_corners", "encode_boxes", "giou", "iou",
    "category_isolation_mask", "content_isolation_mask", "difference_matrix",
    "FrameTargets", "LossWeights", "frame_loss", "hungarian_match",
    "match_frame", "sequence_loss",
    "MetricReport", "dump_from_scenario", "evaluate",
    "ModelConfig", "TrackingModel",
    "RuntimeConfig", "TrackDump", "TrackLedger", "Tracker", "run_sequence",
    "AugmentConfig", "Scenario", "dynamic_mosaic", "generate_scenario",
    "sampler_schedule",
    "TrainConfig", "clip_loss", "fit",
    "__version__",
]
