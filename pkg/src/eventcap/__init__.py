"""Dense event detection and captioning for long video streams.

A single differentiable graph proposes candidate event segments at many
temporal scales, pools a descriptor for each one, and decodes a sentence per
event; a recurrent controller threads the previously emitted sentence into
the next so the narrative stays coherent across the video.
"""

from .autodiff import ContractError, ShapeError, Tensor, backward, zero_grad
from .captioner import Vocabulary, tokenize
from .config import AppConfig, apply_overrides, default_config, load_config
from .encoder import VideoTensor
from .evaluation import (bleu_n, cider_d, dense_caption_eval, meteor_lite,
                         proposal_eval, recall_curve, rouge_l)
from .inference import assemble_model, describe_gt_segments, run_inference
from .model import FULL_SCALE, JointModel, ModelConfig, VideoAnnotation
from .pooling import FeatureDump, FeatureRecord, load_dump, save_dump
from .proposals import AnchorGrid, Segment, nms, tiou
from .synthetic import Dataset, GenConfig, generate
from .training import (Checkpoint, DivergenceError, TrainConfig, build_vocab,
                       extract_gt_features, load_checkpoint, pretrain_captioner,
                       pretrain_spn, save_checkpoint, train_joint)

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid", "AppConfig", "Checkpoint", "ContractError", "Dataset",
    "DivergenceError", "FULL_SCALE", "FeatureDump", "FeatureRecord", "GenConfig",
    "JointModel", "ModelConfig", "Segment", "ShapeError", "Tensor", "TrainConfig",
    "VideoAnnotation", "VideoTensor", "Vocabulary", "apply_overrides",
    "assemble_model", "backward", "bleu_n", "build_vocab", "cider_d",
    "default_config", "dense_caption_eval", "describe_gt_segments",
    "extract_gt_features", "generate", "load_checkpoint", "load_config",
    "load_dump", "meteor_lite", "nms", "pretrain_captioner", "pretrain_spn",
    "proposal_eval", "recall_curve", "rouge_l", "run_inference",
    "save_checkpoint", "save_dump", "tiou", "tokenize", "train_joint",
    "zero_grad",
]
