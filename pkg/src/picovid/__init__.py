"""picovid: a desk-scale multimodal conditioned video generator.

A small dual-stream diffusion transformer trained with flow matching on a
synthetic moving-disk world, conditioned on text, reference images
(pseudo-frame channel concatenation), audio (gated frame-local cross
attention), and pose (channel concatenation), with decoupled specialist
training merged by weight interpolation before joint fine-tuning.

Everything runs on float64 numpy through a tape-based reverse-mode
autodiff engine; no ML framework is involved.
"""

from .codec import Clip, CodecGeometry, LatentGrid, PoseTrack, decode, encode, encode_image
from .condition import ConditionSpec, assemble, loss
from .errors import ConfigError, IOFailure, NumericError, PicovidError, ShapeError
from .model import ModelConfig, ModelParams, TextTokens, forward, init_params, sample
from .numcore import Tensor, backward, gradcheck
from .synthdata import DeskMetrics, SynthSample, evaluate, generate
from .trainer import (Checkpoint, StagePlan, StageSpec, default_plan,
                      load_checkpoint, merge, run_plan, save_checkpoint, train_stage)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Clip", "CodecGeometry", "ConditionSpec", "ConfigError",
    "DeskMetrics", "IOFailure", "LatentGrid", "ModelConfig", "ModelParams",
    "NumericError", "PicovidError", "PoseTrack", "ShapeError", "StagePlan",
    "StageSpec", "SynthSample", "Tensor", "TextTokens", "assemble", "backward",
    "decode", "default_plan", "encode", "encode_image", "evaluate", "forward",
    "generate", "gradcheck", "init_params", "load_checkpoint", "loss", "merge",
    "run_plan", "sample", "save_checkpoint", "train_stage", "__version__",
]
