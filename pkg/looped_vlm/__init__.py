"""
looped_vlm: a desk-scale depth-recurrent multimodal transformer.

A looped language backbone that refines a latent state with one shared block,
receives visual cues from progressively deeper vision-encoder layers during
its first iterations, and decodes with per-token adaptive depth.
"""

from .config import RunConfig, RuntimeSettings, load_run_config, validate_config
from .errors import (
    LoopedVLMError,
    ConfigError,
    DataError,
    CheckpointError,
    NumericError,
    ShapeError,
)
from .tensor import Array, Parameter, Graph, no_grad, precision
from .tokenizer import VOCAB, EncodedSample, encode, decode
from .scenes import SyntheticScene, generate_scene, build_split, build_dataset, load_split
from .vision import VisionEncoder, VisualAligner, VisualHierarchy, patchify
from .backbone import InjectionSchedule, RecurrentBackbone, build_schedule, init_state, inject
from .model import MultimodalModel
from .training import (DepthDistribution, DepthSample, Trainer, sample_depth, iterate_forward, masked_ce_loss,
                       batch_loss)
from .checkpoint import save_checkpoint, read_checkpoint, load_model
from .inference import ExitPolicy, CacheStore, InferenceSession, norm_diff, latest_m4, export_trace

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "RuntimeSettings",
    "load_run_config",
    "validate_config",
    "LoopedVLMError",
    "ConfigError",
    "DataError",
    "CheckpointError",
    "NumericError",
    "ShapeError",
    "Array",
    "Parameter",
    "Graph",
    "no_grad",
    "precision",
    "VOCAB",
    "EncodedSample",
    "encode",
    "decode",
    "SyntheticScene",
    "generate_scene",
    "build_split",
    "build_dataset",
    "load_split",
    "VisionEncoder",
    "VisualAligner",
    "VisualHierarchy",
    "patchify",
    "InjectionSchedule",
    "RecurrentBackbone",
    "build_schedule",
    "init_state",
    "inject",
    "MultimodalModel",
    "DepthDistribution",
    "DepthSample",
    "Trainer",
    "sample_depth",
    "iterate_forward",
    "masked_ce_loss",
    "batch_loss",
    "save_checkpoint",
    "read_checkpoint",
    "load_model",
    "ExitPolicy",
    "CacheStore",
    "InferenceSession",
    "norm_diff",
    "latest_m4",
    "export_trace",
]
