"""Campfire: channel-agnostic masked autoencoding for multi-channel microscopy.

A single shared patch projection makes the encoder blind to channel identity,
so one pretrained backbone embeds tiles with any subset or ordering of
channels. The package covers synthetic data generation, distribution-shift-
isolating splits, pretraining with a composite frequency-filtered objective,
and downstream evaluation (linear probes, Z'-scores, triplet finetuning).
"""

from .data_model import (
    CANONICAL_CHANNELS,
    Manifest,
    Tile,
    WellRecord,
    augment,
    compute_channel_stats,
    normalize_channels,
    read_manifest,
    read_tile,
    write_manifest,
    write_tile,
)
from .errors import CampfireError
from .evaluation import (
    EmbeddingTable,
    TripletConfig,
    TripletHead,
    extract_embeddings,
    triplet_finetune,
    zprime,
)
from .model_core import CampfireMAE, ModelConfig, load_checkpoint, parameter_checksum, save_checkpoint
from .objective import LossWeights, total_loss, zero_inner, zero_outer
from .split_scheme import SplitAssignment, SplitConfig, assign_target2, audit
from .synthetic_data import SynthConfig, generate_dataset
from .training import OptimConfig, fit, lr_at, resume_fit, sample_channel_subset

__version__ = "0.1.0"

__all__ = [
    "CANONICAL_CHANNELS",
    "CampfireError",
    "CampfireMAE",
    "EmbeddingTable",
    "LossWeights",
    "Manifest",
    "ModelConfig",
    "OptimConfig",
    "SplitAssignment",
    "SplitConfig",
    "SynthConfig",
    "Tile",
    "TripletConfig",
    "TripletHead",
    "WellRecord",
    "__version__",
    "assign_target2",
    "audit",
    "augment",
    "compute_channel_stats",
    "extract_embeddings",
    "fit",
    "generate_dataset",
    "load_checkpoint",
    "lr_at",
    "normalize_channels",
    "parameter_checksum",
    "read_manifest",
    "read_tile",
    "resume_fit",
    "sample_channel_subset",
    "save_checkpoint",
    "total_loss",
    "triplet_finetune",
    "write_manifest",
    "write_tile",
    "zero_inner",
    "zero_outer",
    "zprime",
]
