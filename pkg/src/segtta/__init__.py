"""Retrieval-augmented test-time adaptation for open-vocabulary segmentation.

Operates purely on pre-extracted dense feature maps: annotated support images
are pooled into per-class vectors, each query retrieves its nearest support
entries, and a small linear probe is trained on the fly from retrieved,
text-fused, and pseudo-pooled items before classifying the query's patches or
region proposals.
"""

from .adapter import AdapterModel, TrainConfig, train_adapter
from .harness import SynthConfig, compute_miou, generate_world, run_sweep
from .inference import RegionSet, SegmentationResult, segment, zero_shot_segment
from .numerics import IGNORE_INDEX, DenseFeatureMap, LabelMask, ProbMap
from .support import (
    DEFAULT_LAMBDAS,
    SupportStore,
    TextBank,
    add_support_image,
    substitute_missing_text,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterModel", "TrainConfig", "train_adapter",
    "SynthConfig", "compute_miou", "generate_world", "run_sweep",
    "RegionSet", "SegmentationResult", "segment", "zero_shot_segment",
    "IGNORE_INDEX", "DenseFeatureMap", "LabelMask", "ProbMap",
    "DEFAULT_LAMBDAS", "SupportStore", "TextBank", "add_support_image",
    "substitute_missing_text",
]
