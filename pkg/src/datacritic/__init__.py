"""Multi-critic scoring, shrinkage fusion, and answer refinement for SFT corpora."""

from .corpus import (
    CandidatePool,
    CritiqueRecord,
    FusedLabel,
    QaItem,
    RefinedEntry,
    Sample,
    VisionPrior,
    load_corpus,
    save_corpus,
    validate_record,
)
from .fusion import FusionConfig, fuse_pipeline
from .grpo import GrpoConfig, ToyPolicy
from .pipeline import PipelineConfig, run_all
from .rewards import accuracy_reward, extract_score, format_reward, total_reward

__version__ = "0.1.0"

__all__ = [
    "CandidatePool",
    "CritiqueRecord",
    "FusedLabel",
    "FusionConfig",
    "GrpoConfig",
    "PipelineConfig",
    "QaItem",
    "RefinedEntry",
    "Sample",
    "ToyPolicy",
    "VisionPrior",
    "accuracy_reward",
    "extract_score",
    "format_reward",
    "fuse_pipeline",
    "load_corpus",
    "run_all",
    "save_corpus",
    "total_reward",
    "validate_record",
]
