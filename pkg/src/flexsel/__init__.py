"""Token selection for long token streams.

Rank visual tokens by the attention an intermediate decoder layer pays them,
partition frames into strided sets so each scoring pass stays inside the
context limit, keep the top-scored tokens under a budget, and optionally
replace the big scorer with a tiny rank-distilled selector.
"""

from __future__ import annotations

from .errors import (
    CapacityError,
    ConfigurationError,
    DegenerateDataError,
    DimensionError,
    EvaluationError,
    FlexselError,
    TrainingDivergenceError,
    WeightFormatError,
)
from .flops import FlopsQuery, FlopsReport, flops_flexselect, flops_full, flops_lite, flops_report
from .pipeline import (
    FrameSet,
    PartitionSpec,
    PlantedLayerScorer,
    ReferenceModelScorer,
    SelectedTokens,
    SelectionConfig,
    SetSelection,
    aggregate,
    allocate_budget,
    build_frame_sets,
    partition_frames,
    run_training_free,
    score_frame_set,
    select_topk,
)
from .probe import HaystackSpec, ProbeResult, build_haystack, profile_layers, recall_at_k
from .reference import (
    AttentionRecord,
    ModelConfig,
    PlantedSpec,
    RelevanceScores,
    TeacherTemplate,
    TokenSequence,
    forward_with_attention,
    init_reference_model,
    make_concentration_profile,
    planted_for_sequence,
    planted_forward,
    relevance_scores,
)
from .selector import (
    HaystackTemplate,
    SelectorConfig,
    SelectorScorer,
    SelectorWeights,
    TrainConfig,
    TrainState,
    TrainingBatch,
    build_rank_dataset,
    init_selector,
    load_rank_dataset,
    load_train_state,
    load_weights,
    run_lite,
    save_rank_dataset,
    save_train_state,
    save_weights,
    selector_forward,
    train,
    train_step,
)
from .softrank import SoftRankConfig, hard_rank, isotonic_regression, rank_loss, soft_rank, spearman

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "CapacityError",
    "ConfigurationError",
    "DegenerateDataError",
    "DimensionError",
    "EvaluationError",
    "FlexselError",
    "FlopsQuery",
    "FlopsReport",
    "FrameSet",
    "HaystackSpec",
    "HaystackTemplate",
    "ModelConfig",
    "PartitionSpec",
    "PlantedLayerScorer",
    "PlantedSpec",
    "ProbeResult",
    "ReferenceModelScorer",
    "RelevanceScores",
    "SelectedTokens",
    "SelectionConfig",
    "SelectorConfig",
    "SelectorScorer",
    "SelectorWeights",
    "SetSelection",
    "SoftRankConfig",
    "TeacherTemplate",
    "TokenSequence",
    "TrainConfig",
    "TrainState",
    "TrainingBatch",
    "TrainingDivergenceError",
    "WeightFormatError",
    "aggregate",
    "allocate_budget",
    "build_frame_sets",
    "build_haystack",
    "build_rank_dataset",
    "flops_flexselect",
    "flops_full",
    "flops_lite",
    "flops_report",
    "forward_with_attention",
    "hard_rank",
    "init_reference_model",
    "init_selector",
    "isotonic_regression",
    "load_rank_dataset",
    "load_train_state",
    "load_weights",
    "make_concentration_profile",
    "partition_frames",
    "planted_for_sequence",
    "planted_forward",
    "profile_layers",
    "rank_loss",
    "recall_at_k",
    "relevance_scores",
    "run_lite",
    "run_training_free",
    "save_rank_dataset",
    "save_train_state",
    "save_weights",
    "score_frame_set",
    "select_topk",
    "selector_forward",
    "soft_rank",
    "spearman",
    "train",
    "train_step",
]
