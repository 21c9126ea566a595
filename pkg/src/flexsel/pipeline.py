"""Frame partitioning and budgeted top-k token selection.

Long inputs are split into K interleaved frame sets (stride K over frame
indices) so each set fits a scorer's context. Every set is scored
independently, keeps its top slice of the global budget, and the per-set
picks are merged back in ascending global order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError
from .reference import (
    AttentionRecord,
    ModelConfig,
    PlantedSpec,
    RelevanceScores,
    TokenSequence,
    forward_with_attention,
    planted_forward,
    relevance_scores,
)
from .numerics import Tensor

Array = np.ndarray


@dataclass(frozen=True)
class PartitionSpec:
    """N frames split into K = ceil(N / max_set_frames) interleaved sets."""

    frames: int
    max_set_frames: int

    def __post_init__(self) -> None:
        if self.frames < 1:
            raise ConfigurationError(f"frames must be positive, got {self.frames}")
        if self.max_set_frames < 1:
            raise ConfigurationError(
                f"max_set_frames must be positive, got {self.max_set_frames}"
            )

    @property
    def sets(self) -> int:
        return math.ceil(self.frames / self.max_set_frames)


def partition_frames(frames: int, max_set_frames: int) -> list[list[int]]:
    """Set j (1-based) holds the frames congruent to j modulo K, with j = K
    taking residue zero; every set's frames stay in ascending order."""
    spec = PartitionSpec(frames=frames, max_set_frames=max_set_frames)
    k = spec.sets
    return [
        [i for i in range(1, frames + 1) if i % k == j % k]
        for j in range(1, k + 1)
    ]


@dataclass(frozen=True)
class FrameSet:
    """One partition cell: its 1-based set index, member frames, and the
    token slice carrying original global indices."""

    set_index: int
    frames: tuple[int, ...]
    tokens: TokenSequence


def build_frame_sets(seq: TokenSequence, spec: PartitionSpec) -> list[FrameSet]:
    present = set(int(f) for f in np.unique(seq.frame_index))
    if spec.frames != max(present):
        raise ConfigurationError(
            f"partition covers {spec.frames} frames but sequence has frames up to {max(present)}"
        )
    sets = []
    for j, frames in enumerate(partition_frames(spec.frames, spec.max_set_frames), start=1):
        members = [f for f in frames if f in present]
        positions = np.flatnonzero(np.isin(seq.frame_index, members))
        if positions.size == 0:
            raise ConfigurationError(f"frame set {j} is empty; sequence does not cover the partition")
        sets.append(FrameSet(set_index=j, frames=tuple(members), tokens=seq.subset(positions)))
    return sets


class Scorer(Protocol):
    """Anything that maps a token subsequence to per-token scores."""

    max_context: int | None

    def score(self, tokens: TokenSequence) -> Array: ...


@dataclass
class PlantedLayerScorer:
    """Scores tokens with the planted oracle's relevance at a fixed layer.

    The oracle's relevant set is intersected with whatever tokens a frame
    set actually contains; a set with no relevant tokens is scored as pure
    background."""

    spec: PlantedSpec
    layer: int | None = None
    max_context: int | None = None

    def score(self, tokens: TokenSequence) -> Array:
        layer = self.layer if self.layer is not None else self.spec.peak_layer
        present = frozenset(int(g) for g in tokens.global_index)
        relevant = self.spec.relevant & present
        if relevant:
            spec = PlantedSpec(
                layers=self.spec.layers,
                heads=self.spec.heads,
                relevant=relevant,
                peak_layer=self.spec.peak_layer,
                concentration=self.spec.concentration,
                noise=self.spec.noise,
                seed=self.spec.seed,
            )
            record = planted_forward(spec, tokens)
            return relevance_scores(record, layer).values
        return _background_scores(self.spec, tokens, layer)


def _background_scores(spec: PlantedSpec, tokens: TokenSequence, layer: int) -> Array:
    """Relevance of an all-background subset: uniform mass plus the oracle's
    content-derived noise, normalized per row."""
    from .reference import _noise_directions, _planted_row

    m = tokens.n_visual
    dirs = _noise_directions(spec, tokens.visual.shape[1])
    acc = np.zeros(m)
    empty = np.empty(0, dtype=np.intp)
    for head in range(spec.heads):
        noise = spec.noise * (tokens.visual @ dirs[layer - 1, head]) if spec.noise else None
        for q in range(tokens.n_query):
            attended = m + q + 1
            row = _planted_row(m, attended, empty, 0.0, noise)
            acc += row[:m] / tokens.n_query
    return acc / spec.heads


@dataclass
class ReferenceModelScorer:
    """Scores tokens with the tiny model's relevance at a fixed layer; the
    forward pass stops at that layer."""

    config: ModelConfig
    params: dict[str, Tensor]
    layer: int

    @property
    def max_context(self) -> int:
        return self.config.max_len

    def score(self, tokens: TokenSequence) -> Array:
        record, _ = forward_with_attention(self.config, self.params, tokens, upto_layer=self.layer)
        return relevance_scores(record, self.layer).values


def score_frame_set(scorer: Scorer, frame_set: FrameSet, query: Sequence[int]) -> Array:
    """Score one frame set's tokens against ``query``; scores align with the
    set's token slice."""
    tokens = frame_set.tokens.with_query(query)
    limit = scorer.max_context
    total = tokens.n_visual + tokens.n_query
    if limit is not None and total > limit:
        raise CapacityError(
            f"frame set {frame_set.set_index} needs {total} positions, scorer limit is {limit}"
        )
    scores = np.asarray(scorer.score(tokens), dtype=np.float64)
    if scores.shape != (tokens.n_visual,):
        raise ConfigurationError(
            f"scorer returned shape {scores.shape} for {tokens.n_visual} tokens"
        )
    return scores


def select_topk(scores, k: int) -> list[int]:
    """1-based positions of the k largest scores, ties to the lower
    position, returned in ascending position order."""
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k < 1 or k > values.size:
        raise ValueError(f"k={k} out of range [1, {values.size}]")
    order = np.lexsort((np.arange(values.size), -values))
    return sorted(int(i) + 1 for i in order[:k])


@dataclass(frozen=True)
class SetSelection:
    """One set's contribution: global indices already mapped, with scores."""

    set_index: int
    global_index: tuple[int, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class SelectedTokens:
    """Final selection in ascending global order with per-token provenance."""

    global_index: Array
    score: Array
    set_index: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "global_index", np.asarray(self.global_index, dtype=np.int64))
        object.__setattr__(self, "score", np.asarray(self.score, dtype=np.float64))
        object.__setattr__(self, "set_index", np.asarray(self.set_index, dtype=np.int64))
        n = self.global_index.size
        if self.score.shape != (n,) or self.set_index.shape != (n,):
            raise ConfigurationError("selection fields must align")
        if n and np.any(np.diff(self.global_index) <= 0):
            raise ConfigurationError("selected global indices must be strictly increasing")

    def __len__(self) -> int:
        return int(self.global_index.size)


def aggregate(selections: Sequence[SetSelection]) -> SelectedTokens:
    """Merge per-set selections into one ascending-global-order result.

    A duplicate global index means two sets claimed the same token, which
    the partition makes impossible; treat it as an internal invariant
    violation."""
    indices: list[int] = []
    scores: list[float] = []
    sets: list[int] = []
    for sel in sorted(selections, key=lambda s: s.set_index):
        indices.extend(sel.global_index)
        scores.extend(sel.scores)
        sets.extend([sel.set_index] * len(sel.global_index))
    if len(set(indices)) != len(indices):
        raise RuntimeError("internal invariant violation: duplicate global index across sets")
    order = np.argsort(np.asarray(indices, dtype=np.int64), kind="stable")
    return SelectedTokens(
        global_index=np.asarray(indices, dtype=np.int64)[order],
        score=np.asarray(scores, dtype=np.float64)[order],
        set_index=np.asarray(sets, dtype=np.int64)[order],
    )


@dataclass
class SelectionConfig:
    """Selection budget: explicit token count, or a ratio of the total
    (default one sixteenth), resolved at run time."""

    scorer: Scorer
    budget: int | None = None
    ratio: float = 0.0625

    def __post_init__(self) -> None:
        if self.budget is not None and self.budget < 1:
            raise ConfigurationError(f"budget must be positive, got {self.budget}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigurationError(f"ratio must lie in (0, 1], got {self.ratio}")

    def resolve_budget(self, total_tokens: int) -> int:
        if self.budget is not None:
            return min(self.budget, total_tokens)
        return min(total_tokens, max(1, round(self.ratio * total_tokens)))


def allocate_budget(budget: int, capacities: Sequence[int]) -> list[int]:
    """Per-set quotas: floor(budget / K) each, remainder one extra to the
    lowest-index sets; quotas above a set's capacity spill deterministically
    to the lowest-index sets with room, so the quotas always sum to
    min(budget, total)."""
    k = len(capacities)
    total = sum(capacities)
    b = min(budget, total)
    base, rem = divmod(b, k)
    quotas = [min(base + (1 if j < rem else 0), capacities[j]) for j in range(k)]
    surplus = b - sum(quotas)
    while surplus > 0:
        for j in range(k):
            if surplus == 0:
                break
            if quotas[j] < capacities[j]:
                quotas[j] += 1
                surplus -= 1
    return quotas


def run_training_free(
    seq: TokenSequence,
    query: Sequence[int],
    spec: PartitionSpec,
    cfg: SelectionConfig,
    *,
    process_order: Sequence[int] | None = None,
) -> SelectedTokens:
    """Partition, score each set, keep each set's share of the budget, and
    merge. ``process_order`` reorders set scoring (a scheduling knob); the
    output is invariant to it."""
    frame_sets = build_frame_sets(seq, spec)
    k_sets = len(frame_sets)
    budget = cfg.resolve_budget(seq.n_visual)
    if budget < k_sets:
        raise ConfigurationError(
            f"budget {budget} is below the set count {k_sets}; every set needs at least one pick"
        )
    capacities = [fs.tokens.n_visual for fs in frame_sets]
    quotas = allocate_budget(budget, capacities)
    order = list(process_order) if process_order is not None else list(range(1, k_sets + 1))
    if sorted(order) != list(range(1, k_sets + 1)):
        raise ValueError("process_order must be a permutation of the 1-based set indices")
    selections: list[SetSelection] = []
    for j in order:
        fs = frame_sets[j - 1]
        scores = score_frame_set(cfg.scorer, fs, query)
        picks = select_topk(scores, quotas[j - 1])
        positions = [p - 1 for p in picks]
        selections.append(
            SetSelection(
                set_index=j,
                global_index=tuple(int(g) for g in fs.tokens.global_index[positions]),
                scores=tuple(float(s) for s in scores[positions]),
            )
        )
    return aggregate(selections)
