"""Needle-in-a-haystack construction and layer-profiling utilities.

A haystack is a frame sequence of background feature noise with a few
needle frames whose tokens carry a payload direction tied to the query id.
Recall of the known needle tokens under top-K selection, swept across
layers of an attention record, locates the layer where cross-modal
relevance is sharpest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateDataError
from .reference import AttentionRecord, RelevanceScores, TokenSequence, relevance_scores

Array = np.ndarray


@dataclass(frozen=True)
class HaystackSpec:
    """Layout and seeding for one synthetic haystack.

    Payload directions are orthogonal axes of the feature space, one per
    payload id, so distinct needle/query pairs never collide. The query id
    defaults to the payload id, binding question to needle.
    """

    frames: int
    tokens_per_frame: int
    needle_frames: int = 1
    needle_positions: tuple[int, ...] | None = None
    payload_id: int = 0
    query_id: int | None = None
    feature_dim: int = 16
    payload_offset: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frames < 1 or self.tokens_per_frame < 1:
            raise ConfigurationError("frames and tokens_per_frame must be positive")
        if self.needle_frames < 1:
            raise ConfigurationError("at least one needle frame is required")
        if self.needle_frames > self.frames:
            raise ValueError(
                f"cannot place {self.needle_frames} needle frames into {self.frames} frames"
            )
        if self.payload_id < 0 or self.payload_id >= self.feature_dim:
            raise ConfigurationError(
                f"payload id {self.payload_id} needs a dedicated axis; feature_dim is {self.feature_dim}"
            )
        if self.needle_positions is not None:
            pos = self.needle_positions
            if len(pos) != self.needle_frames:
                raise ValueError("needle_positions length must equal needle_frames")
            if len(set(pos)) != len(pos) or min(pos) < 1 or max(pos) > self.frames:
                raise ValueError("needle_positions must be distinct 1-based frame indices")


def build_haystack(spec: HaystackSpec) -> tuple[TokenSequence, frozenset[int]]:
    """Generate the token sequence and the set of needle global indices.

    Needle tokens are background draws shifted by ``payload_offset`` along
    the payload axis; everything is a pure function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    n_tokens = spec.frames * spec.tokens_per_frame
    features = rng.normal(size=(n_tokens, spec.feature_dim))
    if spec.needle_positions is not None:
        needle_frames = sorted(spec.needle_positions)
    else:
        needle_frames = sorted(
            int(f) + 1 for f in rng.choice(spec.frames, size=spec.needle_frames, replace=False)
        )
    relevant: set[int] = set()
    for frame in needle_frames:
        start = (frame - 1) * spec.tokens_per_frame
        features[start : start + spec.tokens_per_frame, spec.payload_id] += spec.payload_offset
        relevant.update(range(start + 1, start + spec.tokens_per_frame + 1))
    query_id = spec.payload_id if spec.query_id is None else spec.query_id
    seq = TokenSequence(
        visual=features,
        frame_index=np.repeat(np.arange(1, spec.frames + 1), spec.tokens_per_frame),
        within_index=np.tile(np.arange(1, spec.tokens_per_frame + 1), spec.frames),
        global_index=np.arange(1, n_tokens + 1),
        query=(int(query_id),),
    )
    return seq, frozenset(relevant)


def recall_at_k(scores: RelevanceScores, relevant: frozenset[int], k: int | None = None) -> float:
    """|top-K by score ∩ relevant| / |relevant|; K defaults to |relevant|.

    Ties break toward the lower global token index.
    """
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    n = scores.values.size
    if k is None:
        k = len(relevant)
    if k < 1 or k > n:
        raise ValueError(f"K={k} out of range [1, {n}]")
    order = np.lexsort((scores.global_index, -scores.values))
    top = set(int(g) for g in scores.global_index[order[:k]])
    return len(top & relevant) / len(relevant)


@dataclass(frozen=True)
class ProbeResult:
    recall: tuple[float, ...]
    k: int
    relevant: frozenset[int]
    reference_layer: int


def profile_layers(
    record: AttentionRecord, relevant: frozenset[int], k: int | None = None
) -> ProbeResult:
    """Recall@K of the relevant set per layer; the reference layer is the
    argmax, ties resolved to the lowest layer."""
    if k is None:
        k = len(relevant)
    recalls = tuple(
        recall_at_k(relevance_scores(record, layer), relevant, k)
        for layer in range(1, record.layers + 1)
    )
    reference = int(np.argmax(np.asarray(recalls))) + 1
    return ProbeResult(recall=recalls, k=k, relevant=frozenset(relevant), reference_layer=reference)


def pca_project(tokens, components: int = 2) -> Array:
    """Project token features onto their top principal components.

    Component signs are fixed so each component's largest-magnitude loading
    is positive, keeping plots reproducible across runs.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need at least two token rows, got shape {x.shape}")
    if components < 1 or components > x.shape[1]:
        raise ValueError(f"components={components} out of range [1, {x.shape[1]}]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    total_var = float(np.trace(cov))
    if total_var <= 1e-12:
        raise DegenerateDataError("token features have no variance to project")
    eigvals, eigvecs = np.linalg.eigh(cov)
    take = np.argsort(eigvals)[::-1][:components]
    basis = eigvecs[:, take]
    for j in range(components):
        lead = np.argmax(np.abs(basis[:, j]))
        if basis[lead, j] < 0:
            basis[:, j] = -basis[:, j]
    return centered @ basis
