"""Haystack construction, Recall@K against a brute-force oracle, layer
profiling, and PCA projection."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from flexsel.errors import ConfigurationError, DegenerateDataError
from flexsel.probe import (
    HaystackSpec,
    build_haystack,
    pca_project,
    profile_layers,
    recall_at_k,
)
from flexsel.reference import (
    AttentionRecord,
    RelevanceScores,
    TeacherTemplate,
    planted_for_sequence,
    planted_forward,
)


# ---------------------------------------------------------------------------
# Haystack construction


def test_haystack_fixed_needle_positions():
    spec = HaystackSpec(
        frames=4, tokens_per_frame=2, needle_frames=1, needle_positions=(3,), seed=0
    )
    seq, relevant = build_haystack(spec)
    assert relevant == frozenset({5, 6})
    assert seq.n_visual == 8
    np.testing.assert_array_equal(seq.frame_index, [1, 1, 2, 2, 3, 3, 4, 4])
    np.testing.assert_array_equal(seq.within_index, [1, 2, 1, 2, 1, 2, 1, 2])
    np.testing.assert_array_equal(seq.global_index, np.arange(1, 9))
    assert seq.query == (spec.payload_id,)


def test_haystack_payload_axis_is_shifted():
    offset = 50.0
    spec = HaystackSpec(
        frames=6,
        tokens_per_frame=3,
        needle_frames=2,
        payload_id=4,
        payload_offset=offset,
        seed=1,
    )
    seq, relevant = build_haystack(spec)
    rel_pos = [g - 1 for g in sorted(relevant)]
    bg_pos = [i for i in range(seq.n_visual) if i + 1 not in relevant]
    assert seq.visual[rel_pos, 4].min() > offset - 6.0
    assert np.abs(seq.visual[bg_pos, 4]).max() < 6.0
    # Needle tokens fill whole frames.
    frames = {int(seq.frame_index[p]) for p in rel_pos}
    assert len(relevant) == len(frames) * spec.tokens_per_frame


def test_haystack_is_deterministic_per_seed():
    spec = HaystackSpec(frames=8, tokens_per_frame=2, needle_frames=2, seed=9)
    a_seq, a_rel = build_haystack(spec)
    b_seq, b_rel = build_haystack(spec)
    assert a_rel == b_rel
    np.testing.assert_array_equal(a_seq.visual, b_seq.visual)
    c_seq, c_rel = build_haystack(
        HaystackSpec(frames=8, tokens_per_frame=2, needle_frames=2, seed=10)
    )
    assert not np.array_equal(a_seq.visual, c_seq.visual)


def test_haystack_query_defaults_to_payload():
    seq, _ = build_haystack(HaystackSpec(frames=2, tokens_per_frame=1, payload_id=3, seed=0))
    assert seq.query == (3,)
    seq, _ = build_haystack(
        HaystackSpec(frames=2, tokens_per_frame=1, payload_id=3, query_id=1, seed=0)
    )
    assert seq.query == (1,)


def test_haystack_spec_validation():
    with pytest.raises(ValueError, match="cannot place"):
        HaystackSpec(frames=2, tokens_per_frame=1, needle_frames=3)
    with pytest.raises(ConfigurationError, match="payload id"):
        HaystackSpec(frames=2, tokens_per_frame=1, payload_id=16, feature_dim=16)
    with pytest.raises(ValueError, match="length"):
        HaystackSpec(frames=4, tokens_per_frame=1, needle_frames=2, needle_positions=(1,))
    with pytest.raises(ValueError, match="distinct"):
        HaystackSpec(frames=4, tokens_per_frame=1, needle_frames=2, needle_positions=(2, 2))
    with pytest.raises(ConfigurationError):
        HaystackSpec(frames=0, tokens_per_frame=1)


# ---------------------------------------------------------------------------
# Recall@K


def brute_force_recall(values, global_index, relevant, k):
    """Enumerate every size-k subset; the best (max score sum, then lowest
    indices) is the canonical top-k under low-index tie breaking."""
    items = list(zip(values, global_index))
    best = None
    for combo in itertools.combinations(range(len(items)), k):
        score = sum(items[i][0] for i in combo)
        key = (-score, tuple(items[i][1] for i in combo))
        if best is None or key < best[0]:
            best = (key, combo)
    top = {items[i][1] for i in best[1]}
    return len(top & relevant) / len(relevant)


def test_recall_matches_brute_force_on_small_inputs():
    rng = np.random.default_rng(11)
    for _ in range(40):
        m = int(rng.integers(2, 9))
        values = np.round(rng.normal(size=m), 1)
        global_index = np.arange(1, m + 1)
        relevant = frozenset(
            int(g) for g in rng.choice(global_index, size=int(rng.integers(1, m + 1)), replace=False)
        )
        k = int(rng.integers(1, m + 1))
        scores = RelevanceScores(values=values, global_index=global_index)
        assert recall_at_k(scores, relevant, k) == brute_force_recall(
            values, global_index, relevant, k
        )


def test_recall_ties_break_to_lower_global_index():
    scores = RelevanceScores(values=np.array([1.0, 1.0, 0.5]), global_index=np.array([1, 2, 3]))
    assert recall_at_k(scores, frozenset({1}), 1) == 1.0
    assert recall_at_k(scores, frozenset({2}), 1) == 0.0


def test_recall_k_defaults_to_relevant_size():
    scores = RelevanceScores(values=np.array([0.9, 0.1, 0.8, 0.2]), global_index=np.arange(1, 5))
    assert recall_at_k(scores, frozenset({1, 3})) == 1.0
    assert recall_at_k(scores, frozenset({2, 4})) == 0.0


def test_recall_validation():
    scores = RelevanceScores(values=np.array([0.9, 0.1]), global_index=np.array([1, 2]))
    with pytest.raises(ValueError, match="nonempty"):
        recall_at_k(scores, frozenset(), 1)
    with pytest.raises(ValueError, match="out of range"):
        recall_at_k(scores, frozenset({1}), 3)
    with pytest.raises(ValueError, match="out of range"):
        recall_at_k(scores, frozenset({1}), 0)


# ---------------------------------------------------------------------------
# Layer profiling


def test_profile_finds_planted_peak_layer():
    spec = HaystackSpec(frames=16, tokens_per_frame=2, needle_frames=2, seed=3)
    seq, relevant = build_haystack(spec)
    planted = planted_for_sequence(TeacherTemplate(noise=0.0), seq, relevant)
    result = profile_layers(planted_forward(planted, seq), relevant)
    assert result.reference_layer == planted.peak_layer
    assert result.recall[planted.peak_layer - 1] == 1.0
    assert result.k == len(relevant)
    assert result.relevant == relevant
    assert len(result.recall) == planted.layers


def test_profile_ties_resolve_to_lowest_layer():
    # Two identical layers: argmax must take the first.
    row = np.array([[0.6, 0.2, 0.2]])
    rows = [[row.copy()], [row.copy()]]
    record = AttentionRecord(
        heads=1, n_visual=2, n_query=1, global_index=np.array([1, 2]), rows=rows
    )
    result = profile_layers(record, frozenset({1}), k=1)
    assert result.recall == (1.0, 1.0)
    assert result.reference_layer == 1


def test_profile_respects_explicit_k():
    spec = HaystackSpec(frames=8, tokens_per_frame=2, needle_frames=1, seed=4)
    seq, relevant = build_haystack(spec)
    planted = planted_for_sequence(TeacherTemplate(noise=0.0), seq, relevant)
    record = planted_forward(planted, seq)
    wide = profile_layers(record, relevant, k=seq.n_visual)
    assert wide.k == seq.n_visual
    assert all(r == 1.0 for r in wide.recall)


# ---------------------------------------------------------------------------
# PCA projection


def test_pca_projects_to_requested_components():
    rng = np.random.default_rng(6)
    tokens = rng.normal(size=(20, 5))
    out = pca_project(tokens, components=2)
    assert out.shape == (20, 2)
    # Components are uncorrelated and ordered by variance.
    cov = np.cov(out.T)
    assert cov[0, 0] >= cov[1, 1]
    np.testing.assert_allclose(cov[0, 1], 0.0, atol=1e-10)


def test_pca_is_deterministic_including_sign():
    rng = np.random.default_rng(7)
    tokens = rng.normal(size=(15, 4))
    np.testing.assert_array_equal(pca_project(tokens), pca_project(tokens.copy()))


def test_pca_separates_needle_tokens():
    spec = HaystackSpec(
        frames=8, tokens_per_frame=2, needle_frames=2, payload_offset=8.0, seed=8
    )
    seq, relevant = build_haystack(spec)
    out = pca_project(seq.visual, components=1)
    rel_pos = [g - 1 for g in sorted(relevant)]
    bg_pos = [i for i in range(seq.n_visual) if i + 1 not in relevant]
    rel_coords = out[rel_pos, 0]
    bg_coords = out[bg_pos, 0]
    # The payload offset dominates variance, so needles sit on one side.
    assert rel_coords.min() > bg_coords.max() or rel_coords.max() < bg_coords.min()


def test_pca_validation():
    with pytest.raises(ValueError, match="two token rows"):
        pca_project(np.zeros((1, 4)))
    with pytest.raises(ValueError, match="components"):
        pca_project(np.zeros((5, 3)), components=4)
    with pytest.raises(DegenerateDataError):
        pca_project(np.ones((6, 3)))
