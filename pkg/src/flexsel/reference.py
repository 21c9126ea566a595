"""Reference scoring model: a tiny trainable decoder plus a planted oracle.

Both produce an :class:`AttentionRecord`, the common currency downstream:
post-softmax attention rows from every query position, per layer and head.
Relevance of a visual token is the head- and query-row-averaged attention
mass it receives. The planted oracle is a deterministic stand-in whose
concentration on a known relevant set peaks at a chosen layer, which gives
every experiment a ground truth to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nm
from .decoder import DecoderDims, decoder_forward, init_decoder_params, validate_params
from .errors import ConfigurationError
from .numerics import Tensor

Array = np.ndarray


# ---------------------------------------------------------------------------
# Core sequence and record types


@dataclass(frozen=True)
class TokenSequence:
    """Visual tokens (features plus frame bookkeeping) followed by query ids.

    All indices are 1-based: frames run 1..N, global token indices run 1..M
    and strictly increase in storage order.
    """

    visual: Array                 # [M, feature_dim]
    frame_index: Array            # [M]
    within_index: Array           # [M]
    global_index: Array           # [M]
    query: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "visual", np.asarray(self.visual, dtype=np.float64))
        for name in ("frame_index", "within_index", "global_index"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        m = self.visual.shape[0]
        if m < 1 or self.visual.ndim != 2:
            raise ConfigurationError(f"visual tokens must be a nonempty 2-D array, got {self.visual.shape}")
        for name in ("frame_index", "within_index", "global_index"):
            if getattr(self, name).shape != (m,):
                raise ConfigurationError(f"{name} must have shape ({m},)")
        if len(self.query) < 1:
            raise ConfigurationError("query must contain at least one token id")
        if np.any(np.diff(self.global_index) <= 0):
            raise ConfigurationError("global indices must be strictly increasing")
        if self.global_index[0] < 1 or self.frame_index.min() < 1:
            raise ConfigurationError("frame and global indices are 1-based")

    @property
    def n_visual(self) -> int:
        return self.visual.shape[0]

    @property
    def n_query(self) -> int:
        return len(self.query)

    def subset(self, positions: Sequence[int] | Array) -> "TokenSequence":
        """Keep the visual tokens at the given 0-based storage positions,
        preserving original frame and global indices."""
        pos = np.asarray(positions, dtype=np.intp)
        return TokenSequence(
            visual=self.visual[pos],
            frame_index=self.frame_index[pos],
            within_index=self.within_index[pos],
            global_index=self.global_index[pos],
            query=self.query,
        )

    def with_query(self, query: Sequence[int]) -> "TokenSequence":
        return replace(self, query=tuple(int(q) for q in query))


@dataclass
class AttentionRecord:
    """Post-softmax attention rows for every query position.

    ``rows[l][h]`` is a ``[n_query, n_visual + n_query]`` matrix for layer
    ``l+1`` and head ``h+1``; entries beyond a row's causal horizon are
    exactly zero, so each row still sums to one over attended positions.
    """

    heads: int
    n_visual: int
    n_query: int
    global_index: Array
    rows: list[list[Array]]

    @property
    def layers(self) -> int:
        return len(self.rows)

    def _check_layer(self, layer: int) -> int:
        if not 1 <= layer <= self.layers:
            raise IndexError(f"layer {layer} out of range [1, {self.layers}]")
        return layer - 1

    def full_rows(self, layer: int, head: int) -> Array:
        li = self._check_layer(layer)
        if not 1 <= head <= self.heads:
            raise IndexError(f"head {head} out of range [1, {self.heads}]")
        return self.rows[li][head - 1]

    def visual_rows(self, layer: int, head: int) -> Array:
        return self.full_rows(layer, head)[:, : self.n_visual]


@dataclass(frozen=True)
class RelevanceScores:
    """Per-visual-token relevance aligned with the record's global indices."""

    values: Array
    global_index: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "global_index", np.asarray(self.global_index, dtype=np.int64))
        if self.values.shape != self.global_index.shape:
            raise ConfigurationError("values and global_index must align")


def relevance_scores(record: AttentionRecord, layer: int) -> RelevanceScores:
    """Mean attention mass each visual token receives at ``layer``, averaged
    over heads and query rows."""
    li = record._check_layer(layer)
    acc = np.zeros(record.n_visual)
    for head_rows in record.rows[li]:
        acc += head_rows[:, : record.n_visual].mean(axis=0)
    return RelevanceScores(acc / record.heads, record.global_index.copy())


# ---------------------------------------------------------------------------
# Trainable tiny model


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    feature_dim: int = 16
    vocab: int = 8
    max_len: int = 512
    seed: int = 0

    def dims(self) -> DecoderDims:
        return DecoderDims(
            layers=self.layers,
            heads=self.heads,
            hidden=self.hidden,
            ffn=self.ffn,
            feature_dim=self.feature_dim,
            vocab=self.vocab,
            max_len=self.max_len,
        )


def init_reference_model(config: ModelConfig) -> dict[str, Tensor]:
    """Seeded weights, including a classification head over the vocab (the
    planted needle-class task labels tokens by payload id)."""
    return init_decoder_params(config.dims(), config.seed, classifier_width=config.vocab)


def forward_with_attention(
    config: ModelConfig,
    params: dict[str, Tensor],
    seq: TokenSequence,
    *,
    upto_layer: int | None = None,
) -> tuple[AttentionRecord, Tensor]:
    """Run the tiny model and capture attention. Deterministic for fixed
    (weights, sequence)."""
    dims = config.dims()
    validate_params(dims, params, classifier_width=config.vocab)
    attn, hidden = decoder_forward(
        dims, params, seq.visual, seq.query, upto_layer=upto_layer
    )
    m = seq.n_visual
    rows = [[head.data[m:, :].copy() for head in layer] for layer in attn]
    record = AttentionRecord(
        heads=config.heads,
        n_visual=m,
        n_query=seq.n_query,
        global_index=seq.global_index.copy(),
        rows=rows,
    )
    return record, hidden


def payload_logits(config: ModelConfig, params: dict[str, Tensor], seq: TokenSequence) -> Tensor:
    """Classification logits read at the final position, used to train the
    tiny model on the planted needle-class task."""
    _, hidden = forward_with_attention(config, params, seq)
    n = seq.n_visual + seq.n_query
    last = hidden[n - 1 : n, :]
    logits = nm.add(nm.matmul(last, params["head.w"]), params["head.b"])
    return nm.reshape(logits, (logits.data.shape[1],))


# ---------------------------------------------------------------------------
# Planted oracle


@dataclass(frozen=True)
class PlantedSpec:
    """Deterministic attention generator with a known relevant set.

    At layer ``l`` every query row assigns total mass ``concentration[l-1]``
    uniformly over the relevant tokens and the rest uniformly over the other
    attended positions. Logits are perturbed by noise of scale ``noise``
    derived from fixed seeded directions dotted with each token's features,
    so a record is a pure function of (spec, sequence).
    """

    layers: int
    heads: int
    relevant: frozenset[int]
    peak_layer: int
    concentration: tuple[float, ...]
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.layers < 1 or self.heads < 1:
            raise ConfigurationError("layers and heads must be positive")
        if not self.relevant:
            raise ConfigurationError("relevant set must be nonempty")
        if not 1 <= self.peak_layer <= self.layers:
            raise ConfigurationError(
                f"peak layer {self.peak_layer} out of range [1, {self.layers}]"
            )
        if len(self.concentration) != self.layers:
            raise ConfigurationError("need one concentration value per layer")
        c = np.asarray(self.concentration, dtype=np.float64)
        if c.min() < 0.0 or c.max() > 1.0:
            raise ConfigurationError("concentration values must lie in [0, 1]")
        peak = c[self.peak_layer - 1]
        others = np.delete(c, self.peak_layer - 1)
        if others.size and peak <= others.max():
            raise ConfigurationError("peak layer concentration must be the strict maximum")
        if self.noise < 0.0:
            raise ConfigurationError("noise must be nonnegative")


def make_concentration_profile(
    layers: int,
    peak_layer: int,
    *,
    n_visual: int,
    n_relevant: int,
    n_query: int = 1,
    peak: float = 0.9,
    floor_frac: float = 0.3,
    ceil_frac: float = 0.9,
) -> tuple[float, ...]:
    """Tent-shaped profile kept strictly below the uniform-attention level
    except at the peak layer.

    The uniform level is |R| / (attended positions); once concentration
    crosses it the relevant tokens outrank everything even with zero noise,
    so only the peak layer is allowed above. The sub-uniform tent keeps the
    noisy recall curve rising toward the peak and falling after it.
    """
    if not 1 <= peak_layer <= layers:
        raise ConfigurationError(f"peak layer {peak_layer} out of range [1, {layers}]")
    uniform = n_relevant / (n_visual + n_query)
    if not uniform < peak <= 1.0:
        raise ConfigurationError(
            f"peak concentration {peak} must exceed the uniform level {uniform:.4f}"
        )
    lo, hi = floor_frac * uniform, ceil_frac * uniform
    values = []
    for layer in range(1, layers + 1):
        if layer == peak_layer:
            values.append(peak)
            continue
        if layer < peak_layer:
            t = (layer - 1) / max(1, peak_layer - 1)
        else:
            t = (layers - layer) / max(1, layers - peak_layer)
        values.append(lo + (hi - lo) * t)
    return tuple(values)


def _noise_directions(spec: PlantedSpec, feature_dim: int) -> Array:
    rng = np.random.default_rng(spec.seed)
    u = rng.normal(size=(spec.layers, spec.heads, feature_dim))
    norms = np.linalg.norm(u, axis=2, keepdims=True)
    return u / np.where(norms == 0.0, 1.0, norms)


def _planted_row(
    n_visual: int,
    attended: int,
    relevant_pos: Array,
    concentration: float,
    noise_logits: Array | None,
) -> Array:
    """One attention row over ``attended`` positions; positions past the
    causal horizon are left at exactly zero."""
    target = np.zeros(attended)
    n_rel = relevant_pos.size
    if n_rel:
        target[relevant_pos] = concentration / n_rel
        rest = 1.0 - concentration
    else:
        rest = 1.0
    others = attended - n_rel
    if others:
        mask = np.ones(attended, dtype=bool)
        mask[relevant_pos] = False
        target[mask] = rest / others
    logits = np.where(target > 0.0, np.log(np.where(target > 0.0, target, 1.0)), -np.inf)
    if noise_logits is not None:
        visual_span = min(n_visual, attended)
        head = logits[:visual_span]
        logits[:visual_span] = np.where(
            np.isfinite(head), head + noise_logits[:visual_span], head
        )
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def planted_forward(spec: PlantedSpec, seq: TokenSequence) -> AttentionRecord:
    """Build the oracle's attention record for ``seq``.

    The relevant set must be a subset of the sequence's visual global
    indices; identical (spec, sequence) pairs reproduce identical records.
    """
    m = seq.n_visual
    lookup = {int(g): i for i, g in enumerate(seq.global_index)}
    try:
        rel_pos = np.asarray(sorted(lookup[g] for g in spec.relevant), dtype=np.intp)
    except KeyError as missing:
        raise IndexError(f"relevant token {missing.args[0]} not in sequence") from None
    dirs = _noise_directions(spec, seq.visual.shape[1])
    rows: list[list[Array]] = []
    total = m + seq.n_query
    for layer in range(spec.layers):
        c = spec.concentration[layer]
        layer_rows: list[Array] = []
        for head in range(spec.heads):
            noise = spec.noise * (seq.visual @ dirs[layer, head]) if spec.noise else None
            mat = np.zeros((seq.n_query, total))
            for q in range(seq.n_query):
                attended = m + q + 1
                mat[q, :attended] = _planted_row(m, attended, rel_pos, c, noise)
            layer_rows.append(mat)
        rows.append(layer_rows)
    return AttentionRecord(
        heads=spec.heads,
        n_visual=m,
        n_query=seq.n_query,
        global_index=seq.global_index.copy(),
        rows=rows,
    )


@dataclass(frozen=True)
class TeacherTemplate:
    """Planted-oracle parameters reusable across many haystacks; the seed
    fixes one teacher identity for a whole dataset."""

    layers: int = 8
    heads: int = 4
    peak_layer: int = 5
    noise: float = 0.05
    peak: float = 0.9
    floor_frac: float = 0.3
    ceil_frac: float = 0.9
    seed: int = 7


def planted_for_sequence(
    template: TeacherTemplate, seq: TokenSequence, relevant: frozenset[int]
) -> PlantedSpec:
    profile = make_concentration_profile(
        template.layers,
        template.peak_layer,
        n_visual=seq.n_visual,
        n_relevant=len(relevant),
        n_query=seq.n_query,
        peak=template.peak,
        floor_frac=template.floor_frac,
        ceil_frac=template.ceil_frac,
    )
    return PlantedSpec(
        layers=template.layers,
        heads=template.heads,
        relevant=frozenset(int(g) for g in relevant),
        peak_layer=template.peak_layer,
        concentration=profile,
        noise=template.noise,
        seed=template.seed,
    )
