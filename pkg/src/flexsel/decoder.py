"""Minimal pre-norm causal decoder with per-head attention capture.

Shared between the trainable reference model and the lightweight selector:
both are the same machine at different sizes. Visual tokens enter through a
linear projector, query tokens through an embedding table, and every block
exposes its post-softmax attention so callers can read cross-modal weights
straight off the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError
from .numerics import Tensor

Array = np.ndarray

_MASK_NEG = -1e30  # drives masked logits to exactly zero after softmax


@dataclass(frozen=True)
class DecoderDims:
    layers: int
    heads: int
    hidden: int
    ffn: int
    feature_dim: int
    vocab: int
    max_len: int

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            raise ConfigurationError(f"heads must be >= 1, got {self.heads}")
        if self.hidden % self.heads != 0:
            raise ConfigurationError(
                f"hidden size {self.hidden} not divisible by {self.heads} heads"
            )
        for name in ("hidden", "ffn", "feature_dim", "vocab", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")


def init_decoder_params(
    dims: DecoderDims,
    seed: int,
    *,
    classifier_width: int | None = None,
    linear_score_head: bool = False,
) -> dict[str, Tensor]:
    """Seeded parameter map. Iteration order is fixed by construction order;
    consumers that need determinism sort by name anyway."""
    rng = np.random.default_rng(seed)

    def mat(rows: int, cols: int, std: float = 0.02) -> Tensor:
        return Tensor(rng.normal(0.0, std, size=(rows, cols)), requires_grad=True)

    def vec(n: int, value: float) -> Tensor:
        return Tensor(np.full(n, value), requires_grad=True)

    params: dict[str, Tensor] = {
        "proj_vis": mat(dims.feature_dim, dims.hidden),
        "tok_emb": mat(dims.vocab, dims.hidden),
        "pos_emb": mat(dims.max_len, dims.hidden, std=0.01),
    }
    for i in range(dims.layers):
        p = f"layer{i}."
        params[p + "ln1.gain"] = vec(dims.hidden, 1.0)
        params[p + "ln1.bias"] = vec(dims.hidden, 0.0)
        params[p + "attn.wq"] = mat(dims.hidden, dims.hidden)
        params[p + "attn.wk"] = mat(dims.hidden, dims.hidden)
        params[p + "attn.wv"] = mat(dims.hidden, dims.hidden)
        params[p + "attn.wo"] = mat(dims.hidden, dims.hidden)
        params[p + "ln2.gain"] = vec(dims.hidden, 1.0)
        params[p + "ln2.bias"] = vec(dims.hidden, 0.0)
        params[p + "ffn.w1"] = mat(dims.hidden, dims.ffn)
        params[p + "ffn.b1"] = vec(dims.ffn, 0.0)
        params[p + "ffn.w2"] = mat(dims.ffn, dims.hidden)
        params[p + "ffn.b2"] = vec(dims.hidden, 0.0)
    params["ln_f.gain"] = vec(dims.hidden, 1.0)
    params["ln_f.bias"] = vec(dims.hidden, 0.0)
    if classifier_width is not None:
        params["head.w"] = mat(dims.hidden, classifier_width)
        params["head.b"] = vec(classifier_width, 0.0)
    if linear_score_head:
        params["score.w"] = mat(dims.hidden, 1)
        params["score.b"] = vec(1, 0.0)
    return params


def expected_param_shapes(
    dims: DecoderDims,
    *,
    classifier_width: int | None = None,
    linear_score_head: bool = False,
) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "proj_vis": (dims.feature_dim, dims.hidden),
        "tok_emb": (dims.vocab, dims.hidden),
        "pos_emb": (dims.max_len, dims.hidden),
    }
    for i in range(dims.layers):
        p = f"layer{i}."
        shapes[p + "ln1.gain"] = (dims.hidden,)
        shapes[p + "ln1.bias"] = (dims.hidden,)
        shapes[p + "attn.wq"] = (dims.hidden, dims.hidden)
        shapes[p + "attn.wk"] = (dims.hidden, dims.hidden)
        shapes[p + "attn.wv"] = (dims.hidden, dims.hidden)
        shapes[p + "attn.wo"] = (dims.hidden, dims.hidden)
        shapes[p + "ln2.gain"] = (dims.hidden,)
        shapes[p + "ln2.bias"] = (dims.hidden,)
        shapes[p + "ffn.w1"] = (dims.hidden, dims.ffn)
        shapes[p + "ffn.b1"] = (dims.ffn,)
        shapes[p + "ffn.w2"] = (dims.ffn, dims.hidden)
        shapes[p + "ffn.b2"] = (dims.hidden,)
    shapes["ln_f.gain"] = (dims.hidden,)
    shapes["ln_f.bias"] = (dims.hidden,)
    if classifier_width is not None:
        shapes["head.w"] = (dims.hidden, classifier_width)
        shapes["head.b"] = (classifier_width,)
    if linear_score_head:
        shapes["score.w"] = (dims.hidden, 1)
        shapes["score.b"] = (1,)
    return shapes


def validate_params(
    dims: DecoderDims,
    params: dict[str, Tensor],
    *,
    classifier_width: int | None = None,
    linear_score_head: bool = False,
) -> None:
    expected = expected_param_shapes(
        dims, classifier_width=classifier_width, linear_score_head=linear_score_head
    )
    for name, shape in expected.items():
        if name not in params:
            raise ConfigurationError(f"missing parameter {name!r}")
        got = params[name].data.shape
        if got != shape:
            raise ConfigurationError(
                f"parameter {name!r} has shape {got}, config expects {shape}"
            )


def _causal_mask(n: int) -> Array:
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = _MASK_NEG
    return mask


def decoder_forward(
    dims: DecoderDims,
    params: dict[str, Tensor],
    visual: Array,
    query_ids: tuple[int, ...],
    *,
    upto_layer: int | None = None,
) -> tuple[list[list[Tensor]], Tensor]:
    """Run the decoder, returning per-layer per-head attention and final
    hidden states.

    ``upto_layer`` (1-based) truncates the stack after that block, which is
    how a scoring pass stops at its reference layer instead of paying for
    the full depth. Attention tensors stay in the autodiff graph so callers
    can differentiate through them.
    """
    visual = np.asarray(visual, dtype=np.float64)
    if visual.ndim != 2 or visual.shape[1] != dims.feature_dim:
        raise ConfigurationError(
            f"visual tokens have shape {visual.shape}, config expects (*, {dims.feature_dim})"
        )
    if len(query_ids) < 1:
        raise ConfigurationError("at least one query token id is required")
    ids = np.asarray(query_ids, dtype=np.intp)
    if ids.min() < 0 or ids.max() >= dims.vocab:
        raise ConfigurationError(f"query token id out of range for vocab {dims.vocab}")
    n_visual = visual.shape[0]
    n = n_visual + ids.size
    if n > dims.max_len:
        raise ConfigurationError(f"sequence length {n} exceeds max_len {dims.max_len}")
    run_layers = dims.layers if upto_layer is None else int(upto_layer)
    if not 1 <= run_layers <= dims.layers:
        raise IndexError(f"layer {upto_layer} out of range [1, {dims.layers}]")

    vis = nm.matmul(Tensor(visual), params["proj_vis"])
    emb = nm.gather_rows(params["tok_emb"], ids)
    x = nm.add(nm.concat([vis, emb], axis=0), params["pos_emb"][0:n])

    mask = Tensor(_causal_mask(n))
    head_dim = dims.hidden // dims.heads
    scale = 1.0 / math.sqrt(head_dim)
    attention: list[list[Tensor]] = []

    for i in range(run_layers):
        p = f"layer{i}."
        h_in = nm.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        q = nm.matmul(h_in, params[p + "attn.wq"])
        k = nm.matmul(h_in, params[p + "attn.wk"])
        v = nm.matmul(h_in, params[p + "attn.wv"])
        per_head: list[Tensor] = []
        contexts: list[Tensor] = []
        for h in range(dims.heads):
            cols = slice(h * head_dim, (h + 1) * head_dim)
            qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
            scores = nm.add(nm.mul(nm.matmul(qh, nm.transpose(kh)), scale), mask)
            attn = nm.softmax_rows(scores)
            per_head.append(attn)
            contexts.append(nm.matmul(attn, vh))
        x = nm.add(x, nm.matmul(nm.concat(contexts, axis=1), params[p + "attn.wo"]))
        f_in = nm.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = nm.add(nm.matmul(nm.gelu(nm.add(nm.matmul(f_in, params[p + "ffn.w1"]), params[p + "ffn.b1"])), params[p + "ffn.w2"]), params[p + "ffn.b2"])
        x = nm.add(x, f)
        attention.append(per_head)

    hidden = nm.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    return attention, hidden
