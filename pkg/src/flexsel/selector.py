"""Lightweight token selector trained by rank distillation.

The selector is a small decoder of the same shape as the reference model.
Its score for a visual token is the head-averaged final-layer attention the
query places on that token, so it reads relevance off its own forward pass
exactly the way the reference relevance is read off the big model. Training
minimizes one minus the soft Spearman correlation against frozen teacher
scores.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .decoder import DecoderDims, decoder_forward, init_decoder_params, validate_params
from .errors import ConfigurationError, TrainingDivergenceError, WeightFormatError
from .numerics import Tensor
from .pipeline import PartitionSpec, SelectedTokens, SelectionConfig, run_training_free
from .probe import HaystackSpec, build_haystack
from .reference import (
    TeacherTemplate,
    TokenSequence,
    planted_for_sequence,
    planted_forward,
    relevance_scores,
)
from .softrank import SoftRankConfig, rank_loss, spearman
from .weightfile import load_tensors, save_tensors

Array = np.ndarray


@dataclass(frozen=True)
class SelectorConfig:
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    ffn: int | None = None
    feature_dim: int = 16
    vocab: int = 8
    max_len: int = 512
    score_head: str = "attention"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.score_head not in ("attention", "linear"):
            raise ConfigurationError(
                f"score_head must be 'attention' or 'linear', got {self.score_head!r}"
            )

    @property
    def ffn_width(self) -> int:
        return 4 * self.hidden if self.ffn is None else self.ffn

    def dims(self) -> DecoderDims:
        return DecoderDims(
            layers=self.layers,
            heads=self.heads,
            hidden=self.hidden,
            ffn=self.ffn_width,
            feature_dim=self.feature_dim,
            vocab=self.vocab,
            max_len=self.max_len,
        )


@dataclass
class SelectorWeights:
    config: SelectorConfig
    tensors: dict[str, Tensor]


def init_selector(config: SelectorConfig) -> SelectorWeights:
    params = init_decoder_params(
        config.dims(), config.seed, linear_score_head=config.score_head == "linear"
    )
    return SelectorWeights(config=config, tensors=params)


def selector_forward(weights: SelectorWeights, seq: TokenSequence) -> Tensor:
    """Per-token scores as a 1-D tensor wired for gradients.

    Attention scoring averages the final layer's post-softmax query-to-visual
    weights over heads and query rows; the optional linear head reads scores
    off the final hidden states of the visual positions instead.
    """
    cfg = weights.config
    dims = cfg.dims()
    validate_params(dims, weights.tensors, linear_score_head=cfg.score_head == "linear")
    attn, hidden = decoder_forward(dims, weights.tensors, seq.visual, seq.query)
    m = seq.n_visual
    if cfg.score_head == "linear":
        scores = nm.add(
            nm.matmul(hidden[0:m, :], weights.tensors["score.w"]),
            weights.tensors["score.b"],
        )
        return nm.reshape(scores, (m,))
    acc: Tensor | None = None
    for head in attn[-1]:
        block = head[m:, 0:m]
        acc = block if acc is None else nm.add(acc, block)
    averaged = nm.mul(acc, 1.0 / cfg.heads)
    return nm.mean(averaged, axis=0)


@dataclass
class SelectorScorer:
    """Pipeline adapter: scores are the selector's detached outputs."""

    weights: SelectorWeights

    @property
    def max_context(self) -> int:
        return self.weights.config.max_len

    def score(self, tokens: TokenSequence) -> Array:
        return selector_forward(self.weights, tokens).data.copy()


def run_lite(
    seq: TokenSequence,
    query: Sequence[int],
    spec: PartitionSpec,
    cfg: SelectionConfig,
) -> SelectedTokens:
    """Training-free pipeline with the selector standing in as scorer."""
    if not isinstance(cfg.scorer, SelectorScorer):
        raise ConfigurationError("run_lite needs a SelectionConfig carrying a SelectorScorer")
    return run_training_free(seq, query, spec, cfg)


# ---------------------------------------------------------------------------
# Distillation data


@dataclass(frozen=True)
class TrainingBatch:
    """One teacher-scored sequence; the query rides inside ``tokens``."""

    tokens: TokenSequence
    teacher: Array
    relevant: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "teacher", np.asarray(self.teacher, dtype=np.float64))
        if self.teacher.shape != (self.tokens.n_visual,):
            raise ConfigurationError(
                f"teacher scores have shape {self.teacher.shape} for {self.tokens.n_visual} tokens"
            )


@dataclass(frozen=True)
class HaystackTemplate:
    """Haystack layout shared by a dataset; payload ids are drawn per sample
    from ``payloads`` distinct directions."""

    frames: int = 32
    tokens_per_frame: int = 4
    needle_frames: int = 2
    payloads: int = 5
    feature_dim: int = 16
    payload_offset: float = 3.0

    def __post_init__(self) -> None:
        if self.payloads < 1 or self.payloads > self.feature_dim:
            raise ConfigurationError(
                f"payloads={self.payloads} needs dedicated axes; feature_dim is {self.feature_dim}"
            )


def make_rank_sample(
    haystack: HaystackTemplate,
    teacher: TeacherTemplate,
    *,
    haystack_seed: int,
    payload: int,
) -> TrainingBatch:
    spec = HaystackSpec(
        frames=haystack.frames,
        tokens_per_frame=haystack.tokens_per_frame,
        needle_frames=haystack.needle_frames,
        payload_id=payload,
        feature_dim=haystack.feature_dim,
        payload_offset=haystack.payload_offset,
        seed=haystack_seed,
    )
    seq, relevant = build_haystack(spec)
    planted = planted_for_sequence(teacher, seq, relevant)
    scores = relevance_scores(planted_forward(planted, seq), teacher.peak_layer)
    return TrainingBatch(tokens=seq, teacher=scores.values, relevant=relevant)


def build_rank_dataset(
    haystack: HaystackTemplate,
    teacher: TeacherTemplate,
    count: int,
    seed: int,
) -> list[TrainingBatch]:
    """Teacher scores are precomputed here once; training never reruns the
    oracle."""
    if count < 1:
        raise ValueError(f"dataset size must be positive, got {count}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        haystack_seed = int(rng.integers(0, 2**62))
        payload = int(rng.integers(0, haystack.payloads))
        samples.append(
            make_rank_sample(haystack, teacher, haystack_seed=haystack_seed, payload=payload)
        )
    return samples


# ---------------------------------------------------------------------------
# Optimizer and training loop


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    warmup_frac: float = 0.05
    eps: float = 0.1
    eps_end: float | None = None
    shuffle: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit: step count,
    first/second moments, the shuffling RNG, and the schedule constants."""

    step: int
    m: dict[str, Array]
    v: dict[str, Array]
    rng: np.random.Generator
    total_steps: int
    warmup_steps: int
    base_lr: float
    weight_decay: float
    beta1: float
    beta2: float
    adam_eps: float

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        return self.base_lr


def init_train_state(
    weights: SelectorWeights, cfg: TrainConfig, total_steps: int
) -> TrainState:
    names = sorted(weights.tensors)
    return TrainState(
        step=0,
        m={n: np.zeros_like(weights.tensors[n].data) for n in names},
        v={n: np.zeros_like(weights.tensors[n].data) for n in names},
        rng=np.random.default_rng(cfg.seed),
        total_steps=total_steps,
        warmup_steps=int(cfg.warmup_frac * total_steps),
        base_lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
    )


def train_step(
    state: TrainState,
    weights: SelectorWeights,
    batch: TrainingBatch | Sequence[TrainingBatch],
    rank_cfg: SoftRankConfig,
) -> float:
    """One adaptive update with decoupled weight decay over the mean rank
    loss of the batch. Weights and state are updated in place; returns the
    loss value."""
    samples = [batch] if isinstance(batch, TrainingBatch) else list(batch)
    if not samples:
        raise ValueError("batch is empty")
    for tensor in weights.tensors.values():
        tensor.zero_grad()
    total: Tensor | None = None
    for sample in samples:
        predicted = selector_forward(weights, sample.tokens)
        loss = rank_loss(sample.teacher, predicted, rank_cfg)
        total = loss if total is None else nm.add(total, loss)
    mean_loss = nm.mul(total, 1.0 / len(samples))
    value = float(mean_loss.data)
    if not np.isfinite(value):
        raise TrainingDivergenceError(state.step)
    mean_loss.backward()
    lr = state.lr_at(state.step)
    t = state.step + 1
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name in sorted(weights.tensors):
        tensor = weights.tensors[name]
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = (state.m[name] / bias1) / (np.sqrt(state.v[name] / bias2) + state.adam_eps)
        if tensor.data.ndim == 2 and state.weight_decay:
            update = update + state.weight_decay * tensor.data
        tensor.data -= lr * update
    state.step = t
    return value


def _eps_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.eps_end is None:
        return cfg.eps
    frac = min(1.0, step / max(1, total_steps - 1))
    return cfg.eps + (cfg.eps_end - cfg.eps) * frac


def mean_holdout_spearman(weights: SelectorWeights, samples: Sequence[TrainingBatch]) -> float:
    """Mean hard Spearman correlation of selector scores against teacher
    scores; the evaluation metric for distillation."""
    if not samples:
        raise ValueError("no holdout samples")
    rhos = [
        spearman(s.teacher, selector_forward(weights, s.tokens).data, mode="hard")
        for s in samples
    ]
    return float(np.mean(rhos))


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    step: int
    loss: float
    holdout_spearman: float


def train(
    config: SelectorConfig,
    dataset: Sequence[TrainingBatch],
    epochs: int,
    cfg: TrainConfig,
    *,
    holdout: Sequence[TrainingBatch] = (),
    weights: SelectorWeights | None = None,
    state: TrainState | None = None,
    stop_after_epochs: int | None = None,
) -> tuple[SelectorWeights, TrainState, list[CurvePoint]]:
    """Run (or resume) distillation toward ``epochs`` total epochs.

    Passing a saved (weights, state) pair continues exactly where it left
    off: the RNG, moments, and the schedule horizon are part of the state,
    so a save/load/continue run is bit-identical to an uninterrupted one.
    ``stop_after_epochs`` bounds how many epochs this call executes, which
    is how a full-horizon run is interrupted without rescaling schedules.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    if epochs < 1:
        raise ValueError(f"epochs must be positive, got {epochs}")
    if stop_after_epochs is not None and stop_after_epochs < 1:
        raise ValueError(f"stop_after_epochs must be positive, got {stop_after_epochs}")
    if weights is None:
        weights = init_selector(config)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    if state is None:
        state = init_train_state(weights, cfg, epochs * steps_per_epoch)
    completed = state.step // steps_per_epoch
    last = epochs if stop_after_epochs is None else min(epochs, completed + stop_after_epochs)
    curve: list[CurvePoint] = []
    for epoch in range(completed + 1, last + 1):
        order = np.arange(len(samples))
        if cfg.shuffle:
            state.rng.shuffle(order)
        losses = []
        for start in range(0, len(samples), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            # Schedules read the horizon fixed at state creation so resumed
            # legs reproduce the uninterrupted run exactly.
            eps = _eps_at(cfg, state.step, state.total_steps)
            losses.append(
                train_step(state, weights, [samples[i] for i in chunk], SoftRankConfig(eps))
            )
        rho = mean_holdout_spearman(weights, holdout) if holdout else float("nan")
        curve.append(
            CurvePoint(epoch=epoch, step=state.step, loss=float(np.mean(losses)), holdout_spearman=rho)
        )
    return weights, state, curve


# ---------------------------------------------------------------------------
# Persistence


def save_weights(weights: SelectorWeights, path, *, extra: dict | None = None) -> None:
    config = {"kind": "selector", **(extra or {}), **asdict(weights.config)}
    save_tensors(path, config, {n: t.data for n, t in weights.tensors.items()})


def load_weights(path) -> SelectorWeights:
    config, tensors = load_tensors(path)
    if config.get("kind") != "selector":
        raise WeightFormatError(f"{path} does not hold selector weights")
    known = {f.name for f in dataclasses.fields(SelectorConfig)}
    fields = {k: v for k, v in config.items() if k in known}
    sel_cfg = SelectorConfig(**fields)
    validate_params(
        sel_cfg.dims(),
        {n: Tensor(a) for n, a in tensors.items()},
        linear_score_head=sel_cfg.score_head == "linear",
    )
    return SelectorWeights(
        config=sel_cfg,
        tensors={n: Tensor(a, requires_grad=True) for n, a in tensors.items()},
    )


def save_train_state(state: TrainState, path, *, extra: dict | None = None) -> None:
    config = {
        "kind": "train_state",
        **(extra or {}),
        "step": state.step,
        "total_steps": state.total_steps,
        "warmup_steps": state.warmup_steps,
        "base_lr": state.base_lr,
        "weight_decay": state.weight_decay,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "adam_eps": state.adam_eps,
        "rng_state": state.rng.bit_generator.state,
    }
    tensors: dict[str, Array] = {}
    for name, arr in state.m.items():
        tensors["m." + name] = arr
    for name, arr in state.v.items():
        tensors["v." + name] = arr
    save_tensors(path, config, tensors)


def save_rank_dataset(
    path,
    samples: Sequence[TrainingBatch],
    haystack: HaystackTemplate,
    *,
    extra: dict | None = None,
) -> None:
    """Write a distillation dataset to the tensor container.

    Every sample must share the template's frame layout so the token index
    structure can be rebuilt from the header alone.
    """
    batch = list(samples)
    if not batch:
        raise ValueError("refusing to save an empty dataset")
    expect = haystack.frames * haystack.tokens_per_frame
    tensors: dict[str, Array] = {}
    for i, sample in enumerate(batch):
        if sample.tokens.n_visual != expect or sample.tokens.n_query != 1:
            raise ConfigurationError(
                f"sample {i} does not match the {haystack.frames}x"
                f"{haystack.tokens_per_frame} single-query layout"
            )
        tag = f"{i:05d}"
        tensors[tag + ".visual"] = sample.tokens.visual
        tensors[tag + ".teacher"] = sample.teacher
        tensors[tag + ".relevant"] = np.asarray(sorted(sample.relevant), dtype=np.float64)
        tensors[tag + ".query"] = np.asarray([float(sample.tokens.query[0])])
    config = {
        "kind": "rank_dataset",
        **(extra or {}),
        "samples": len(batch),
        "haystack": asdict(haystack),
    }
    save_tensors(path, config, tensors)


def load_rank_dataset(path) -> tuple[list[TrainingBatch], dict]:
    config, tensors = load_tensors(path)
    if config.get("kind") != "rank_dataset":
        raise WeightFormatError(f"{path} does not hold a rank dataset")
    layout = config["haystack"]
    frames = int(layout["frames"])
    per_frame = int(layout["tokens_per_frame"])
    n_visual = frames * per_frame
    frame_index = np.repeat(np.arange(1, frames + 1), per_frame)
    within_index = np.tile(np.arange(1, per_frame + 1), frames)
    global_index = np.arange(1, n_visual + 1)
    samples = []
    for i in range(int(config["samples"])):
        tag = f"{i:05d}"
        try:
            visual = tensors[tag + ".visual"]
            teacher = tensors[tag + ".teacher"]
            relevant = tensors[tag + ".relevant"]
            query = tensors[tag + ".query"]
        except KeyError as exc:
            raise WeightFormatError(f"{path} is missing tensor {exc} for sample {i}") from None
        seq = TokenSequence(
            visual=visual,
            frame_index=frame_index,
            within_index=within_index,
            global_index=global_index,
            query=(int(query[0]),),
        )
        samples.append(
            TrainingBatch(
                tokens=seq,
                teacher=teacher,
                relevant=frozenset(int(g) for g in relevant),
            )
        )
    return samples, config


def load_train_state(path) -> TrainState:
    config, tensors = load_tensors(path)
    if config.get("kind") != "train_state":
        raise WeightFormatError(f"{path} does not hold a training state")
    rng = np.random.default_rng(0)
    rng.bit_generator.state = config["rng_state"]
    m = {n[2:]: a for n, a in tensors.items() if n.startswith("m.")}
    v = {n[2:]: a for n, a in tensors.items() if n.startswith("v.")}
    return TrainState(
        step=int(config["step"]),
        m=m,
        v=v,
        rng=rng,
        total_steps=int(config["total_steps"]),
        warmup_steps=int(config["warmup_steps"]),
        base_lr=float(config["base_lr"]),
        weight_decay=float(config["weight_decay"]),
        beta1=float(config["beta1"]),
        beta2=float(config["beta2"]),
        adam_eps=float(config["adam_eps"]),
    )
