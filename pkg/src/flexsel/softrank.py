"""Ranks, differentiable soft ranks, and the Spearman rank loss.

Soft ranks are the Euclidean projection of v / eps onto the permutahedron
generated by (1, ..., M). The projection reduces to sorting plus isotonic
regression; its Jacobian is block-structured (gradients average within each
pooled block), which is what makes the rank loss trainable. As eps shrinks
the soft ranks approach the hard ascending ranks; as it grows they collapse
to the permutahedron centroid (M + 1) / 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError, DegenerateDataError
from .numerics import Tensor

Array = np.ndarray


@dataclass(frozen=True)
class SoftRankConfig:
    """Regularization for soft ranking. ``eps`` is calibrated for inputs
    standardized to unit variance, which :func:`spearman` applies before
    projecting."""

    eps: float = 0.1

    def __post_init__(self) -> None:
        if not np.isfinite(self.eps) or self.eps <= 0.0:
            raise ConfigurationError(f"eps must be positive and finite, got {self.eps}")


def hard_rank(values) -> Array:
    """Ascending ranks (1 = smallest); ties get the average of their span."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    n = v.size
    order = np.argsort(v, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(1, n + 1, dtype=np.float64)
    sorted_vals = v[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pav_nondecreasing(y: Array) -> tuple[Array, list[tuple[int, int]]]:
    """Pool-adjacent-violators fit minimizing ||out - y||^2 subject to
    out[i] <= out[i+1]. Returns the fit and the pooled block spans."""
    n = y.size
    means: list[float] = []
    counts: list[int] = []
    for value in y:
        means.append(float(value))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            total = counts[-2] + counts[-1]
            merged = (means[-2] * counts[-2] + means[-1] * counts[-1]) / total
            means.pop()
            counts.pop()
            means[-1] = merged
            counts[-1] = total
    fit = np.empty(n)
    blocks: list[tuple[int, int]] = []
    start = 0
    for value, count in zip(means, counts):
        fit[start : start + count] = value
        blocks.append((start, start + count))
        start += count
    return fit, blocks


def isotonic_regression(y) -> Array:
    """Least-squares nondecreasing fit of ``y``."""
    arr = np.asarray(y, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("isotonic_regression needs a nonempty input")
    fit, _ = _pav_nondecreasing(arr)
    return fit


def _pav_nonincreasing(y: Array) -> tuple[Array, list[tuple[int, int]]]:
    fit, blocks = _pav_nondecreasing(-y)
    return -fit, blocks


def _project_permutahedron(z: Array) -> tuple[Array, Array, list[tuple[int, int]]]:
    """Euclidean projection of ``z`` onto the permutahedron of (1..M).

    Sort descending, run nonincreasing isotonic regression against the
    descending vertex (M, ..., 1), and subtract the fitted dual from the
    sorted values. Returns (projection, descending order, pooled blocks in
    sorted coordinates).
    """
    n = z.size
    order = np.argsort(-z, kind="stable")
    s = z[order]
    vertex = np.arange(n, 0, -1, dtype=np.float64)
    dual, blocks = _pav_nonincreasing(s - vertex)
    y = np.empty(n)
    y[order] = s - dual
    return y, order, blocks


def soft_rank(values, config: SoftRankConfig | None = None):
    """Soft ascending ranks of ``values``.

    Accepts a plain array (returns an array) or a :class:`Tensor` (returns a
    Tensor wired for reverse-mode gradients through the projection's block
    structure).
    """
    cfg = config or SoftRankConfig()
    if isinstance(values, Tensor):
        return _soft_rank_tensor(values, cfg.eps)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("soft_rank needs a nonempty input")
    projected, _, _ = _project_permutahedron(v / cfg.eps)
    return projected


def _soft_rank_tensor(t: Tensor, eps: float) -> Tensor:
    if t.data.ndim != 1:
        raise ValueError(f"soft_rank expects a 1-D tensor, got shape {t.shape}")
    y, order, blocks = _project_permutahedron(t.data / eps)

    def bw():
        g = out.grad
        gs = g[order]
        pooled = np.empty_like(gs)
        for b0, b1 in blocks:
            pooled[b0:b1] = gs[b0:b1].mean()
        gz = g.copy()
        gz[order] = gs - pooled
        t._acc(gz / eps)

    out = nm._node(y, (t,), bw)
    return out


def _pearson_hard(a: Array, b: Array) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(ac @ ac)
    vb = float(bc @ bc)
    if va == 0.0 or vb == 0.0:
        raise DegenerateDataError("zero rank variance; correlation undefined")
    return float(ac @ bc) / np.sqrt(va * vb)


def _standardize_tensor(t: Tensor) -> Tensor:
    mu = nm.mean(t)
    centered = nm.sub(t, mu)
    std = nm.sqrt(nm.mean(nm.mul(centered, centered)))
    if float(std.data) == 0.0:
        raise DegenerateDataError("constant scores cannot be rank-standardized")
    return nm.div(centered, std)


def spearman(r_ref, r_hat, mode: str = "hard", config: SoftRankConfig | None = None):
    """Spearman rank correlation between reference and predicted scores.

    ``hard`` ranks both sides (average ties) and returns a float. ``soft``
    keeps the reference ranks hard, standardizes the predictions, soft-ranks
    them, and returns a Tensor so the correlation is differentiable in the
    predictions.
    """
    ref = np.asarray(r_ref if not isinstance(r_ref, Tensor) else r_ref.data, dtype=np.float64).reshape(-1)
    if mode == "hard":
        hat = np.asarray(r_hat if not isinstance(r_hat, Tensor) else r_hat.data, dtype=np.float64).reshape(-1)
        if ref.size != hat.size or ref.size < 2:
            raise ValueError(f"need two aligned vectors of length >= 2, got {ref.size} and {hat.size}")
        return _pearson_hard(hard_rank(ref), hard_rank(hat))
    if mode != "soft":
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")
    cfg = config or SoftRankConfig()
    hat_t = r_hat if isinstance(r_hat, Tensor) else Tensor(np.asarray(r_hat, dtype=np.float64))
    if hat_t.data.ndim != 1 or hat_t.data.size != ref.size or ref.size < 2:
        raise ValueError(
            f"need two aligned vectors of length >= 2, got {ref.size} and {hat_t.data.size}"
        )
    ref_ranks = hard_rank(ref)
    rc = ref_ranks - ref_ranks.mean()
    ref_var = float(rc @ rc)
    if ref_var == 0.0:
        raise DegenerateDataError("reference ranks are constant; correlation undefined")
    soft = _soft_rank_tensor(_standardize_tensor(hat_t), cfg.eps)
    if float(np.var(soft.data)) == 0.0:
        raise DegenerateDataError("soft ranks collapsed to a constant; correlation undefined")
    centered = nm.sub(soft, nm.mean(soft))
    num = nm.sum_(nm.mul(centered, rc))
    den = nm.sqrt(nm.mul(nm.sum_(nm.mul(centered, centered)), ref_var))
    return nm.div(num, den)


def rank_loss(r_ref, r_hat, config: SoftRankConfig | None = None) -> Tensor:
    """1 - soft Spearman correlation; zero when rankings agree perfectly,
    approaching two when exactly reversed."""
    rho = spearman(r_ref, r_hat, mode="soft", config=config)
    return nm.sub(1.0, rho)
