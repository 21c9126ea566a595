"""Cost model for the selection pipeline, counted in multiply-accumulates.

One decoder layer over n tokens costs 4nd^2 (QKV and output projections)
plus 2n^2 d (attention scores and value mixing) plus 2ndm (the two FFN
matmuls). Everything downstream is exact integer or rational arithmetic;
floats only appear in the convenience ratio fields.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from .errors import ConfigurationError, EvaluationError


def layer_macs(tokens: int, hidden: int, ffn: int) -> int:
    """MACs for one decoder layer over a dense context of ``tokens``."""
    n, d, m = tokens, hidden, ffn
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


@dataclass(frozen=True)
class FlopsQuery:
    layers: int
    ref_layer: int
    tokens: int
    selected_tokens: int
    hidden: int
    ffn: int
    sets: int
    selector_layers: int
    selector_hidden: int

    def __post_init__(self) -> None:
        for name in (
            "layers",
            "ref_layer",
            "tokens",
            "selected_tokens",
            "hidden",
            "ffn",
            "sets",
            "selector_layers",
            "selector_hidden",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.ref_layer > self.layers:
            raise ConfigurationError(
                f"ref_layer={self.ref_layer} exceeds model depth {self.layers}"
            )
        if self.selected_tokens > self.tokens:
            raise ConfigurationError(
                f"selected_tokens={self.selected_tokens} exceeds token count {self.tokens}"
            )


def flops_full(query: FlopsQuery) -> int:
    """Dense decode: every layer sees every token."""
    return query.layers * layer_macs(query.tokens, query.hidden, query.ffn)


def _stage2(query: FlopsQuery) -> int:
    return query.layers * layer_macs(query.selected_tokens, query.hidden, query.ffn)


def flops_flexselect(query: FlopsQuery) -> Fraction:
    """Truncated big-model scoring over K sets, then a dense decode of the
    selected tokens. Scoring a 1/K slice of the context keeps the projection
    and FFN terms per token but divides the quadratic attention term by K."""
    n, d, m = query.tokens, query.hidden, query.ffn
    stage1 = query.ref_layer * (
        4 * n * d * d + Fraction(2 * n * n * d, query.sets) + 2 * n * d * m
    )
    return stage1 + _stage2(query)


def flops_lite(query: FlopsQuery) -> Fraction:
    """Tiny-selector scoring (attention term only; its projections and FFN
    are negligible at the selector's width) plus the same dense stage 2."""
    n = query.tokens
    stage1 = Fraction(
        2 * query.selector_layers * n * n * query.selector_hidden, query.sets
    )
    return stage1 + _stage2(query)


def ratio_approx(query: FlopsQuery) -> Fraction:
    """Large-n limit of flexselect/full with the selected count held fixed."""
    return Fraction(query.ref_layer, query.layers * query.sets)


@dataclass(frozen=True)
class FlopsReport:
    query: FlopsQuery
    full: int
    flexselect: Fraction
    lite: Fraction
    ratio_flexselect: Fraction
    ratio_lite: Fraction
    ratio_approx: Fraction

    def to_json_dict(self) -> dict:
        """JSON-ready mapping; rationals are emitted as exact 'p/q' strings
        with float companions."""
        return {
            "query": asdict(self.query),
            "macs": {
                "full": self.full,
                "flexselect": str(self.flexselect),
                "lite": str(self.lite),
            },
            "ratios": {
                "flexselect": str(self.ratio_flexselect),
                "lite": str(self.ratio_lite),
                "approx": str(self.ratio_approx),
            },
            "ratios_float": {
                "flexselect": float(self.ratio_flexselect),
                "lite": float(self.ratio_lite),
                "approx": float(self.ratio_approx),
            },
        }


def flops_report(query: FlopsQuery) -> FlopsReport:
    full = flops_full(query)
    flex = flops_flexselect(query)
    lite = flops_lite(query)
    if query.selector_layers < query.ref_layer and query.selector_hidden < query.hidden:
        flex_stage1 = flex - _stage2(query)
        lite_stage1 = lite - _stage2(query)
        if not lite_stage1 < flex_stage1:
            raise EvaluationError(
                "lite scoring must cost less than truncated big-model scoring "
                f"for a strictly smaller selector; got {lite_stage1} >= {flex_stage1}"
            )
    return FlopsReport(
        query=query,
        full=full,
        flexselect=flex,
        lite=lite,
        ratio_flexselect=Fraction(flex, full),
        ratio_lite=Fraction(lite, full),
        ratio_approx=ratio_approx(query),
    )
