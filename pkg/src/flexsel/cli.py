"""Command line front end.

Every command resolves its options in three layers (built-in defaults, then
a JSON config file, then command line overrides), hashes the resolved
mapping, and stamps that hash plus the seed into every artifact it writes.
Running a command twice with the same resolved options produces
byte-identical artifacts; wall-clock timing is printed to stderr only when
asked for and never lands in a file.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, FlexselError
from .flops import FlopsQuery, flops_report
from .pipeline import (
    PartitionSpec,
    PlantedLayerScorer,
    SelectionConfig,
    allocate_budget,
    build_frame_sets,
    run_training_free,
)
from .probe import HaystackSpec, build_haystack, profile_layers
from .reference import TeacherTemplate, planted_for_sequence, planted_forward
from .selector import (
    HaystackTemplate,
    SelectorConfig,
    SelectorScorer,
    TrainConfig,
    build_rank_dataset,
    load_rank_dataset,
    load_train_state,
    load_weights,
    run_lite,
    save_rank_dataset,
    save_train_state,
    save_weights,
    train,
)


@dataclass(frozen=True)
class Option:
    name: str
    type: type
    default: object
    help: str


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


_HAYSTACK_OPTIONS = [
    Option("frames", int, 32, "number of frames"),
    Option("tokens_per_frame", int, 4, "visual tokens per frame"),
    Option("needle_frames", int, 2, "frames carrying the payload"),
    Option("payload_id", int, 0, "payload direction and query token id"),
    Option("feature_dim", int, 16, "visual feature width"),
    Option("payload_offset", float, 3.0, "payload bump added to needle tokens"),
]

_TEACHER_OPTIONS = [
    Option("layers", int, 8, "teacher depth"),
    Option("heads", int, 4, "teacher heads per layer"),
    Option("peak_layer", int, 5, "layer whose attention concentrates on the needle"),
    Option("noise", float, 0.05, "attention noise scale"),
    Option("teacher_seed", int, 7, "seed for the teacher's noise directions"),
]

_SELECTION_OPTIONS = [
    Option("max_set_frames", int, 16, "frame capacity of one scored set"),
    Option("budget", int, 0, "token budget; 0 derives it from the ratio"),
    Option("ratio", float, 0.0625, "selected fraction when no budget is given"),
]

_SELECTOR_OPTIONS = [
    Option("selector_layers", int, 2, "selector depth"),
    Option("selector_heads", int, 2, "selector heads per layer"),
    Option("selector_hidden", int, 32, "selector width"),
    Option("selector_ffn", int, 0, "selector FFN width; 0 means four times the width"),
    Option("score_head", str, "attention", "'attention' or 'linear' score read-out"),
    Option("vocab", int, 8, "query token vocabulary size"),
    Option("max_len", int, 512, "selector context limit"),
]

_SEED = Option("seed", int, 0, "master seed")

OPTIONS: dict[str, list[Option]] = {
    "gen": _HAYSTACK_OPTIONS
    + _TEACHER_OPTIONS
    + [
        Option("payloads", int, 5, "distinct payload ids to sample"),
        Option("count", int, 64, "training samples"),
        Option("holdout", int, 16, "holdout samples"),
        _SEED,
    ],
    "profile": _HAYSTACK_OPTIONS
    + _TEACHER_OPTIONS
    + [
        Option("k", int, 0, "recall cutoff; 0 means the needle token count"),
        _SEED,
    ],
    "select": _HAYSTACK_OPTIONS
    + _TEACHER_OPTIONS
    + _SELECTION_OPTIONS
    + [
        Option("route", str, "planted", "'planted' or 'lite' scoring route"),
        Option("weights", str, "", "selector weights for the lite route"),
        Option("layer", int, 0, "scoring layer; 0 means the teacher's peak"),
        _SEED,
    ],
    "train": _SELECTOR_OPTIONS
    + [
        Option("data", str, "", "training dataset written by gen"),
        Option("holdout_data", str, "", "holdout dataset written by gen"),
        Option("epochs", int, 5, "total planned epochs (the schedule horizon)"),
        Option("stop_after", int, 0, "epochs to run this invocation; 0 runs to the end"),
        Option("batch_size", int, 4, "samples per update"),
        Option("lr", float, 3e-4, "peak learning rate"),
        Option("weight_decay", float, 0.01, "decoupled weight decay on matrices"),
        Option("warmup_frac", float, 0.05, "fraction of steps spent warming up"),
        Option("eps", float, 0.1, "soft rank temperature"),
        Option("eps_end", float, 0.0, "final temperature; 0 keeps it constant"),
        Option("shuffle", bool, True, "reshuffle samples every epoch"),
        Option("resume_weights", str, "", "weights file to continue from"),
        Option("resume_state", str, "", "optimizer state file to continue from"),
        _SEED,
    ],
    "eval": _HAYSTACK_OPTIONS
    + _TEACHER_OPTIONS
    + _SELECTION_OPTIONS
    + [
        Option("route", str, "planted", "'planted' or 'lite' scoring route"),
        Option("weights", str, "", "selector weights for the lite route"),
        Option("layer", int, 0, "scoring layer; 0 means the teacher's peak"),
        Option("count", int, 100, "independent instances"),
        _SEED,
    ],
    "flops": [
        Option("layers", int, 28, "big model depth"),
        Option("ref_layer", int, 19, "layers run for scoring"),
        Option("tokens", int, 4096, "context tokens fed to scoring"),
        Option("selected_tokens", int, 0, "tokens kept; 0 derives from the ratio"),
        Option("ratio", float, 0.0625, "selected fraction when no count is given"),
        Option("hidden", int, 3584, "big model width"),
        Option("ffn", int, 18944, "big model FFN width"),
        Option("sets", int, 8, "frame sets scored independently"),
        Option("selector_layers", int, 2, "lite selector depth"),
        Option("selector_hidden", int, 32, "lite selector width"),
        _SEED,
    ],
}


def _coerce(option: Option, raw: str) -> object:
    if option.type is bool:
        return _parse_bool(raw)
    try:
        return option.type(raw)
    except ValueError:
        raise ConfigurationError(
            f"option {option.name} expects {option.type.__name__}, got {raw!r}"
        ) from None


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Layer defaults, config file, then command line; reject unknown keys."""
    table = {opt.name: opt for opt in OPTIONS[command]}
    resolved = {name: opt.default for name, opt in table.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in table:
                raise ConfigurationError(f"unknown option {key!r} in config file")
            opt = table[key]
            resolved[key] = _coerce(opt, str(value)) if isinstance(value, str) else value
    for pair in args.overrides or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        if key not in table:
            raise ConfigurationError(f"unknown option {key!r} for {command}")
        resolved[key] = _coerce(table[key], raw)
    for name, opt in table.items():
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    for name, opt in table.items():
        value = resolved[name]
        if opt.type is bool:
            if not isinstance(value, bool):
                raise ConfigurationError(f"option {name} must be a boolean, got {value!r}")
        elif opt.type is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigurationError(f"option {name} must be a number, got {value!r}")
            resolved[name] = float(value)
        elif not isinstance(value, opt.type) or isinstance(value, bool) and opt.type is int:
            raise ConfigurationError(
                f"option {name} must be {opt.type.__name__}, got {value!r}"
            )
    return resolved


def config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _stamp(resolved: dict) -> str:
    return f"# seed={resolved['seed']} config_hash={config_hash(resolved)}"


def _format_cell(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, resolved: dict, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [_stamp(resolved), ",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row width {len(row)} does not match header {columns}")
        lines.append(",".join(_format_cell(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path: Path, resolved: dict, payload: dict) -> None:
    body = {"seed": resolved["seed"], "config_hash": config_hash(resolved), **payload}
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _haystack_spec(opts: dict, seed: int) -> HaystackSpec:
    return HaystackSpec(
        frames=opts["frames"],
        tokens_per_frame=opts["tokens_per_frame"],
        needle_frames=opts["needle_frames"],
        payload_id=opts["payload_id"],
        feature_dim=opts["feature_dim"],
        payload_offset=opts["payload_offset"],
        seed=seed,
    )


def _teacher_template(opts: dict) -> TeacherTemplate:
    return TeacherTemplate(
        layers=opts["layers"],
        heads=opts["heads"],
        peak_layer=opts["peak_layer"],
        noise=opts["noise"],
        seed=opts["teacher_seed"],
    )


# ---------------------------------------------------------------------------
# Commands


def _cmd_gen(opts: dict, out: Path) -> None:
    haystack = HaystackTemplate(
        frames=opts["frames"],
        tokens_per_frame=opts["tokens_per_frame"],
        needle_frames=opts["needle_frames"],
        payloads=opts["payloads"],
        feature_dim=opts["feature_dim"],
        payload_offset=opts["payload_offset"],
    )
    teacher = _teacher_template(opts)
    extra = {"seed": opts["seed"], "config_hash": config_hash(opts)}
    samples = build_rank_dataset(haystack, teacher, opts["count"], opts["seed"])
    save_rank_dataset(out / "train.flxs", samples, haystack, extra=extra)
    written = [f"train.flxs ({opts['count']} samples)"]
    if opts["holdout"] > 0:
        held = build_rank_dataset(haystack, teacher, opts["holdout"], opts["seed"] + 1)
        save_rank_dataset(out / "holdout.flxs", held, haystack, extra=extra)
        written.append(f"holdout.flxs ({opts['holdout']} samples)")
    print("wrote " + " and ".join(written))


def _cmd_profile(opts: dict, out: Path) -> None:
    seq, relevant = build_haystack(_haystack_spec(opts, opts["seed"]))
    planted = planted_for_sequence(_teacher_template(opts), seq, relevant)
    record = planted_forward(planted, seq)
    result = profile_layers(record, relevant, opts["k"] or None)
    rows = [
        (layer, recall, result.k, int(layer == result.reference_layer))
        for layer, recall in enumerate(result.recall, start=1)
    ]
    write_csv(out / "probe.csv", opts, ("layer", "recall", "k", "is_reference"), rows)
    print(f"reference layer: {result.reference_layer}")


def _cmd_select(opts: dict, out: Path) -> None:
    seq, relevant = build_haystack(_haystack_spec(opts, opts["seed"]))
    spec = PartitionSpec(opts["frames"], opts["max_set_frames"])
    layer = opts["layer"] or None
    if opts["route"] == "planted":
        planted = planted_for_sequence(_teacher_template(opts), seq, relevant)
        scorer = PlantedLayerScorer(planted, layer=layer)
        runner = run_training_free
    elif opts["route"] == "lite":
        if not opts["weights"]:
            raise ConfigurationError("the lite route needs --weights")
        scorer = SelectorScorer(load_weights(opts["weights"]))
        runner = run_lite
    else:
        raise ConfigurationError(f"unknown route {opts['route']!r}")
    cfg = SelectionConfig(
        scorer=scorer,
        budget=opts["budget"] or None,
        ratio=opts["ratio"],
    )
    selected = runner(seq, seq.query, spec, cfg)
    sets = build_frame_sets(seq, spec)
    capacities = [fs.tokens.n_visual for fs in sets]
    budget = cfg.resolve_budget(sum(capacities))
    per_set = allocate_budget(budget, capacities)
    payload = {
        "budget": budget,
        "sets": spec.sets,
        "per_set_k": list(per_set),
        "selected": [
            {"global_index": int(g), "score": float(s), "set": int(k)}
            for g, s, k in zip(selected.global_index, selected.score, selected.set_index)
        ],
    }
    write_json(out / "selection.json", opts, payload)
    hits = len(set(selected.global_index) & relevant)
    print(f"selected {len(selected.global_index)} tokens; needle hits {hits}/{len(relevant)}")


def _cmd_train(opts: dict, out: Path) -> None:
    if not opts["data"]:
        raise ConfigurationError("train needs --data pointing at a dataset from gen")
    samples, meta = load_rank_dataset(opts["data"])
    holdout = []
    if opts["holdout_data"]:
        holdout, _ = load_rank_dataset(opts["holdout_data"])
    feature_dim = int(meta["haystack"]["feature_dim"])
    config = SelectorConfig(
        layers=opts["selector_layers"],
        heads=opts["selector_heads"],
        hidden=opts["selector_hidden"],
        ffn=opts["selector_ffn"] or None,
        feature_dim=feature_dim,
        vocab=opts["vocab"],
        max_len=opts["max_len"],
        score_head=opts["score_head"],
        seed=opts["seed"],
    )
    train_cfg = TrainConfig(
        lr=opts["lr"],
        weight_decay=opts["weight_decay"],
        batch_size=opts["batch_size"],
        warmup_frac=opts["warmup_frac"],
        eps=opts["eps"],
        eps_end=opts["eps_end"] if opts["eps_end"] > 0 else None,
        shuffle=opts["shuffle"],
        seed=opts["seed"],
    )
    weights = load_weights(opts["resume_weights"]) if opts["resume_weights"] else None
    state = load_train_state(opts["resume_state"]) if opts["resume_state"] else None
    weights, state, curve = train(
        config,
        samples,
        opts["epochs"],
        train_cfg,
        holdout=holdout,
        weights=weights,
        state=state,
        stop_after_epochs=opts["stop_after"] or None,
    )
    extra = {"seed": opts["seed"], "config_hash": config_hash(opts)}
    save_weights(weights, out / "weights.flxs", extra=extra)
    save_train_state(state, out / "state.flxs", extra=extra)
    rows = [(p.epoch, p.step, p.loss, p.holdout_spearman) for p in curve]
    write_csv(out / "curve.csv", opts, ("epoch", "step", "loss", "holdout_spearman"), rows)
    if curve:
        last = curve[-1]
        print(
            f"epoch {last.epoch}: loss={last.loss:.6f} "
            f"holdout_spearman={last.holdout_spearman:.4f}"
        )
    else:
        print("nothing to train: requested epochs already completed")


def _cmd_eval(opts: dict, out: Path) -> None:
    route = opts["route"]
    if route not in ("planted", "lite"):
        raise ConfigurationError(f"unknown route {route!r}")
    selector_weights = None
    if route == "lite":
        if not opts["weights"]:
            raise ConfigurationError("the lite route needs --weights")
        selector_weights = load_weights(opts["weights"])
    template = _teacher_template(opts)
    spec = PartitionSpec(opts["frames"], opts["max_set_frames"])
    layer = opts["layer"] or None

    def run_one(index: int) -> tuple[int, int, float]:
        instance_seed = opts["seed"] + index
        seq, relevant = build_haystack(_haystack_spec(opts, instance_seed))
        if route == "planted":
            scorer = PlantedLayerScorer(
                planted_for_sequence(template, seq, relevant), layer=layer
            )
            runner = run_training_free
        else:
            scorer = SelectorScorer(selector_weights)
            runner = run_lite
        cfg = SelectionConfig(scorer=scorer, budget=opts["budget"] or None, ratio=opts["ratio"])
        selected = runner(seq, seq.query, spec, cfg)
        recall = len(set(selected.global_index) & relevant) / len(relevant)
        return (index, instance_seed, recall)

    workers = max(1, int(os.environ.get("FLEXSEL_THREADS", "1")))
    indices = range(1, opts["count"] + 1)
    if workers == 1:
        rows = [run_one(i) for i in indices]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, indices))
    write_csv(out / "eval.csv", opts, ("instance", "seed", "recall"), rows)
    mean_recall = float(np.mean([r[2] for r in rows]))
    print(f"route={route} instances={opts['count']} mean_recall={mean_recall:.4f}")


def _cmd_flops(opts: dict, out: Path) -> None:
    selected = opts["selected_tokens"] or max(1, round(opts["ratio"] * opts["tokens"]))
    query = FlopsQuery(
        layers=opts["layers"],
        ref_layer=opts["ref_layer"],
        tokens=opts["tokens"],
        selected_tokens=selected,
        hidden=opts["hidden"],
        ffn=opts["ffn"],
        sets=opts["sets"],
        selector_layers=opts["selector_layers"],
        selector_hidden=opts["selector_hidden"],
    )
    report = flops_report(query)
    write_json(out / "flops.json", opts, report.to_json_dict())
    print(
        f"full={report.full} "
        f"flexselect_ratio={float(report.ratio_flexselect):.6f} "
        f"lite_ratio={float(report.ratio_lite):.6f} "
        f"approx_ratio={float(report.ratio_approx):.6f}"
    )


_COMMANDS: dict[str, Callable[[dict, Path], None]] = {
    "gen": _cmd_gen,
    "profile": _cmd_profile,
    "select": _cmd_select,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "flops": _cmd_flops,
}

_SUMMARIES = {
    "gen": "generate a teacher-scored distillation dataset",
    "profile": "rank layers by needle recall and pick the reference layer",
    "select": "run token selection over one haystack",
    "train": "distill the lightweight selector",
    "eval": "measure needle recall of a selection route over many instances",
    "flops": "report the arithmetic cost model",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexsel",
        description="Token selection for long token streams: scoring, selection, distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, table in OPTIONS.items():
        p = sub.add_parser(command, help=_SUMMARIES[command])
        p.add_argument("--config", default="", help="JSON file with option values")
        p.add_argument("--out", default=".", help="directory for artifacts")
        p.add_argument(
            "--set",
            action="append",
            dest="overrides",
            metavar="KEY=VALUE",
            default=[],
            help="override one option",
        )
        p.add_argument("--json-errors", action="store_true", help="report errors as JSON")
        p.add_argument("--timing", action="store_true", help="print wall time to stderr")
        for opt in table:
            flag = "--" + opt.name.replace("_", "-")
            if opt.type is bool:
                p.add_argument(flag, type=_parse_bool, default=None, help=opt.help)
            else:
                p.add_argument(flag, type=opt.type, default=None, help=opt.help)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        resolved = resolve_options(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](resolved, out)
    except (FlexselError, ValueError) as exc:
        if args.json_errors:
            body = {"error": type(exc).__name__, "message": str(exc)}
            print(json.dumps(body, sort_keys=True), file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if args.timing:
            print(f"elapsed_seconds={time.perf_counter() - started:.3f}", file=sys.stderr)
    return 0
