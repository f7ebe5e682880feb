"""Command-line surface: transforms, training, parsing, scoring, mixing.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
input, alignment mismatch, bad model file), 3 internal error.  All file
arguments accept ``-`` for stdin/stdout where a stream makes sense.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from dataclasses import replace

import torch

from .conllu import (
    collapse_empty_nodes,
    expand_empty_nodes,
    graph_from_indexed_arcs,
    graph_of,
    indexed_arcs,
    merge_multi_arcs,
    parse_conllu,
    sentence_with_graph,
    split_multi_arcs,
    write_conllu,
)
from .errors import EudError
from .inference import MODES, parse_sentence
from .metrics import elas, format_report, lf1
from .model import (
    DIM_PROFILES,
    STRUCTURE_TYPES,
    build_vocab,
    init_params,
    load_model,
    save_model,
)
from .training import TrainConfig, TrainingExample, train

MASK_KEY = "labels_masked"
MASK_LABEL = "_"


class UsageError(Exception):
    """Bad flag or flag combination; exits with status 1."""


# ---------------------------------------------------------------------------
# Small I/O helpers
# ---------------------------------------------------------------------------


def _read_text(path):
    if path == "-":
        return sys.stdin.read()
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _write_text(path, text):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


_EXTRA_CONFIG_KEYS = ("dims", "structure_types", "mode", "iterations", "jobs")


def _known_config_keys():
    keys = {f.name for f in dataclass_fields(TrainConfig)}
    keys.update(_EXTRA_CONFIG_KEYS)
    return keys


def _read_config(path):
    """Parse a key=value config file; '#' starts a comment line."""
    values = {}
    known = _known_config_keys()
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise EudError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise EudError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _resolve(args, config_values, key, default, cast):
    """Flag wins over config file wins over default."""
    cli = getattr(args, key, None)
    if cli is not None:
        return cli
    if key in config_values:
        raw = config_values[key]
        try:
            return cast(raw)
        except ValueError:
            raise EudError(f"config: bad value for {key}: {raw!r}") from None
    return default


# ---------------------------------------------------------------------------
# Data preparation shared by train/parse/eval
# ---------------------------------------------------------------------------


def _is_masked(sentence):
    for key, value in sentence.metadata:
        if key == MASK_KEY and (value or "").lower() in ("yes", "true", "1"):
            return True
    return False


def sentence_to_example(sentence):
    """Collapse + merge the sentence graph into an integer-indexed example."""
    graph = merge_multi_arcs(collapse_empty_nodes(graph_of(sentence)))
    words = tuple(sentence.words())
    return TrainingExample(
        words=words,
        gold_arcs=indexed_arcs(graph),
        labels_masked=_is_masked(sentence),
    )


def _mask_sentence(sentence):
    tokens = []
    for token in sentence.tokens:
        deps = tuple(
            dict.fromkeys((head, MASK_LABEL) for head, _ in token.enhanced_deps)
        )
        tokens.append(replace(token, enhanced_deps=deps))
    metadata = tuple(kv for kv in sentence.metadata if kv[0] != MASK_KEY)
    metadata += ((MASK_KEY, "yes"),)
    return replace(sentence, tokens=tuple(tokens), metadata=metadata)


def _parse_structure_types(text):
    if text.strip().lower() in ("none", ""):
        return ()
    types = tuple(part.strip() for part in text.split(","))
    for stype in types:
        if stype not in STRUCTURE_TYPES:
            raise UsageError(
                f"unknown structure type {stype!r} (choose from "
                f"{', '.join(STRUCTURE_TYPES)}, or 'none')"
            )
    return types


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

_TRANSFORMS = {
    "collapse": (collapse_empty_nodes, "replace empty nodes with `>` labels"),
    "expand": (expand_empty_nodes, "reintroduce empty nodes from `>` labels"),
    "merge": (merge_multi_arcs, "join parallel arcs with `+` labels"),
    "split": (split_multi_arcs, "split `+` labels into parallel arcs"),
}


def cmd_transform(args):
    fn = _TRANSFORMS[args.command][0]
    sentences = parse_conllu(_read_text(args.input))
    out = [sentence_with_graph(s, fn(graph_of(s))) for s in sentences]
    _write_text(args.output, write_conllu(out))


def cmd_train(args):
    if args.model == "-":
        raise UsageError("model output must be a real file path, not '-'")
    config_values = _read_config(args.config) if args.config else {}
    kwargs = {}
    for f in dataclass_fields(TrainConfig):
        kwargs[f.name] = _resolve(args, config_values, f.name, f.default, type(f.default))
    config = TrainConfig(**kwargs)
    dims_name = _resolve(args, config_values, "dims", "desk", str)
    if dims_name not in DIM_PROFILES:
        raise UsageError(
            f"unknown dims profile {dims_name!r} (choose from {', '.join(DIM_PROFILES)})"
        )
    types_text = _resolve(args, config_values, "structure_types", ",".join(STRUCTURE_TYPES), str)
    structure_types = _parse_structure_types(types_text)

    train_sentences = parse_conllu(_read_text(args.train))
    if not train_sentences:
        raise EudError(f"{args.train}: no sentences")
    examples = [sentence_to_example(s) for s in train_sentences]
    dev_examples = (
        [sentence_to_example(s) for s in parse_conllu(_read_text(args.dev))]
        if args.dev
        else []
    )
    labels = sorted(
        {
            label
            for ex in examples
            if not ex.labels_masked
            for _, _, label in ex.gold_arcs
        }
    )
    if not labels:
        raise EudError("training data has no unmasked labeled arcs")
    vocab = build_vocab([ex.words for ex in examples])
    params = init_params(
        vocab,
        labels,
        dims=DIM_PROFILES[dims_name],
        seed=config.seed,
        structure_types=structure_types,
    )
    best, history = train(examples, dev_examples, config, params)
    save_model(best, args.model)
    history_path = args.history or (args.model + ".history.jsonl")
    lines = "".join(json.dumps(record) + "\n" for record in history)
    _write_text(history_path, lines)


def cmd_parse(args):
    if args.raw:
        raise UsageError(
            "raw text input is not supported (tokenization and segmentation "
            "are out of scope); provide pre-tokenized CoNLL-U"
        )
    config_values = _read_config(args.config) if args.config else {}
    mode = _resolve(args, config_values, "mode", "mst", str)
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r} (choose from {', '.join(MODES)})")
    iterations = _resolve(args, config_values, "iterations", 3, int)
    if iterations < 0:
        raise UsageError("iterations must be >= 0")
    threshold = _resolve(args, config_values, "threshold", 0.5, float)
    if not 0.0 < threshold < 1.0:
        raise UsageError("threshold must be strictly between 0 and 1")
    jobs = _resolve(args, config_values, "jobs", 1, int)
    if jobs < 1:
        raise UsageError("jobs must be >= 1")

    params = load_model(args.model)
    sentences = parse_conllu(_read_text(args.input))

    def parse_one(sentence):
        words = sentence.words()
        if not words:
            raise EudError("cannot parse a sentence with no regular words")
        result = parse_sentence(
            params, words, mode=mode, iterations=iterations, threshold=threshold
        )
        graph = expand_empty_nodes(
            split_multi_arcs(graph_from_indexed_arcs(len(words), result.arcs))
        )
        stripped = replace(
            sentence,
            tokens=tuple(t for t in sentence.tokens if not t.id.is_empty),
        )
        return sentence_with_graph(stripped, graph)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(parse_one, sentences))
    else:
        out = [parse_one(s) for s in sentences]
    _write_text(args.output, write_conllu(out))


def cmd_eval(args):
    gold = [graph_of(s) for s in parse_conllu(_read_text(args.gold))]
    pred = [graph_of(s) for s in parse_conllu(_read_text(args.pred))]
    reports = (("elas", elas(gold, pred)), ("lf1", lf1(gold, pred)))
    if args.machine:
        lines = [f"{name} {format_report(rep, machine=True)}" for name, rep in reports]
        print("\n".join(lines))
    else:
        blocks = [f"{name}\n{format_report(rep)}" for name, rep in reports]
        print("\n\n".join(blocks))


def cmd_mix(args):
    low = parse_conllu(_read_text(args.low))
    high = parse_conllu(_read_text(args.high))
    if not low:
        raise EudError(f"{args.low}: no sentences")
    mixed = [_mask_sentence(s) for s in high]
    for _ in range(len(high) // len(low)):
        mixed.extend(low)
    random.Random(args.seed).shuffle(mixed)
    _write_text(args.output, write_conllu(mixed))


def cmd_split_dev(args):
    sentences = parse_conllu(_read_text(args.input))
    _write_text(args.dev, write_conllu(sentences[0::2]))
    _write_text(args.test, write_conllu(sentences[1::2]))


# ---------------------------------------------------------------------------
# Parser assembly and entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="eudparse",
        description="Enhanced-dependency parsing toolkit: graph transforms, "
        "training, parsing, scoring, and dataset mixing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, (_, help_text) in _TRANSFORMS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("input", nargs="?", default="-", help="CoNLL-U file or '-'")
        p.add_argument("-o", "--output", default="-", help="output file or '-'")
        p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="train a model on a CoNLL-U corpus")
    p.add_argument("--train", required=True, help="training CoNLL-U file")
    p.add_argument("--dev", help="development CoNLL-U file (model selection)")
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--history", help="metrics history file (JSON lines)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dims", dest="dims", help="dimension profile: desk or paper")
    p.add_argument(
        "--structure-types",
        dest="structure_types",
        help="comma-separated binary potential types, or 'none' for first order",
    )
    for f in dataclass_fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=type(f.default), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="parse pre-tokenized CoNLL-U with a model")
    p.add_argument("input", nargs="?", default="-", help="CoNLL-U file or '-'")
    p.add_argument("-o", "--output", default="-", help="output file or '-'")
    p.add_argument("--model", required=True, help="model file from `train`")
    p.add_argument("--mode", dest="mode", choices=MODES, default=None)
    p.add_argument("--iterations", dest="iterations", type=int, default=None)
    p.add_argument("--threshold", dest="threshold", type=float, default=None)
    p.add_argument("--jobs", dest="jobs", type=int, default=None)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--raw", action="store_true", help="(rejected) raw text input")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval", help="score predictions against gold")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--machine", action="store_true", help="one key=value line per metric")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mix", help="mask + upsample mixture of two corpora")
    p.add_argument("--low", required=True, help="low-resource CoNLL-U file")
    p.add_argument("--high", required=True, help="high-resource CoNLL-U file")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("split-dev", help="even/odd sentence split of a dev file")
    p.add_argument("input", nargs="?", default="-")
    p.add_argument("--dev", required=True, help="output for even-indexed sentences")
    p.add_argument("--test", required=True, help="output for odd-indexed sentences")
    p.set_defaults(func=cmd_split_dev)

    return parser


def main(argv=None):
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EudError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is an internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
