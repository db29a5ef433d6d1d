"""Command-line interface.

Every subcommand accepts ``--config FILE``: a UTF-8 file of ``key = value``
lines whose keys are the subcommand's flag names (``-`` and ``_`` are
interchangeable, ``#`` starts a comment). Flags given on the command line
override values from the file.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import Vocabulary, build_vocabulary, generate_dataset, load_manifest
from .errors import AttncapError, DivergenceError
from .evaluation import caption, compare, evaluate, export_attention_maps, read_trace, sweep
from .train import ConfigError, TrainConfig, config_echo, train

log = logging.getLogger("attncap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--model", choices=("attention", "vanilla"), default=d.model)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    p.add_argument("--feature-dim", type=int, default=d.feature_dim)
    p.add_argument("--attention-dim", type=int, default=d.attention_dim)
    p.add_argument("--channels", type=_int_list, default=list(d.channels), help="encoder stage widths, e.g. 8,16,32")
    p.add_argument("--grid-side", type=int, default=d.grid_side)
    p.add_argument("--merge", choices=("add", "concat"), default=d.merge, help="vanilla image/word merge")
    p.add_argument("--vocab-cap", type=int, default=d.vocab_cap)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--penalty", type=float, default=d.penalty, help="doubly stochastic attention coefficient")
    p.add_argument("--param-seed", type=int, default=d.param_seed)
    p.add_argument("--shuffle-seed", type=int, default=d.shuffle_seed)
    p.add_argument("--t-max", type=int, default=d.t_max)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=d.optimizer)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm)


def _train_config(args) -> TrainConfig:
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attncap", description="Attention-based image captioning on a synthetic shapes corpus.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file providing defaults for this command's flags")
        return p

    p = command("gen-data", "render a synthetic corpus")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--side", type=int, default=48, help="image side in pixels")

    p = command("build-vocab", "build a vocabulary from a split's captions")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--split", default="train")
    p.add_argument("--vocab-cap", type=int, default=TrainConfig.vocab_cap)
    p.add_argument("--out", help="vocabulary file to write")

    p = command("train", "train a model, checkpointing every epoch")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--out", help="run directory")
    p.add_argument("--vocab", help="vocabulary file (built from the train split when omitted)")
    _add_train_flags(p)

    p = command("evaluate", "score greedy decodes of a split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--vocab")
    p.add_argument("--report", help="report file to write")

    p = command("caption", "caption one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--vocab")
    p.add_argument("--trace", help="attention trace file to write (attention models)")

    p = command("attention-maps", "export one PGM heatmap per caption token")
    p.add_argument("--trace")
    p.add_argument("--out")
    p.add_argument("--upscale", type=int, default=8)

    p = command("sweep", "train and evaluate a grid of vocabulary caps, epoch counts and image counts")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--split", default="test")
    p.add_argument("--caps", type=_int_list, default=[50, 200])
    p.add_argument("--epoch-counts", type=_int_list, default=[5, 15])
    p.add_argument("--images", type=_int_list, default=[300])
    _add_train_flags(p)

    p = command("compare", "compare two checkpoints on one split")
    p.add_argument("--a", dest="checkpoint_a")
    p.add_argument("--b", dest="checkpoint_b")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--vocab", help="vocabulary of checkpoint A (and B unless --vocab-b)")
    p.add_argument("--vocab-b")
    p.add_argument("--report")
    return parser


REQUIRED = {
    "gen-data": ("out",),
    "build-vocab": ("data", "out"),
    "train": ("data", "out"),
    "evaluate": ("checkpoint", "data", "vocab"),
    "caption": ("checkpoint", "image", "vocab"),
    "attention-maps": ("trace", "out"),
    "sweep": ("data", "out"),
    "compare": ("checkpoint_a", "checkpoint_b", "data", "vocab"),
}


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {raw!r}")
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _apply_config(sub: argparse.ArgumentParser, path) -> None:
    """Install file values as parser defaults so explicit flags still win."""
    actions = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    # flag spellings (e.g. --a) may differ from their destination names
    by_flag = {opt.lstrip("-").replace("-", "_"): a for a in actions.values() for opt in a.option_strings}
    defaults = {}
    for key, text in read_config_file(path).items():
        action = by_flag.get(key)
        if action is None:
            raise ConfigError(f"{path}: unknown key {key!r} for {sub.prog}")
        try:
            value = action.type(text) if action.type else text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}: {key!r} must be one of {list(action.choices)}, got {value!r}")
        defaults[action.dest] = value
    sub.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("attncap: a subcommand is required (see --help)")
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, args.config)
        args = parser.parse_args(argv)
    missing = [name for name in REQUIRED[args.command] if getattr(args, name) in (None, "")]
    if missing:
        flags = {"checkpoint_a": "a", "checkpoint_b": "b"}
        names = ", ".join("--" + flags.get(m, m).replace("_", "-") for m in missing)
        raise UsageError(f"attncap {args.command}: missing required {names}")
    return args


# ---------------------------------------------------------------- commands


def _cmd_gen_data(args) -> None:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    counts = {k: v for k, v in counts.items() if v > 0}
    manifests = generate_dataset(args.seed, counts, args.side, args.out)
    for split, manifest in manifests.items():
        log.info("%s: %d images", split, len(manifest))
    print(f"wrote {sum(len(m) for m in manifests.values())} images to {args.out}")


def _cmd_build_vocab(args) -> None:
    manifest = load_manifest(args.data, args.split)
    vocab = build_vocabulary([c for r in manifest.records for c in r.captions], args.vocab_cap)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} entries to {args.out}")


def _cmd_train(args) -> None:
    config = _train_config(args)
    manifest = load_manifest(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocabulary([c for r in manifest.records for c in r.captions], config.vocab_cap)
        vocab.save(out / "vocab.tsv")
    val = load_manifest(args.data, "val") if (Path(args.data) / "val.jsonl").exists() else None
    (out / "config.json").write_text(json.dumps(config_echo(config, vocab), indent=2) + "\n", encoding="utf-8")
    result = train(config, manifest, vocab, out, val)
    last = result.runlog.rows[-1]
    print(f"trained {config.model} for {last.epoch} epochs; final loss {last.train_loss:.4f}; "
          f"checkpoint {result.checkpoints[-1]}")


def _cmd_evaluate(args) -> None:
    report = evaluate(args.checkpoint, load_manifest(args.data, args.split), Vocabulary.load(args.vocab), args.report)
    print(json.dumps(report.corpus, indent=2))


def _cmd_caption(args) -> None:
    print(caption(args.checkpoint, args.image, Vocabulary.load(args.vocab), args.trace))


def _cmd_attention_maps(args) -> None:
    tokens, trace, grid_side = read_trace(args.trace)
    paths = export_attention_maps(trace, tokens, grid_side, args.upscale, args.out)
    print(f"wrote {len(paths)} heatmaps to {args.out}")


def _cmd_sweep(args) -> None:
    rows = sweep(_train_config(args), args.data, args.out, args.caps, args.epoch_counts, args.images, args.split)
    print((Path(args.out) / "sweep.tsv").read_text(encoding="utf-8"), end="")
    log.info("%d sweep rows", len(rows))


def _cmd_compare(args) -> None:
    manifest = load_manifest(args.data, args.split)
    vocab_b = Vocabulary.load(args.vocab_b) if args.vocab_b else None
    result = compare(args.checkpoint_a, args.checkpoint_b, manifest, Vocabulary.load(args.vocab), vocab_b, args.report)
    print(json.dumps({"corpus": result["corpus"], "per_sentence_wins": result["per_sentence_wins"],
                      "disagreements": len(result["bleu4_wer_disagreements"])}, indent=2))


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "caption": _cmd_caption,
    "attention-maps": _cmd_attention_maps,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (AttncapError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
