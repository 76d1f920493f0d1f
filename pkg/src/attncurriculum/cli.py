"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/model error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    ALPACA_TEMPLATE,
    Tokenizer,
    corpus_digest,
    encode_dataset,
    load_dataset,
    train_tokenizer,
    write_dataset,
)
from .curriculum import DIRECTIONS, POLICY_KINDS, OrderingPolicy, build_plan
from .difficulty import METRICS, ScoreCache, ScoringOptions, score_dataset
from .errors import CurriculumError, DataError
from .evalreport import CellFailure, build_suite, evaluate, render_grid, run_comparison
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .synthetic import generate_corpus, task_name
from .trainer import TrainConfig, train

log = logging.getLogger("attncurriculum")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
ENV_OUT_DIR = "ATTNCURRICULUM_OUT_DIR"
ENV_JOBS = "ATTNCURRICULUM_JOBS"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(kind, choices=None):
    def parse(text):
        items = [s.strip() for s in str(text).split(",") if s.strip()]
        out = [kind(s) for s in items]
        if choices is not None:
            bad = [s for s in out if s not in choices]
            if bad:
                raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; expected from {list(choices)}")
        return out
    return parse


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--n-layers", type=int, default=2)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--d-ff", type=int, default=128)
    g.add_argument("--max-seq", type=int, default=128, help="context window; longer prompts are left-truncated")
    g.add_argument("--vocab-size", type=int, default=1024, help="tokenizer vocabulary budget")
    g.add_argument("--model-seed", type=int, default=None, help="initialisation seed (defaults to --seed)")


def _add_train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=3e-4, help="AdamW learning rate")
    g.add_argument("--weight-decay", type=float, default=0.01, help="decoupled weight decay")
    g.add_argument("--grad-clip", type=float, default=1.0, help="max gradient norm; 0 disables clipping")
    g.add_argument("--no-rescore", action="store_true",
                   help="sort epochs >= 2 by initial-model scores instead of rescoring after epoch 1")
    g.add_argument("--loss-reduction", choices=("sum", "mean"), default="sum",
                   help="reduction used when (re)scoring the loss metric")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attncurriculum", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key = value file; any flag may be set there, command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the bundled synthetic copy/modular-addition corpus")
    p.add_argument("--out-dir", default=None, help=f"output directory (env {ENV_OUT_DIR})")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-heldout", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("tokenizer", help="train a subword tokenizer on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("init-model", help="write a freshly initialised checkpoint")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)

    p = sub.add_parser("score", help="compute difficulty scores into a score cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="checkpoint used for attention and loss scores")
    p.add_argument("--tokenizer", default=None, help="tokenizer file; trained from --data when omitted")
    p.add_argument("--metrics", type=_csv_list(str, METRICS), default=list(METRICS),
                   help="comma-separated subset of length,attention,loss")
    p.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    p.add_argument("--on-error", choices=("abort", "skip"), default="abort")
    p.add_argument("--jobs", type=int, default=None, help=f"scoring threads (env {ENV_JOBS})")
    p.add_argument("--seed", type=int, default=0, help="tokenizer seed when training one")
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--max-seq", type=int, default=None, help="defaults to the model's max_seq, else 128")

    p = sub.add_parser("plan", help="build a curriculum plan from a score cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", choices=POLICY_KINDS, default="random")
    p.add_argument("--direction", choices=DIRECTIONS, default="easy_to_hard")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="score, plan and train one run")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", default=None, help=f"output directory (env {ENV_OUT_DIR})")
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--model", default=None, help="initial checkpoint; a fresh model is initialised when omitted")
    p.add_argument("--policy", choices=POLICY_KINDS, default="random")
    p.add_argument("--direction", choices=DIRECTIONS, default="easy_to_hard")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0, help="shuffle, tokenizer and (by default) model seed")
    _add_model_args(p)
    _add_train_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("--data", required=True, help="held-out JSON Lines file")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--train-data", default=None, help="training file, checked for overlap")
    p.add_argument("--out", default=None, help="metrics JSON path (stdout when omitted)")

    p = sub.add_parser("compare", help="train every (epochs, policy) cell and render the results grid")
    p.add_argument("--train", default=None, help="training JSON Lines (bundled synthetic corpus when omitted)")
    p.add_argument("--heldout", default=None, help="held-out JSON Lines (bundled synthetic corpus when omitted)")
    p.add_argument("--data-seed", type=int, default=0, help="seed for the bundled synthetic corpus")
    p.add_argument("--policies", type=_csv_list(str, POLICY_KINDS), default=list(POLICY_KINDS))
    p.add_argument("--epochs-list", type=_csv_list(int), default=[1, 2, 3])
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", default=None, help="grid path (stdout when omitted)")
    p.add_argument("--jobs", type=int, default=None, help=f"parallel policy runs (env {ENV_JOBS})")
    p.add_argument("--allow-partial", action="store_true", help="emit a grid even if some cells fail")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--title", default="")
    _add_model_args(p)
    _add_train_args(p)
    return parser


def _read_config(path: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    cp.read_string("[__top__]\n" + text)
    values = {}
    for section in cp.sections():
        for k, v in cp.items(section):
            values[k.replace("-", "_")] = v
    return values


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    probe = _Parser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    sub = _subparser(parser, command) if command else None
    if not known.config or sub is None:
        return parser.parse_args(argv)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in _read_config(known.config).items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"config key {key!r} is not an option of {command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        else:
            defaults[key] = raw
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, args: argparse.Namespace, artifacts: dict[str, Path], **extra) -> Path:
    """One manifest per output directory: effective settings, seeds and artifact digests."""
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    config_blob = json.dumps(settings, sort_keys=True, default=str)
    manifest = {
        "tool": "attncurriculum",
        "version": __version__,
        "command": args.command,
        "settings": json.loads(config_blob),
        "config_digest": hashlib.sha256(config_blob.encode()).hexdigest(),
        "seeds": {k: v for k, v in settings.items() if k.endswith("seed")},
        "artifacts": {
            name: {"path": str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p),
                   "sha256": _sha256_file(p)}
            for name, p in sorted(artifacts.items())
        },
        **extra,
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args) -> Path:
    d = args.out_dir or os.environ.get(ENV_OUT_DIR)
    if not d:
        raise UsageError("--out-dir is required (or set %s)" % ENV_OUT_DIR)
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    return max(1, int(os.environ.get(ENV_JOBS, "1")))


def _model_config(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_model=args.d_model,
        d_ff=args.d_ff,
        max_seq=args.max_seq,
        vocab_size=vocab_size,
        precision="single",
    )


def _train_config(args, n_epochs: int) -> TrainConfig:
    return TrainConfig(
        n_epochs=n_epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        grad_clip=args.grad_clip if args.grad_clip > 0 else None,
        seed=args.seed,
        rescore_after_epoch1=not args.no_rescore,
        loss_reduction=args.loss_reduction,
    )


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    train_recs, held = generate_corpus(args.n_train, args.n_heldout, args.seed)
    write_dataset(out / "train.jsonl", train_recs)
    write_dataset(out / "heldout.jsonl", held)
    write_manifest(out, args, {"train": out / "train.jsonl", "heldout": out / "heldout.jsonl"},
                   corpus_digest=corpus_digest(train_recs))
    return EXIT_OK


def cmd_tokenizer(args) -> int:
    records = load_dataset(args.data)
    tok = train_tokenizer(records, args.vocab_size, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(out)
    write_manifest(out.parent, args, {"tokenizer": out}, corpus_digest=corpus_digest(records),
                   tokenizer_digest=tok.digest())
    return EXIT_OK


def cmd_init_model(args) -> int:
    tok = Tokenizer.load(args.tokenizer)
    seed = args.model_seed if args.model_seed is not None else args.seed
    state = init_model(_model_config(args, tok.vocab_size), seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)
    write_manifest(out.parent, args, {"model": out}, tokenizer_digest=tok.digest())
    return EXIT_OK


def cmd_score(args) -> int:
    options = ScoringOptions(tuple(args.metrics), args.reduction, on_error=args.on_error, jobs=_jobs(args))
    if options.needs_model and not args.model:
        which = "attention" if "attention" in args.metrics else "loss"
        raise DataError(f"{which} scoring requires a model")
    records = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    artifacts = {"cache": out}
    if args.tokenizer:
        tok = Tokenizer.load(args.tokenizer)
    else:
        tok = train_tokenizer(records, args.vocab_size, args.seed)
        tok_path = out.parent / "tokenizer.txt"
        tok.save(tok_path)
        artifacts["tokenizer"] = tok_path
    state = load_checkpoint(args.model) if args.model else None
    if state is not None and state.config.vocab_size != tok.vocab_size:
        raise DataError("model vocabulary size does not match the tokenizer")
    max_seq = args.max_seq or (state.config.max_seq if state is not None else 128)
    examples = encode_dataset(records, ALPACA_TEMPLATE, tok, max_seq)
    cache = score_dataset(examples, state, options, tok.digest(), ALPACA_TEMPLATE.digest())
    cache.save(out)
    write_manifest(out.parent, args, artifacts, corpus_digest=corpus_digest(records), tokenizer_digest=tok.digest())
    return EXIT_OK


def cmd_plan(args) -> int:
    cache = ScoreCache.load(args.cache)
    plan = build_plan(cache, OrderingPolicy(args.policy, args.direction), args.epochs, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    write_manifest(out.parent, args, {"plan": out})
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    records = load_dataset(args.data)
    artifacts: dict[str, Path] = {}
    if args.tokenizer:
        tok = Tokenizer.load(args.tokenizer)
    else:
        tok = train_tokenizer(records, args.vocab_size, args.seed)
        tok.save(out / "tokenizer.txt")
        artifacts["tokenizer"] = out / "tokenizer.txt"
    if args.model:
        init = load_checkpoint(args.model)
    else:
        seed = args.model_seed if args.model_seed is not None else args.seed
        init = init_model(_model_config(args, tok.vocab_size), seed)
        save_checkpoint(init, out / "init.ckpt")
        artifacts["init"] = out / "init.ckpt"
    if init.config.vocab_size != tok.vocab_size:
        raise DataError("model vocabulary size does not match the tokenizer")
    examples = encode_dataset(records, ALPACA_TEMPLATE, tok, init.config.max_seq)
    policy = OrderingPolicy(args.policy, args.direction)
    config = _train_config(args, args.epochs)
    metric = policy.metric or "length"
    cache = score_dataset(
        examples,
        init if metric != "length" else None,
        ScoringOptions(metrics=(metric,), reduction=config.loss_reduction),
        tok.digest(),
        ALPACA_TEMPLATE.digest(),
    )
    cache.save(out / "scores.jsonl")
    artifacts["scores"] = out / "scores.jsonl"
    plan = build_plan(cache, policy, args.epochs, args.seed)
    _, runlog, followed = train(examples, plan, init, config, checkpoint_dir=out)
    followed.save(out / "plan.jsonl")
    runlog.write(out / "runlog.jsonl")
    artifacts["plan"] = out / "plan.jsonl"
    artifacts["runlog"] = out / "runlog.jsonl"
    for e in range(1, args.epochs + 1):
        artifacts[f"epoch{e}"] = out / f"epoch{e}.ckpt"
    write_manifest(
        out, args, artifacts,
        corpus_digest=corpus_digest(records),
        tokenizer_digest=tok.digest(),
        rescored=runlog.rescored,
        epoch_mean_losses=runlog.epoch_losses,
    )
    for e, loss in enumerate(runlog.epoch_losses, start=1):
        print(f"epoch {e}: mean training loss {loss:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    tok = Tokenizer.load(args.tokenizer)
    state = load_checkpoint(args.model)
    held = load_dataset(args.data)
    train_recs = load_dataset(args.train_data) if args.train_data else []
    suite = build_suite(held, train_recs, ALPACA_TEMPLATE, tok, state.config.max_seq, task_of=task_name)
    metrics = evaluate(state, suite)
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(out.parent, args, {"metrics": out}, tokenizer_digest=tok.digest())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    if (args.train is None) != (args.heldout is None):
        raise UsageError("--train and --heldout must be given together")
    if args.train:
        train_recs, held = load_dataset(args.train), load_dataset(args.heldout)
    else:
        train_recs, held = generate_corpus(seed=args.data_seed)
    tok = train_tokenizer(train_recs, args.vocab_size, args.seed)
    examples = encode_dataset(train_recs, ALPACA_TEMPLATE, tok, args.max_seq)
    suite = build_suite(held, train_recs, ALPACA_TEMPLATE, tok, args.max_seq, task_of=task_name)
    seed = args.model_seed if args.model_seed is not None else args.seed
    try:
        grid = run_comparison(
            examples, suite, args.policies, args.epochs_list,
            _model_config(args, tok.vocab_size), _train_config(args, max(args.epochs_list)),
            model_seed=seed, jobs=_jobs(args), allow_partial=args.allow_partial, title=args.title,
        )
    except CellFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text = render_grid(grid, args.format)
    if grid.failures:
        print(f"warning: failed cells omitted: {', '.join(grid.failures)}", file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(
            out.parent, args, {"grid": out},
            corpus_digest=corpus_digest(train_recs), tokenizer_digest=tok.digest(),
            epoch_mean_losses={p: rl.epoch_losses for p, rl in grid.run_logs.items()},
            failed_cells=grid.failures,
        )
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "tokenizer": cmd_tokenizer,
    "init-model": cmd_init_model,
    "score": cmd_score,
    "plan": cmd_plan,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CurriculumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
