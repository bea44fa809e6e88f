"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
divergence. Output paths are never overwritten without --force. Seeds
resolve flag first, then the config file, then the STYLEFORGE_SEED
environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import torch

from . import corpus as corpus_mod
from .configfile import DataPaths, TrainingConfig, parse_config_file
from .decoding import DecodeConfig, decode_corpus
from .discriminator import load_discriminator
from .errors import (
    DataError,
    DivergenceError,
    FrozenDiscriminatorError,
    NotPretrainedError,
    StyleforgeError,
)
from .evaluation import EvalReport, corpus_bleu, g_score, style_accuracy
from .model import load_checkpoint, save_checkpoint
from .styles import StyleLabel
from .tokenizer import decode, encode, load_table, save_table, table_hash, train_bpe
from .trainer import (
    TrainData,
    lambda_sweep,
    pretrain_discriminator,
    sweep_to_csv,
    train,
    train_unsupervised,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ensure_writable(paths: list[str], force: bool) -> None:
    for path in paths:
        if os.path.exists(path) and not force:
            raise DataError(f"{path} exists; pass --force to overwrite")


def _resolve_seed(flag_seed, config_seed=None, default=0) -> int:
    if flag_seed is not None:
        return flag_seed
    if config_seed is not None:
        return config_seed
    env = os.environ.get("STYLEFORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise DataError(f"STYLEFORGE_SEED must be an integer, got {env!r}") from exc
    return default


def _write_lines(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def _read_lines(path: str) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _style_from_flag(value: str) -> StyleLabel:
    if value in ("t", "target"):
        return StyleLabel.TARGET
    if value in ("s", "source"):
        return StyleLabel.SOURCE
    raise DataError(f"style must be s or t, got {value!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_bpe_train(args) -> int:
    _ensure_writable([args.out], args.force)
    sentences: list[str] = []
    for path in args.input:
        sentences.extend(_read_lines(path))
    table = train_bpe(sentences, args.vocab_size)
    save_table(table, args.out)
    print(
        f"trained tokenizer: {len(table)} symbols, {len(table.merges)} merges "
        f"-> {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    os.makedirs(args.out, exist_ok=True)
    names = [
        "train.src", "train.tgt", "valid.src", "valid.tgt", "test.src",
        "test.tgt", "pool_source.txt", "pool_target.txt",
        "eval_pool_source.txt", "eval_pool_target.txt",
    ]
    outputs = {n: os.path.join(args.out, n) for n in names}
    _ensure_writable(list(outputs.values()), args.force)

    n_parallel = args.n_parallel + args.n_valid + args.n_test
    n_pool = args.n_unlabeled + args.n_eval_pool
    pairs, pool_s, pool_t = corpus_mod.synth_corpus(seed, n_parallel, n_pool)

    splits = {
        "train": pairs[: args.n_parallel],
        "valid": pairs[args.n_parallel : args.n_parallel + args.n_valid],
        "test": pairs[args.n_parallel + args.n_valid :],
    }
    for name, split in splits.items():
        _write_lines(outputs[f"{name}.src"], [s for s, _ in split])
        _write_lines(outputs[f"{name}.tgt"], [t for _, t in split])
    _write_lines(outputs["pool_source.txt"], pool_s[: args.n_unlabeled])
    _write_lines(outputs["pool_target.txt"], pool_t[: args.n_unlabeled])
    _write_lines(outputs["eval_pool_source.txt"], pool_s[args.n_unlabeled :])
    _write_lines(outputs["eval_pool_target.txt"], pool_t[args.n_unlabeled :])
    print(
        f"synthetic corpus (seed {seed}): {args.n_parallel} train / "
        f"{args.n_valid} valid / {args.n_test} test pairs, "
        f"{args.n_unlabeled} pool + {args.n_eval_pool} eval-pool "
        f"sentences per style -> {args.out}"
    )
    return 0


def _load_train_data(
    config: TrainingConfig, paths: DataPaths, need_parallel: bool, need_pools: bool
) -> TrainData:
    if not paths.bpe_table:
        raise DataError("config must set bpe_table")
    table = load_table(paths.bpe_table)
    data = TrainData(table=table)
    max_len = config.max_sentence_tokens
    if need_parallel:
        for name in ("train_src", "train_tgt", "valid_src", "valid_tgt"):
            if not getattr(paths, name):
                raise DataError(f"config must set {name}")
        data.train = corpus_mod.load_parallel(
            paths.train_src, paths.train_tgt, table, max_len
        )
        data.valid = corpus_mod.load_parallel(
            paths.valid_src, paths.valid_tgt, table, max_len
        )
        if paths.test_src and paths.test_tgt:
            data.test = corpus_mod.load_parallel(
                paths.test_src, paths.test_tgt, table, max_len
            )
    if need_pools:
        if not paths.pool_source or not paths.pool_target:
            raise DataError("config must set pool_source and pool_target")
        data.pool_source = corpus_mod.load_unlabeled(
            paths.pool_source, StyleLabel.SOURCE, table, max_len
        )
        data.pool_target = corpus_mod.load_unlabeled(
            paths.pool_target, StyleLabel.TARGET, table, max_len
        )
    return data


def _apply_seed(config: TrainingConfig, args) -> TrainingConfig:
    seed = _resolve_seed(args.seed, config.seed)
    return replace(config, seed=seed)


def cmd_pretrain_disc(args) -> int:
    config, paths = parse_config_file(args.config)
    config = _apply_seed(config, args)
    _ensure_writable([args.out], args.force)
    data = _load_train_data(config, paths, need_parallel=False, need_pools=True)
    kind = "cnn" if config.variant == "cnn_disc" else "lm"
    disc, accuracy, losses = pretrain_discriminator(
        data.pool_source,
        data.pool_target,
        config.lm_config(len(data.table)),
        epochs=config.pretrain_epochs,
        seed=config.seed,
        learning_rate=config.disc_learning_rate,
        max_tokens=config.max_tokens_per_batch,
        kind=kind,
    )
    disc.save(args.out)
    print(
        f"pretrained {kind} discriminator for {config.pretrain_epochs} epochs; "
        f"held-out accuracy {accuracy:.2f}% -> {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    from .plots import save_training_curves

    config, paths = parse_config_file(args.config)
    config = _apply_seed(config, args)
    out_dir = args.out_dir or paths.out_dir
    if not out_dir:
        raise DataError("set out_dir in the config or pass --out-dir")
    os.makedirs(out_dir, exist_ok=True)
    outputs = {
        n: os.path.join(out_dir, n)
        for n in ("model.pt", "runlog.jsonl", "training_curves.png")
    }
    _ensure_writable(list(outputs.values()), args.force)

    unsupervised = config.mode == "unsupervised"
    if unsupervised and (paths.train_src or paths.train_tgt):
        raise DataError("unsupervised mode must not configure parallel data")
    data = _load_train_data(
        config,
        paths,
        need_parallel=not unsupervised,
        need_pools=config.mode != "supervised_only",
    )
    disc = None
    if config.mode != "supervised_only" and config.variant != "none":
        if not paths.disc_checkpoint:
            raise DataError("config must set disc_checkpoint for this mode")
        disc = load_discriminator(paths.disc_checkpoint)

    if unsupervised:
        result = train_unsupervised(
            config, (data.pool_source, data.pool_target), disc,
            vocab_size=len(data.table),
        )
    else:
        result = train(config, data, disc)

    save_checkpoint(
        outputs["model.pt"],
        result.model,
        result.optimizer_state,
        result.best_epoch,
        table_hash(data.table),
    )
    result.runlog.write_jsonl(outputs["runlog.jsonl"])
    save_training_curves(result.runlog, outputs["training_curves.png"])
    print(
        f"trained ({config.mode}); best epoch {result.best_epoch} "
        f"metric {result.best_metric:.4f} -> {outputs['model.pt']}"
    )
    if result.diverged:
        print("training diverged; artifacts hold the last good checkpoint",
              file=sys.stderr)
        return 3
    return 0


def cmd_generate(args) -> int:
    _ensure_writable([args.out], args.force)
    table = load_table(args.bpe)
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.merge_table_hash != table_hash(table):
        raise DataError(
            "tokenizer table does not match the one this checkpoint was trained with"
        )
    model = checkpoint.restore()
    model.eval()
    style = StyleLabel.TARGET if args.direction == "s2t" else StyleLabel.SOURCE
    config = DecodeConfig(
        beam_size=args.beam,
        length_penalty=args.lenpen,
        max_len=args.max_len,
        mmi_lambda=args.mmi_lambda,
        n_best=args.n_best if args.mmi_lambda is not None else 1,
    )
    lines = _read_lines(args.input)
    if not lines:
        raise DataError(f"{args.input}: empty file")
    token_rows = [encode(line, table) for line in lines]
    hyps = decode_corpus(model, token_rows, style, config)
    _write_lines(args.out, [decode(h, table) for h in hyps])
    print(f"generated {len(hyps)} sentences ({args.direction}) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    _ensure_writable([args.out], args.force)
    hyp_lines = _read_lines(args.hyp)
    ref_lines = _read_lines(args.ref)
    bleu = corpus_bleu(
        [h.split() for h in hyp_lines], [r.split() for r in ref_lines]
    )
    accuracy = None
    g = None
    if args.classifier:
        if not args.bpe:
            raise DataError("--classifier needs --bpe to encode hypotheses")
        table = load_table(args.bpe)
        classifier = load_discriminator(args.classifier)
        target = _style_from_flag(args.target_style)
        hyp_tokens = [encode(h, table) for h in hyp_lines]
        accuracy = style_accuracy(hyp_tokens, target, classifier)
        g = g_score(accuracy, bleu)
    config_hash = hashlib.sha256(
        json.dumps(vars(args), sort_keys=True, default=str).encode()
    ).hexdigest()[:16]
    report = EvalReport(
        bleu=bleu,
        direction=args.direction,
        n_sentences=len(hyp_lines),
        config_hash=config_hash,
        accuracy=accuracy,
        g_score=g,
    )
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    summary = f"BLEU {bleu:.2f}"
    if accuracy is not None:
        summary += f" | accuracy {accuracy:.2f}% | G-score {g:.2f}"
    print(summary + f" over {len(hyp_lines)} sentences -> {args.out}")
    return 0


def _parse_grid(spec: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError as exc:
        raise DataError(f"grid must be start:stop:step, got {spec!r}") from exc
    if step <= 0 or stop < start:
        raise DataError(f"bad grid {spec!r}")
    out = []
    v = start
    while v <= stop + 1e-9:
        out.append(round(v, 10))
        v += step
    return out


def cmd_sweep_lambda(args) -> int:
    from .plots import save_sweep_curve

    config, paths = parse_config_file(args.config)
    config = _apply_seed(config, args)
    out_dir = args.out_dir or paths.out_dir
    if not out_dir:
        raise DataError("set out_dir in the config or pass --out-dir")
    os.makedirs(out_dir, exist_ok=True)
    outputs = {
        n: os.path.join(out_dir, n)
        for n in ("sweep.csv", "sweep.png", "sweep_summary.json")
    }
    _ensure_writable(list(outputs.values()), args.force)

    need_pools = config.mode == "semi_supervised"
    data = _load_train_data(config, paths, need_parallel=True, need_pools=need_pools)
    if data.test is None:
        raise DataError("the sweep needs test_src and test_tgt")
    disc = None
    if need_pools and config.variant != "none":
        if not paths.disc_checkpoint:
            raise DataError("config must set disc_checkpoint for semi-supervised sweeps")
        disc = load_discriminator(paths.disc_checkpoint)

    grid = _parse_grid(args.grid)
    out = lambda_sweep(config, data, grid, disc)
    sweep_to_csv(out["rows"], outputs["sweep.csv"])
    save_sweep_curve(out["rows"], out["plain_bleu"], outputs["sweep.png"])
    with open(outputs["sweep_summary.json"], "w", encoding="utf-8") as f:
        json.dump(
            {
                "rows": out["rows"],
                "plain_bleu": out["plain_bleu"],
                "lambda_one_matches_plain": out["lambda_one_matches_plain"],
            },
            f,
            indent=2,
        )
    for lam, bleu in out["rows"]:
        print(f"lambda {lam:.2f}: BLEU {bleu:.2f}")
    print(f"plain translation loss: BLEU {out['plain_bleu']:.2f}")
    if out["lambda_one_matches_plain"] is not None:
        status = "matches" if out["lambda_one_matches_plain"] else "DIFFERS FROM"
        print(f"weight-1.0 run {status} the plain run step for step")
    return 0


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="styleforge",
        description="Semi-supervised text style transfer toolkit",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("bpe-train", help="train a subword tokenizer")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--vocab-size", type=int, default=50_000)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_bpe_train)

    p = sub.add_parser("synth", help="emit a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n-parallel", type=int, default=5000)
    p.add_argument("--n-unlabeled", type=int, default=10_000)
    p.add_argument("--n-valid", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--n-eval-pool", type=int, default=2000)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain-disc", help="pretrain and freeze the discriminator")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_pretrain_disc)

    p = sub.add_parser("train", help="train the style transfer model")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="beam-search generation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bpe", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--lenpen", type=float, default=2.0)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--mmi-lambda", type=float, default=None)
    p.add_argument("--n-best", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--classifier", default=None)
    p.add_argument("--target-style", default="t")
    p.add_argument("--bpe", default=None)
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep-lambda", help="forward-weight sweep with CSV and figure")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default="0.1:1.0:0.1")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sweep_lambda)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        torch.set_num_threads(max(1, os.cpu_count() or 1))
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3
    except (DataError, FrozenDiscriminatorError, NotPretrainedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StyleforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
