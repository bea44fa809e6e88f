"""Training orchestration: discriminator pretraining, the main loop with
gradient accumulation, checkpoint selection, and the forward-weight sweep.

Each optimizer step accumulates gradients over update_frequency
micro-batches, weighting every micro-batch term by its example count so
the update equals one step on the concatenated batch. Model selection
uses validation perplexity of the source-to-target direction; the
unsupervised mode, which has no parallel validation data, selects by
cyclic reconstruction loss on held-out pool slices instead.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field, replace

import torch

from .configfile import TrainingConfig
from .corpus import Batch, ParallelExample, UnlabeledPool, make_batches, make_pool_batches
from .decoding import DecodeConfig, decode_corpus
from .discriminator import CnnDiscriminator, LmConfig, LmDiscriminator
from .errors import DataError, FrozenDiscriminatorError
from .evaluation import corpus_bleu, perplexity
from .model import StyleTransformer, batch_to_tensors, build_model
from .objectives import LossWeights, loss_terms
from .styles import StyleLabel
from .tokenizer import MergeTable, decode

logger = logging.getLogger(__name__)


@dataclass
class TrainData:
    train: list[ParallelExample] | None = None
    valid: list[ParallelExample] | None = None
    test: list[ParallelExample] | None = None
    pool_source: UnlabeledPool | None = None
    pool_target: UnlabeledPool | None = None
    table: MergeTable | None = None


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int | None = None
    diverged: bool = False

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for record in self.steps:
                f.write(json.dumps({"kind": "step", **record}) + "\n")
            for record in self.epochs:
                f.write(json.dumps({"kind": "epoch", **record}) + "\n")
            f.write(
                json.dumps(
                    {
                        "kind": "selected",
                        "epoch": self.selected_epoch,
                        "diverged": self.diverged,
                    }
                )
                + "\n"
            )


@dataclass
class TrainResult:
    model: StyleTransformer
    runlog: RunLog
    best_epoch: int
    best_metric: float
    diverged: bool
    optimizer_state: dict | None = None


def _derive_seed(seed: int, *salts: int) -> int:
    out = seed
    for salt in salts:
        out = (out * 1_000_003 + salt) % (2**31 - 1)
    return out


# ---------------------------------------------------------------------------
# Discriminator pretraining
# ---------------------------------------------------------------------------


def _split_holdout(pool: UnlabeledPool, seed: int) -> tuple[UnlabeledPool, list]:
    n = len(pool.sentences)
    k = min(max(n // 10, 1), 500)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    held = [pool.sentences[i] for i in order[:k]]
    rest = [pool.sentences[i] for i in order[k:]]
    if not rest:  # tiny pools train on everything
        rest = held
    return UnlabeledPool(style=pool.style, sentences=rest), held


def holdout_accuracy(disc, held_source: list, held_target: list) -> float:
    """Fraction of held-out sentences the score softmax classifies correctly."""
    correct = 0
    total = 0
    with torch.no_grad():
        for sentences, want_target in ((held_source, False), (held_target, True)):
            for start in range(0, len(sentences), 256):
                chunk = sentences[start : start + 256]
                tokens, lengths = batch_to_tensors(chunk)
                p = disc.prob_target_batch(tokens, lengths)
                hits = (p > 0.5) if want_target else (p < 0.5)
                correct += int(hits.sum())
                total += len(chunk)
    return 100.0 * correct / total


def pretrain_discriminator(
    pool_source: UnlabeledPool,
    pool_target: UnlabeledPool,
    lm_config: LmConfig,
    epochs: int,
    seed: int,
    learning_rate: float = 3e-4,
    max_tokens: int = 2048,
    kind: str = "lm",
):
    """Train the style discriminator on the two pools, then freeze it.

    Returns (frozen discriminator, held-out accuracy percentage, per-epoch
    mean losses).
    """
    if not pool_source.sentences or not pool_target.sentences:
        raise DataError("both unlabeled pools must be non-empty")
    if kind == "lm":
        disc = LmDiscriminator(lm_config, seed=seed)
    elif kind == "cnn":
        disc = CnnDiscriminator(vocab_size=lm_config.vocab_size, seed=seed)
    else:
        raise DataError(f"unknown discriminator kind {kind!r}")

    train_s, held_s = _split_holdout(pool_source, _derive_seed(seed, 11))
    train_t, held_t = _split_holdout(pool_target, _derive_seed(seed, 12))
    optimizer = torch.optim.Adam(disc.parameters(), lr=learning_rate)

    epoch_losses = []
    for epoch in range(epochs):
        batches = []
        for pool, salt in ((train_s, 21), (train_t, 22)):
            batches.extend(
                make_pool_batches(pool, max_tokens, _derive_seed(seed, salt, epoch))
            )
        random.Random(_derive_seed(seed, 23, epoch)).shuffle(batches)
        losses = []
        for batch in batches:
            losses.append(
                disc.pretrain_step(batch.src, batch.src_lengths, batch.style, optimizer)
            )
        epoch_losses.append(sum(losses) / len(losses))
        logger.info("discriminator epoch %d loss %.4f", epoch, epoch_losses[-1])

    disc.freeze()
    accuracy = holdout_accuracy(disc, held_s, held_t)
    logger.info("discriminator held-out accuracy %.2f%%", accuracy)
    return disc, accuracy, epoch_losses


# ---------------------------------------------------------------------------
# Main training
# ---------------------------------------------------------------------------


def _balanced_pool_batches(
    pool_s: UnlabeledPool,
    pool_t: UnlabeledPool,
    n_needed: int,
    max_tokens: int,
    seed: int,
    epoch: int,
    limit: int | None,
) -> list[Batch]:
    """Alternating source/target pool batches, cycled to the requested count."""
    bs = make_pool_batches(pool_s, max_tokens, _derive_seed(seed, 31, epoch), limit)
    bt = make_pool_batches(pool_t, max_tokens, _derive_seed(seed, 32, epoch), limit)
    out = []
    for k in range(n_needed):
        lst = bs if k % 2 == 0 else bt
        out.append(lst[(k // 2) % len(lst)])
    return out


def _interleaved_pool_batches(
    pool_s: UnlabeledPool,
    pool_t: UnlabeledPool,
    max_tokens: int,
    seed: int,
    epoch: int,
    limit: int | None,
) -> list[Batch]:
    bs = make_pool_batches(pool_s, max_tokens, _derive_seed(seed, 31, epoch), limit)
    bt = make_pool_batches(pool_t, max_tokens, _derive_seed(seed, 32, epoch), limit)
    out = []
    for a, b in zip(bs, bt):
        out.extend((a, b))
    out.extend(bs[len(bt) :])
    out.extend(bt[len(bs) :])
    return out


def accumulate_group_gradients(
    model: StyleTransformer,
    disc,
    parallel_group: list[Batch | None],
    unlabeled_group: list[Batch | None],
    weights: LossWeights,
    rollout_margin: int,
    objective: str = "mmi",
) -> dict:
    """Backward over one accumulation group, example-count weighted.

    Scaling each micro-batch's term by its share of the group's examples
    makes the accumulated gradient equal the gradient of one concatenated
    batch under per-example averaging. Returns the merged step record.
    """
    n_par_total = sum(len(b) for b in parallel_group if b is not None)
    n_unl_total = sum(len(b) for b in unlabeled_group if b is not None)
    merged = {
        "trans_fwd": 0.0, "trans_bwd": 0.0, "mmi_trans": 0.0,
        "disc": 0.0, "cycle": 0.0, "total": 0.0,
        "n_parallel": n_par_total, "n_unlabeled": n_unl_total, "n_skipped": 0,
    }
    for par, unl in zip(parallel_group, unlabeled_group):
        par_term, unl_term, b = loss_terms(
            model, disc, par, unl, weights, rollout_margin, objective
        )
        scaled = None
        if par_term is not None:
            w = b.n_parallel / n_par_total
            scaled = par_term * w
            for key in ("trans_fwd", "trans_bwd", "mmi_trans"):
                merged[key] += getattr(b, key) * w
        if unl_term is not None:
            w = b.n_unlabeled / n_unl_total
            scaled = unl_term * w if scaled is None else scaled + unl_term * w
            merged["disc"] += b.disc * w
            merged["cycle"] += b.cycle * w
            merged["n_skipped"] += b.n_skipped
        if scaled is not None:
            scaled.backward()
    merged["total"] = (
        merged["mmi_trans"]
        + weights.w_disc * merged["disc"]
        + weights.w_cycle * merged["cycle"]
    )
    return merged


def _check_disc(config: TrainingConfig, disc) -> None:
    if config.variant == "none" or config.weights.w_disc == 0:
        return
    if disc is None:
        raise DataError("this configuration requires a pretrained discriminator")
    if not disc.frozen:
        raise FrozenDiscriminatorError(
            "discriminator must be frozen before main training"
        )


def _group(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _run_epochs(
    config: TrainingConfig,
    model: StyleTransformer,
    disc,
    epoch_batches_fn,
    valid_metric_fn,
) -> TrainResult:
    """Shared epoch loop: accumulate, step, validate, select the best epoch."""
    weights = config.weights
    if config.variant == "none" and weights.w_disc != 0:
        weights = replace(weights, w_disc=0.0)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    runlog = RunLog()
    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_metric = -1, math.inf
    step = 0
    diverged = False

    for epoch in range(config.main_epochs):
        parallel_batches, unlabeled_batches = epoch_batches_fn(epoch)
        n_steps = max(len(parallel_batches), len(unlabeled_batches))
        par_groups = _group(parallel_batches, config.update_frequency) or [[None]]
        unl_groups = _group(unlabeled_batches, config.update_frequency) or [[None]]
        n_groups = max(len(par_groups), len(unl_groups))
        for g in range(n_groups):
            par = par_groups[g] if g < len(par_groups) else [None]
            unl = unl_groups[g] if g < len(unl_groups) else [None]
            width = max(len(par), len(unl))
            par = par + [None] * (width - len(par))
            unl = unl + [None] * (width - len(unl))
            optimizer.zero_grad(set_to_none=True)
            record = accumulate_group_gradients(
                model, disc, par, unl, weights, config.rollout_margin,
                config.objective,
            )
            if not math.isfinite(record["total"]):
                logger.error("non-finite loss at epoch %d step %d", epoch, step)
                diverged = True
                break
            optimizer.step()
            record.update(epoch=epoch, step=step)
            runlog.steps.append(record)
            step += 1
        if diverged:
            # abort, falling back to the last good (best completed) state
            model.load_state_dict(best_state)
            break
        metric = valid_metric_fn(model, epoch)
        runlog.epochs.append(
            {"epoch": epoch, "valid_metric": metric, "checkpoint": f"epoch_{epoch}"}
        )
        logger.info("epoch %d steps %d valid metric %.4f", epoch, n_steps, metric)
        if metric < best_metric:
            best_epoch, best_metric = epoch, metric
            best_state = copy.deepcopy(model.state_dict())

    if not diverged:
        model.load_state_dict(best_state)
    runlog.selected_epoch = best_epoch if best_epoch >= 0 else None
    runlog.diverged = diverged
    return TrainResult(
        model=model,
        runlog=runlog,
        best_epoch=best_epoch,
        best_metric=best_metric,
        diverged=diverged,
        optimizer_state=optimizer.state_dict(),
    )


def train(config: TrainingConfig, data: TrainData, disc=None) -> TrainResult:
    """Semi-supervised or supervised-only training.

    Per epoch, unlabeled batches are resampled to match the parallel batch
    count so the two loss sums stay balanced per step. Validation
    perplexity (source to target) drives checkpoint selection.
    """
    if config.mode == "unsupervised":
        raise DataError("unsupervised mode trains via train_unsupervised")
    if not data.train or not data.valid:
        raise DataError("training needs parallel train and valid data")
    semi = config.mode == "semi_supervised"
    if semi and (data.pool_source is None or data.pool_target is None):
        raise DataError("semi-supervised mode needs both unlabeled pools")
    if semi:
        _check_disc(config, disc)
    torch.manual_seed(config.seed)
    if data.table is not None:
        vocab = len(data.table)
    else:
        vocab = 1 + max(
            max(max(e.src), max(e.tgt)) for e in data.train + data.valid
        )
        vocab = max(vocab, 7)
    model = build_model(config.model_config(vocab), seed=config.seed)

    def epoch_batches(epoch: int):
        parallel = make_batches(
            data.train, config.max_tokens_per_batch, _derive_seed(config.seed, 41, epoch)
        )
        if not semi:
            return parallel, []
        unlabeled = _balanced_pool_batches(
            data.pool_source,
            data.pool_target,
            len(parallel),
            config.max_tokens_per_batch,
            config.seed,
            epoch,
            config.unlabeled_per_epoch or None,
        )
        return parallel, unlabeled

    def valid_metric(model, epoch):
        return perplexity(model, data.valid, "s2t")

    use_disc = disc if (semi and config.variant != "none") else None
    return _run_epochs(config, model, use_disc, epoch_batches, valid_metric)


def train_unsupervised(
    config: TrainingConfig, pools: tuple[UnlabeledPool, UnlabeledPool], disc=None,
    vocab_size: int | None = None,
) -> TrainResult:
    """Cycle plus discriminator training only; no parallel data anywhere.

    Model selection uses the cyclic reconstruction loss on held-out pool
    slices, since no parallel validation set exists in this mode.
    """
    pool_source, pool_target = pools
    if config.mode != "unsupervised":
        raise DataError(f"config mode is {config.mode!r}, not unsupervised")
    if pool_source is None or pool_target is None:
        raise DataError("unsupervised training needs both pools")
    _check_disc(config, disc)
    torch.manual_seed(config.seed)
    vocab = vocab_size or max(
        7, 1 + max(max(s) for p in pools for s in p.sentences)
    )
    model = build_model(config.model_config(vocab), seed=config.seed)

    train_s, held_s = _split_holdout(pool_source, _derive_seed(config.seed, 51))
    train_t, held_t = _split_holdout(pool_target, _derive_seed(config.seed, 52))

    def epoch_batches(epoch: int):
        unlabeled = _interleaved_pool_batches(
            train_s,
            train_t,
            config.max_tokens_per_batch,
            config.seed,
            epoch,
            config.unlabeled_per_epoch or None,
        )
        return [], unlabeled

    def valid_metric(model, epoch):
        return held_out_cycle_loss(
            model, held_s, held_t, config.max_tokens_per_batch, config.rollout_margin
        )

    use_disc = disc if config.variant != "none" else None
    return _run_epochs(config, model, use_disc, epoch_batches, valid_metric)


def held_out_cycle_loss(
    model, held_source: list, held_target: list, max_tokens: int, margin: int
) -> float:
    """Mean reconstruction NLL over held-out sentences of both styles."""
    from .objectives import batch_unlabeled_losses

    total, count = 0.0, 0
    with torch.no_grad():
        for sentences, style in (
            (held_source, StyleLabel.SOURCE),
            (held_target, StyleLabel.TARGET),
        ):
            pool = UnlabeledPool(style=style, sentences=sentences)
            for batch in make_pool_batches(pool, max_tokens):
                _, cycle_t, _ = batch_unlabeled_losses(
                    model, None, batch, need_disc=False, need_cycle=True,
                    rollout_margin=margin,
                )
                if cycle_t is not None:
                    total += float(cycle_t) * len(batch)
                    count += len(batch)
    return total / count if count else math.inf


# ---------------------------------------------------------------------------
# Forward-weight sweep
# ---------------------------------------------------------------------------


def lambda_sweep(
    config: TrainingConfig,
    data: TrainData,
    lambdas: list[float],
    disc=None,
    decode_config: DecodeConfig | None = None,
) -> dict:
    """Train one model per forward-translation weight under a shared seed.

    Also runs the plain-translation-loss baseline and reports whether the
    weight-1.0 run reproduced it step for step. Returns sweep rows, the
    baseline BLEU, and the per-weight run logs.
    """
    if not data.test or data.table is None:
        raise DataError("the sweep needs test data and the tokenizer table")
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise DataError(f"sweep weight {lam} outside [0, 1]")
    decode_config = decode_config or DecodeConfig(
        beam_size=1, length_penalty=0.0, max_len=64, n_best=1
    )

    def run(cfg: TrainingConfig) -> tuple[float, RunLog]:
        result = train(cfg, data, disc)
        hyps = decode_corpus(
            result.model, [e.src for e in data.test], StyleLabel.TARGET, decode_config
        )
        hyp_words = [decode(h, data.table).split() for h in hyps]
        ref_words = [decode(e.tgt, data.table).split() for e in data.test]
        return corpus_bleu(hyp_words, ref_words), result.runlog

    rows = []
    logs = {}
    for lam in lambdas:
        cfg = replace(
            config,
            weights=replace(config.weights, lambda_forward=lam),
            objective="mmi",
        )
        bleu, runlog = run(cfg)
        rows.append((lam, bleu))
        logs[lam] = runlog
        logger.info("sweep lambda %.2f -> BLEU %.2f", lam, bleu)

    plain_bleu, plain_log = run(replace(config, objective="plain"))
    lambda_one_matches = None
    if any(lam == 1.0 for lam in lambdas):
        lambda_one_matches = step_records_identical(logs[1.0], plain_log)

    return {
        "rows": rows,
        "plain_bleu": plain_bleu,
        "plain_log": plain_log,
        "logs": logs,
        "lambda_one_matches_plain": lambda_one_matches,
    }


def step_records_identical(a: RunLog, b: RunLog) -> bool:
    """Bit-for-bit comparison of two runs' per-step loss records."""
    if len(a.steps) != len(b.steps):
        return False
    for ra, rb in zip(a.steps, b.steps):
        for key in ("mmi_trans", "disc", "cycle", "total", "n_parallel"):
            if ra[key] != rb[key]:
                return False
    return True


def sweep_to_csv(rows: list[tuple[float, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("lambda,bleu\n")
        for lam, bleu in rows:
            f.write(f"{lam:.3f},{bleu:.6f}\n")
