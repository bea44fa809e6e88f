"""Training losses: translation, bidirectional translation mixing,
discriminator, cyclic reconstruction, and their weighted total.

All negative log-likelihoods are averaged per target token (end marker
included) before weighting, so the mixing weights stay comparable across
sentence lengths. The bidirectional translation loss interpolates forward
and backward per-token NLL with a forward weight; at weight 1 it
short-circuits to the plain forward loss, computing bit-identical values.

Generated intermediates follow two different gradient paths by design:
the discriminator term scores the generator's soft rollout (gradients flow
through the first pass), while the cycle term reconstructs the input from
a detached greedy rollout (gradients flow through the reconstruction pass
only).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .corpus import Batch
from .errors import DataError, FrozenDiscriminatorError
from .styles import StyleLabel
from .tokenizer import TokenSeq

DEFAULT_ROLLOUT_MARGIN = 8


@dataclass(frozen=True)
class LossWeights:
    lambda_forward: float = 0.8
    w_disc: float = 1.0
    w_cycle: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.lambda_forward <= 1.0:
            raise DataError(
                f"forward-translation weight {self.lambda_forward} outside [0, 1]"
            )
        for name in ("w_disc", "w_cycle"):
            v = getattr(self, name)
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise DataError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    trans_fwd: float
    trans_bwd: float
    mmi_trans: float
    disc: float
    cycle: float
    total: float
    n_parallel: int
    n_unlabeled: int
    n_skipped: int

    def to_dict(self) -> dict:
        return asdict(self)


def _require_frozen(disc) -> None:
    if not getattr(disc, "frozen", False):
        raise FrozenDiscriminatorError(
            "discriminator must be pretrained and frozen before generator training"
        )


# ---------------------------------------------------------------------------
# Single-pair operations
# ---------------------------------------------------------------------------


def translation_loss(model, x: TokenSeq, y: TokenSeq, style: StyleLabel) -> torch.Tensor:
    """Per-token NLL of y given x and the requested output style."""
    if not y:
        raise DataError("translation loss needs a non-empty target")
    return -model.log_prob(x, y, style) / (len(y) + 1)


def mmi_translation_loss(model, x: TokenSeq, y: TokenSeq, lam: float) -> torch.Tensor:
    """lam * NLL(y|x, target-style) + (1 - lam) * NLL(x|y, source-style).

    Degenerate weights skip the unused direction entirely, so lam = 1
    reproduces the plain translation loss bit for bit.
    """
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"forward-translation weight {lam} outside [0, 1]")
    if lam == 1.0:
        return translation_loss(model, x, y, StyleLabel.TARGET)
    if lam == 0.0:
        return translation_loss(model, y, x, StyleLabel.SOURCE)
    fwd = translation_loss(model, x, y, StyleLabel.TARGET)
    bwd = translation_loss(model, y, x, StyleLabel.SOURCE)
    return lam * fwd + (1.0 - lam) * bwd


def discriminator_loss(
    model,
    disc,
    x: TokenSeq,
    style_of_x: StyleLabel,
    max_len: int | None = None,
) -> torch.Tensor | None:
    """-log P(opposite style | soft rollout of x toward the opposite style).

    Returns None when the rollout is empty (counted by callers, not an
    error). Gradients reach only the generator; the discriminator must be
    frozen.
    """
    _require_frozen(disc)
    from .model import batch_to_tensors  # local import to keep stubs torch-free

    target_style = style_of_x.opposite()
    if max_len is None:
        max_len = len(x) + DEFAULT_ROLLOUT_MARGIN
    src, src_len = batch_to_tensors([x])
    dists, _, content = model.rollout(src, src_len, target_style, max_len)
    n = int(content[0])
    if n == 0:
        return None
    logp = disc.log_prob_style_soft(dists[:, :n], content, target_style)
    return -logp[0]


def cycle_loss(
    model,
    x: TokenSeq,
    style_of_x: StyleLabel,
    max_len: int | None = None,
) -> torch.Tensor | None:
    """Reconstruction NLL of x from its detached opposite-style translation.

    The greedy intermediate is discrete; gradients flow only through the
    reconstruction pass. Empty rollouts return None.
    """
    from .model import batch_to_tensors

    if max_len is None:
        max_len = len(x) + DEFAULT_ROLLOUT_MARGIN
    src, src_len = batch_to_tensors([x])
    with torch.no_grad():
        _, tokens, content = model.rollout(src, src_len, style_of_x.opposite(), max_len)
    n = int(content[0])
    if n == 0:
        return None
    intermediate = tokens[0, :n].tolist()
    return translation_loss(model, intermediate, x, style_of_x)


# ---------------------------------------------------------------------------
# Batched operations
# ---------------------------------------------------------------------------


def batch_translation_nll(model, batch: Batch, forward: bool) -> torch.Tensor:
    """Per-row per-token NLL for a parallel batch, in either direction."""
    if batch.tgt is None:
        raise DataError("translation loss needs a parallel batch")
    if forward:
        sums, counts = model.sequence_log_probs(
            batch.src, batch.src_lengths, batch.tgt, batch.tgt_lengths, StyleLabel.TARGET
        )
    else:
        sums, counts = model.sequence_log_probs(
            batch.tgt, batch.tgt_lengths, batch.src, batch.src_lengths, StyleLabel.SOURCE
        )
    return -sums / counts


def batch_mmi_loss(
    model, batch: Batch, lam: float
) -> tuple[torch.Tensor, float, float]:
    """Mean mixed translation loss over a parallel batch.

    Returns (loss tensor, mean forward NLL, mean backward NLL); the mean of
    a skipped direction reports as 0.0.
    """
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"forward-translation weight {lam} outside [0, 1]")
    if lam == 1.0:
        fwd = batch_translation_nll(model, batch, forward=True).mean()
        return fwd, float(fwd.detach()), 0.0
    if lam == 0.0:
        bwd = batch_translation_nll(model, batch, forward=False).mean()
        return bwd, 0.0, float(bwd.detach())
    fwd = batch_translation_nll(model, batch, forward=True).mean()
    bwd = batch_translation_nll(model, batch, forward=False).mean()
    return lam * fwd + (1.0 - lam) * bwd, float(fwd.detach()), float(bwd.detach())


def batch_unlabeled_losses(
    model,
    disc,
    batch: Batch,
    need_disc: bool,
    need_cycle: bool,
    rollout_margin: int = DEFAULT_ROLLOUT_MARGIN,
) -> tuple[torch.Tensor | None, torch.Tensor | None, int]:
    """Discriminator and cycle terms for one single-style batch.

    One greedy rollout serves both: its soft distributions feed the
    discriminator, its detached tokens feed the reconstruction pass.
    Returns (disc term, cycle term, number of empty-rollout rows skipped).
    """
    if batch.kind != "unlabeled":
        raise DataError("unlabeled losses need an unlabeled batch")
    if need_disc:
        _require_frozen(disc)
    opposite = batch.style.opposite()
    max_len = int(batch.src_lengths.max()) + rollout_margin

    if need_disc:
        dists, tokens, content = model.rollout(
            batch.src, batch.src_lengths, opposite, max_len
        )
    elif need_cycle:
        with torch.no_grad():
            dists, tokens, content = model.rollout(
                batch.src, batch.src_lengths, opposite, max_len
            )
    else:
        return None, None, 0

    alive = content > 0
    n_skipped = int((~alive).sum())
    if not bool(alive.any()):
        return None, None, n_skipped

    disc_term = None
    if need_disc:
        logp = disc.log_prob_style_soft(dists, content, opposite)
        disc_term = (-logp[alive]).mean()

    cycle_term = None
    if need_cycle:
        from .model import batch_to_tensors

        rows = [
            tokens[i, : int(content[i])].tolist()
            for i in range(len(batch))
            if bool(alive[i])
        ]
        pseudo, pseudo_len = batch_to_tensors(rows, device=batch.src.device)
        originals = batch.src[alive]
        orig_len = batch.src_lengths[alive]
        sums, counts = model.sequence_log_probs(
            pseudo, pseudo_len, originals, orig_len, batch.style
        )
        cycle_term = (-sums / counts).mean()

    return disc_term, cycle_term, n_skipped


def loss_terms(
    model,
    disc,
    parallel_batch: Batch | None,
    unlabeled_batch: Batch | None,
    weights: LossWeights,
    rollout_margin: int = DEFAULT_ROLLOUT_MARGIN,
    objective: str = "mmi",
) -> tuple[torch.Tensor | None, torch.Tensor | None, LossBreakdown]:
    """Parallel and unlabeled loss terms, kept separate.

    The trainer scales each term by its micro-batch example count during
    gradient accumulation; total_loss sums them. objective "plain" uses
    the base forward translation loss instead of the bidirectional mix.
    """
    if objective not in ("mmi", "plain"):
        raise DataError(f"unknown objective {objective!r}")
    has_parallel = parallel_batch is not None and len(parallel_batch) > 0
    has_unlabeled = unlabeled_batch is not None and len(unlabeled_batch) > 0
    if not has_parallel and not has_unlabeled:
        raise DataError("total loss needs at least one non-empty batch")
    if weights.w_disc > 0 and has_unlabeled and disc is None:
        raise DataError("discriminator weight is positive but no discriminator given")

    par_term = None
    unl_term = None
    fwd = bwd = mmi = disc_f = cycle_f = 0.0
    n_skipped = 0

    if has_parallel:
        if objective == "plain":
            par_term = batch_translation_nll(model, parallel_batch, forward=True).mean()
            fwd = float(par_term.detach())
        else:
            par_term, fwd, bwd = batch_mmi_loss(
                model, parallel_batch, weights.lambda_forward
            )
        mmi = float(par_term.detach())

    if has_unlabeled:
        disc_t, cycle_t, n_skipped = batch_unlabeled_losses(
            model,
            disc,
            unlabeled_batch,
            need_disc=weights.w_disc > 0,
            need_cycle=weights.w_cycle > 0,
            rollout_margin=rollout_margin,
        )
        if disc_t is not None:
            disc_f = float(disc_t.detach())
            unl_term = weights.w_disc * disc_t
        if cycle_t is not None:
            cycle_f = float(cycle_t.detach())
            term = weights.w_cycle * cycle_t
            unl_term = term if unl_term is None else unl_term + term

    total_f = 0.0
    if par_term is not None:
        total_f += float(par_term.detach())
    if unl_term is not None:
        total_f += float(unl_term.detach())

    breakdown = LossBreakdown(
        trans_fwd=fwd,
        trans_bwd=bwd,
        mmi_trans=mmi,
        disc=disc_f,
        cycle=cycle_f,
        total=total_f,
        n_parallel=len(parallel_batch) if has_parallel else 0,
        n_unlabeled=len(unlabeled_batch) if has_unlabeled else 0,
        n_skipped=n_skipped,
    )
    return par_term, unl_term, breakdown


def total_loss(
    model,
    disc,
    parallel_batch: Batch | None,
    unlabeled_batch: Batch | None,
    weights: LossWeights,
    rollout_margin: int = DEFAULT_ROLLOUT_MARGIN,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the parallel mixing term and the unlabeled terms.

    Unsupervised training passes no parallel batch; supervised-only passes
    no unlabeled batch. Both missing is an error.
    """
    par_term, unl_term, breakdown = loss_terms(
        model, disc, parallel_batch, unlabeled_batch, weights, rollout_margin
    )
    parts = [t for t in (par_term, unl_term) if t is not None]
    total = sum(parts) if parts else torch.zeros(())
    return total, breakdown
