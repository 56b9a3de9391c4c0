"""The five training objectives.

All losses return scalar autograd tensors, clamp probabilities to
[1e-7, 1 - 1e-7] before taking logs, and are non-negative and finite for
finite inputs. Batch averaging is the trainer's business; per-example losses
here sum over sequence positions where the objective does.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .bpe import MASK_ID, EncodedSequence
from .nn import (
    ModelError,
    Parameters,
    bow_distribution,
    build_pair_sequence,
    coherence_probability,
    encoder_forward,
    generator_forward,
    mlm_distributions,
)
from .tensor import Tensor

PROB_EPS = 1e-7


def _clamped_log(probs: Tensor) -> Tensor:
    return T.log(T.clamp(probs, PROB_EPS, 1.0 - PROB_EPS))


def bce_loss(predicted: Tensor, labels) -> Tensor:
    """Mean binary cross entropy of probabilities against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float32)
    if y.size == 0:
        raise ModelError("bce_loss needs at least one prediction")
    if predicted.data.shape != y.shape:
        raise ModelError(
            f"prediction/label shape mismatch: {predicted.data.shape} vs {y.shape}"
        )
    p = T.clamp(predicted, PROB_EPS, 1.0 - PROB_EPS)
    y_t = Tensor(y)
    per_term = y_t * T.log(p) + (1.0 - y_t) * T.log(1.0 - p)
    return -T.tmean(per_term)


def nll_loss(distributions: Tensor, target_ids) -> Tensor:
    """Summed negative log-likelihood of targets under per-position rows."""
    targets = list(target_ids)
    rows, vocab = distributions.data.shape
    if len(targets) != rows:
        raise ModelError(f"{rows} distribution rows but {len(targets)} targets")
    if any(not 0 <= t < vocab for t in targets):
        raise ModelError(f"target id out of vocab range [0, {vocab}): {targets}")
    picked = T.select_positions(distributions, list(range(rows)), targets)
    return -T.tsum(_clamped_log(picked))


def bow_loss(
    p: Parameters,
    context: EncodedSequence,
    z: int | None,
    response_ids,
    latent_mix: Tensor | None = None,
) -> Tensor:
    """Position-independent response-token prediction from context + latent.

    One summary vector (the causal trunk's state at <bos>, which sees the
    latent token and the whole context) feeds the bag-of-words head; the loss
    sums -log p over response tokens, so it is invariant under permutation of
    ``response_ids``.
    """
    # sorting makes permutation invariance exact (same float summation order)
    targets = sorted(response_ids)
    if not targets:
        raise ModelError("bow_loss needs a non-empty response")
    out = generator_forward(p, context, EncodedSequence(), z=z,
                            latent_mix=latent_mix)
    summary = T.rows(out.hidden, [out.bos_position])
    dist = bow_distribution(p, summary)
    if any(not 0 <= t < dist.data.shape[1] for t in targets):
        raise ModelError(f"response id out of vocab range: {targets}")
    picked = T.select_positions(dist, [0] * len(targets), targets)
    return -T.tsum(_clamped_log(picked))


def rce_loss(
    p: Parameters,
    context: EncodedSequence,
    positive_response: EncodedSequence,
    negative_response: EncodedSequence,
) -> Tensor:
    """-log p(coherent | C, R)  -log p(incoherent | C, R̂)."""
    pos_seq = build_pair_sequence(context, positive_response, p.config)
    neg_seq = build_pair_sequence(context, negative_response, p.config)
    p_pos = coherence_probability(p, encoder_forward(p, pos_seq))
    p_neg = coherence_probability(p, encoder_forward(p, neg_seq))
    return -(_clamped_log(p_pos) + _clamped_log(1.0 - p_neg))


def masked_positions(length: int, mask_rate: float, seed: int) -> list[int]:
    """Seeded choice of ⌈mask_rate·L⌉ (at least 1) positions to corrupt."""
    if length < 1:
        raise ModelError("cannot mask an empty sequence")
    count = max(1, math.ceil(mask_rate * length))
    count = min(count, length)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(length, size=count, replace=False))


def mlm_loss(
    p: Parameters,
    sequence: EncodedSequence,
    mask_rate: float = 0.15,
    seed: int = 0,
) -> Tensor:
    """Masked-token reconstruction: corrupt a seeded subset, predict originals."""
    positions = masked_positions(len(sequence), mask_rate, seed)
    corrupted = EncodedSequence(
        token_ids=list(sequence.token_ids),
        role_ids=list(sequence.role_ids),
        turn_ids=list(sequence.turn_ids),
        position_ids=list(sequence.position_ids),
    )
    originals = []
    for pos in positions:
        originals.append(corrupted.token_ids[pos])
        corrupted.token_ids[pos] = MASK_ID
    enc = encoder_forward(p, corrupted)
    dists = mlm_distributions(p, enc.hidden, positions)
    picked = T.select_positions(dists, list(range(len(positions))), originals)
    return -T.tsum(_clamped_log(picked))
