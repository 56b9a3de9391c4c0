"""Shared tiny-model fixtures for gradient and behaviour tests.

GRAD_CFG is sized so a full finite-difference sweep over every parameter runs
in well under a second; builders return closures over raw numpy tensor dicts
so the same loss can be evaluated by autograd and by central differences.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from topicchat import losses
from topicchat.bpe import BOS_ID, EOS_ID, EncodedSequence
from topicchat.nn import (
    ModelConfig,
    Parameters,
    build_pair_sequence,
    coherence_probability,
    encoder_forward,
    generator_forward,
    init_parameters,
)
from topicchat.tensor import Tensor, concat_rows, reshape, rows

GRAD_CFG = ModelConfig(
    vocab_size=14,
    max_seq_len=12,
    position_table_size=12,
    hidden_dim=4,
    ffn_dim=8,
    layer_count=1,
    head_count=2,
    latent_count=2,
    role_count=2,
    turn_count=4,
)

# ids >= 7 are ordinary "word" tokens under GRAD_CFG (latents occupy 5..6)
CTX_IDS = [7, 8, 9]
RESP_IDS = [10, 11]


def seq_of(token_ids: list[int], role: int = 0, turn: int = 0) -> EncodedSequence:
    return EncodedSequence(
        token_ids=list(token_ids),
        role_ids=[role] * len(token_ids),
        turn_ids=[turn] * len(token_ids),
        position_ids=list(range(len(token_ids))),
    )


def two_turn_context() -> EncodedSequence:
    a = seq_of(CTX_IDS[:2], role=0, turn=0)
    b = seq_of([CTX_IDS[2]], role=1, turn=1)
    return EncodedSequence(
        token_ids=a.token_ids + b.token_ids,
        role_ids=a.role_ids + b.role_ids,
        turn_ids=a.turn_ids + b.turn_ids,
        position_ids=list(range(3)),
    )


def tiny_params(seed: int = 0, cfg: ModelConfig = GRAD_CFG) -> Parameters:
    return init_parameters(dataclasses.replace(cfg, seed=seed))


def params_from_arrays(arrays: dict[str, np.ndarray],
                       cfg: ModelConfig = GRAD_CFG) -> Parameters:
    return Parameters(config=cfg, tensors={
        name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()
    })


def arrays_of(p: Parameters) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in p.tensors.items()}


# --- scalar loss builders ----------------------------------------------------
#
# Each returns loss(params) so tests can do:
#   build(params).backward()                      (autograd side)
#   finite_difference_grads(lambda d: float(build(params_from_arrays(d)).data), ...)


def nll_build(p: Parameters):
    ctx = two_turn_context()
    resp = seq_of(RESP_IDS, role=1, turn=2)
    out = generator_forward(p, ctx, resp, z=1)
    targets = RESP_IDS + [EOS_ID]
    picked = rows(out.probs, list(range(out.bos_position,
                                        out.bos_position + len(targets))))
    return losses.nll_loss(picked, targets)


def bow_build(p: Parameters):
    return losses.bow_loss(p, two_turn_context(), 0, RESP_IDS)


def bce_build(p: Parameters):
    ctx = two_turn_context()
    pos = build_pair_sequence(ctx, seq_of(RESP_IDS, role=1, turn=2), p.config)
    neg = build_pair_sequence(ctx, seq_of([12, 13], role=1, turn=2), p.config)
    probs = concat_rows([
        reshape(coherence_probability(p, encoder_forward(p, pos)), (1, 1)),
        reshape(coherence_probability(p, encoder_forward(p, neg)), (1, 1)),
    ])
    return losses.bce_loss(reshape(probs, (2,)), [1.0, 0.0])


def rce_build(p: Parameters):
    ctx = two_turn_context()
    return losses.rce_loss(p, ctx, seq_of(RESP_IDS, role=1, turn=2),
                           seq_of([12, 13], role=1, turn=2))


def mlm_build(p: Parameters):
    pair = build_pair_sequence(two_turn_context(),
                               seq_of(RESP_IDS, role=1, turn=2), p.config)
    return losses.mlm_loss(p, pair, mask_rate=0.3, seed=7)


LOSS_BUILDERS = {
    "nll": nll_build,
    "bow": bow_build,
    "bce": bce_build,
    "rce": rce_build,
    "mlm": mlm_build,
}


def loss_over_arrays(build, cfg: ModelConfig = GRAD_CFG):
    """Adapter: same loss as a plain function of the raw array dict."""
    def fn(arrays: dict[str, np.ndarray]) -> float:
        return float(build(params_from_arrays(arrays, cfg)).data)
    return fn
