"""Transformer networks over the autograd engine.

One parameter schema serves every role in the system: a trunk of pre-norm
transformer blocks fed by a four-way embedding sum (token + role + turn +
position), read out through five heads (next-token, bag-of-words, latent
posterior, coherence, masked reconstruction). Run causally it is the
generator; run bidirectionally it is the encoder used for scoring,
discrimination and masked reconstruction. The pooled encoder vector is the
first position's final hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bpe import BOS_ID, LATENT_BASE, EncodedSequence, latent_token_id
from .tensor import Tensor

def _init_std(shape: tuple[int, ...]) -> float:
    # fan-in scaling: keeps activations and gradients O(1) at the small
    # hidden sizes this runs at, where a fixed 0.02 leaves attention inert
    return 1.0 / math.sqrt(shape[0])


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 64
    position_table_size: int = 64
    hidden_dim: int = 32
    ffn_dim: int = 128
    layer_count: int = 2
    head_count: int = 2
    latent_count: int = 5
    role_count: int = 2
    turn_count: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "position_table_size": self.position_table_size,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "layer_count": self.layer_count,
            "head_count": self.head_count,
            "latent_count": self.latent_count,
            "role_count": self.role_count,
            "turn_count": self.turn_count,
        }
        for name, value in positive.items():
            if value < 1:
                raise ModelError(f"{name} must be positive, got {value}")
        if self.hidden_dim % self.head_count != 0:
            raise ModelError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"head_count {self.head_count}"
            )
        if self.vocab_size <= latent_token_id(self.latent_count - 1):
            raise ModelError(
                f"vocab_size {self.vocab_size} too small for "
                f"{self.latent_count} latent tokens"
            )


@dataclass
class Parameters:
    """Named tensor map plus the config that fixes every shape."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def parameter_schema(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) triples defining one network."""
    h, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    schema: list[tuple[str, tuple[int, ...], str]] = [
        ("emb.token", (v, h), "embed"),
        ("emb.role", (config.role_count, h), "embed"),
        ("emb.turn", (config.turn_count, h), "embed"),
        ("emb.pos", (config.position_table_size, h), "embed"),
    ]
    for i in range(config.layer_count):
        schema += [
            (f"layer{i}.ln1.gain", (h,), "ones"),
            (f"layer{i}.ln1.bias", (h,), "zeros"),
            (f"layer{i}.attn.wq", (h, h), "normal"),
            (f"layer{i}.attn.wk", (h, h), "normal"),
            (f"layer{i}.attn.wv", (h, h), "normal"),
            (f"layer{i}.attn.wo", (h, h), "normal"),
            (f"layer{i}.attn.bq", (h,), "zeros"),
            (f"layer{i}.attn.bk", (h,), "zeros"),
            (f"layer{i}.attn.bv", (h,), "zeros"),
            (f"layer{i}.attn.bo", (h,), "zeros"),
            (f"layer{i}.ln2.gain", (h,), "ones"),
            (f"layer{i}.ln2.bias", (h,), "zeros"),
            (f"layer{i}.ffn.w1", (h, f), "normal"),
            (f"layer{i}.ffn.b1", (f,), "zeros"),
            (f"layer{i}.ffn.w2", (f, h), "normal"),
            (f"layer{i}.ffn.b2", (h,), "zeros"),
        ]
    schema += [
        ("final_ln.gain", (h,), "ones"),
        ("final_ln.bias", (h,), "zeros"),
        ("head.lm.w", (h, v), "normal"),
        ("head.lm.b", (v,), "zeros"),
        ("head.bow.w", (h, v), "normal"),
        ("head.bow.b", (v,), "zeros"),
        ("head.posterior.w", (h, config.latent_count), "normal"),
        ("head.posterior.b", (config.latent_count,), "zeros"),
        ("head.coherence.w", (h, 1), "normal"),
        ("head.coherence.b", (1,), "zeros"),
        ("head.mlm.w", (h, v), "normal"),
        ("head.mlm.b", (v,), "zeros"),
    ]
    return schema


def init_parameters(config: ModelConfig) -> Parameters:
    rng = np.random.default_rng(config.seed)
    makers = {
        "normal": lambda s: (rng.standard_normal(s) * _init_std(s)).astype(np.float32),
        # lookup rows, not matmul inputs: scale by width so every table
        # contributes comparably to the embedding sum
        "embed": lambda s: (rng.standard_normal(s) / math.sqrt(s[-1])).astype(np.float32),
        "zeros": lambda s: np.zeros(s, dtype=np.float32),
        "ones": lambda s: np.ones(s, dtype=np.float32),
    }
    tensors = {
        name: Tensor(makers[kind](shape), requires_grad=True)
        for name, shape, kind in parameter_schema(config)
    }
    return Parameters(config=config, tensors=tensors)


# --- sequence assembly ---------------------------------------------------
#
# Generator layout:  [<z>]? C₁ … C_n <bos> R₁ … R_m   (causal)
# Encoder layout:    <bos> C₁ … C_n R₁ … R_m          (bidirectional)
#
# The latent token and <bos> adopt the responder's role and the response
# turn index. Turn ids are clamped to the embedding-table bound; position
# ids always run 0..L-1.


def _clamp_turns(turns: list[int], config: ModelConfig) -> list[int]:
    bound = config.turn_count - 1
    return [min(t, bound) for t in turns]


def _merged_ids(
    context: EncodedSequence,
    response_prefix: EncodedSequence,
    z: int | None,
    config: ModelConfig,
) -> EncodedSequence:
    ctx_last_role = context.role_ids[-1] if len(context) else 0
    ctx_last_turn = context.turn_ids[-1] if len(context) else -1
    if len(response_prefix):
        resp_role = response_prefix.role_ids[0]
    else:
        resp_role = 1 - ctx_last_role
    resp_turn = ctx_last_turn + 1

    seq = EncodedSequence()
    if z is not None:
        if not 0 <= z < config.latent_count:
            raise ModelError(f"latent value {z} outside [0, {config.latent_count})")
        seq.token_ids.append(latent_token_id(z))
        seq.role_ids.append(resp_role)
        seq.turn_ids.append(resp_turn)
    seq.token_ids += list(context.token_ids)
    seq.role_ids += list(context.role_ids)
    seq.turn_ids += list(context.turn_ids)
    seq.token_ids.append(BOS_ID)
    seq.role_ids.append(resp_role)
    seq.turn_ids.append(resp_turn)
    seq.token_ids += list(response_prefix.token_ids)
    seq.role_ids += list(response_prefix.role_ids)
    seq.turn_ids += [resp_turn + t for t in response_prefix.turn_ids]
    seq.turn_ids = _clamp_turns(seq.turn_ids, config)
    seq.position_ids = list(range(len(seq.token_ids)))
    return seq


def build_generator_sequence(
    context: EncodedSequence,
    response_prefix: EncodedSequence,
    z: int | None,
    config: ModelConfig,
) -> tuple[EncodedSequence, int]:
    """Merged causal input; second value is the <bos> position."""
    seq = _merged_ids(context, response_prefix, z, config)
    bos_at = (1 if z is not None else 0) + len(context)
    return seq, bos_at


def build_pair_sequence(
    context: EncodedSequence,
    response: EncodedSequence,
    config: ModelConfig,
) -> EncodedSequence:
    """Bidirectional <bos>-pooled layout over a (context, response) pair."""
    ctx_last_turn = context.turn_ids[-1] if len(context) else -1
    first_role = context.role_ids[0] if len(context) else 0

    seq = EncodedSequence()
    seq.token_ids.append(BOS_ID)
    seq.role_ids.append(first_role)
    seq.turn_ids.append(0)
    seq.token_ids += list(context.token_ids)
    seq.role_ids += list(context.role_ids)
    seq.turn_ids += list(context.turn_ids)
    seq.token_ids += list(response.token_ids)
    seq.role_ids += list(response.role_ids)
    seq.turn_ids += [ctx_last_turn + 1 + t for t in response.turn_ids]
    seq.turn_ids = _clamp_turns(seq.turn_ids, config)
    seq.position_ids = list(range(len(seq.token_ids)))
    return seq


# --- forward passes ------------------------------------------------------


def embed_inputs(
    p: Parameters,
    seq: EncodedSequence,
    latent_mix: Tensor | None = None,
) -> Tensor:
    """Four-way embedding sum, one row per sequence position.

    ``latent_mix`` (shape (1, K)) replaces the first token's embedding with a
    mixture over the latent token rows; the straight-through path of stage-2
    training feeds gradients to the latent posterior this way.
    """
    cfg = p.config
    L = len(seq)
    if L > cfg.max_seq_len:
        raise ModelError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    checks = (
        ("token", seq.token_ids, cfg.vocab_size),
        ("role", seq.role_ids, cfg.role_count),
        ("turn", seq.turn_ids, cfg.turn_count),
        ("position", seq.position_ids, cfg.position_table_size),
    )
    for name, ids, bound in checks:
        if any(not 0 <= i < bound for i in ids):
            raise ModelError(f"{name} id out of range [0, {bound}): {ids}")

    tok_table = p.tensors["emb.token"]
    if latent_mix is None:
        tok = T.rows(tok_table, seq.token_ids)
    else:
        latent_rows = T.rows(
            tok_table, list(range(LATENT_BASE, LATENT_BASE + cfg.latent_count))
        )
        head_row = T.matmul(latent_mix, latent_rows)
        rest = T.rows(tok_table, seq.token_ids[1:])
        tok = T.concat_rows([head_row, rest])
    role = T.rows(p.tensors["emb.role"], seq.role_ids)
    turn = T.rows(p.tensors["emb.turn"], seq.turn_ids)
    pos = T.rows(p.tensors["emb.pos"], seq.position_ids)
    return tok + role + turn + pos


def _causal_mask(length: int) -> Tensor:
    mask = np.triu(np.full((length, length), -1e9, dtype=np.float32), k=1)
    return Tensor(mask)


def trunk(p: Parameters, emb: Tensor, causal: bool) -> Tensor:
    """Pre-norm transformer stack; returns final hidden states (L, hidden)."""
    cfg = p.config
    L = emb.data.shape[0]
    dh = cfg.hidden_dim // cfg.head_count
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(L) if causal else None

    h = emb
    for i in range(cfg.layer_count):
        t = p.tensors
        a = T.layer_norm(h, t[f"layer{i}.ln1.gain"], t[f"layer{i}.ln1.bias"])
        q = T.matmul(a, t[f"layer{i}.attn.wq"]) + t[f"layer{i}.attn.bq"]
        k = T.matmul(a, t[f"layer{i}.attn.wk"]) + t[f"layer{i}.attn.bk"]
        v = T.matmul(a, t[f"layer{i}.attn.wv"]) + t[f"layer{i}.attn.bv"]
        merged = []
        for j in range(cfg.head_count):
            qj = T.narrow_cols(q, j * dh, dh)
            kj = T.narrow_cols(k, j * dh, dh)
            vj = T.narrow_cols(v, j * dh, dh)
            scores = T.matmul(qj, T.transpose(kj)) * scale
            if mask is not None:
                scores = scores + mask
            merged.append(T.matmul(T.softmax(scores), vj))
        attn = T.matmul(T.concat_cols(merged), t[f"layer{i}.attn.wo"])
        h = h + attn + t[f"layer{i}.attn.bo"]
        f = T.layer_norm(h, t[f"layer{i}.ln2.gain"], t[f"layer{i}.ln2.bias"])
        f = T.matmul(T.gelu(T.matmul(f, t[f"layer{i}.ffn.w1"])
                            + t[f"layer{i}.ffn.b1"]),
                     t[f"layer{i}.ffn.w2"]) + t[f"layer{i}.ffn.b2"]
        h = h + f
    return T.layer_norm(h, p.tensors["final_ln.gain"], p.tensors["final_ln.bias"])


@dataclass
class GeneratorOutput:
    probs: Tensor            # (L, vocab) next-token distribution per position
    hidden: Tensor           # (L, hidden)
    seq: EncodedSequence     # the merged input actually consumed
    bos_position: int        # predictions for response tokens start here


def generator_forward(
    p: Parameters,
    context: EncodedSequence,
    response_prefix: EncodedSequence,
    z: int | None = None,
    latent_mix: Tensor | None = None,
) -> GeneratorOutput:
    """Causal forward; row ℓ is the distribution over the token at ℓ+1."""
    if latent_mix is not None and z is None:
        z = 0  # placeholder id; the mixture overrides its embedding
    seq, bos_at = build_generator_sequence(context, response_prefix, z, p.config)
    emb = embed_inputs(p, seq, latent_mix=latent_mix)
    hidden = trunk(p, emb, causal=True)
    logits = T.matmul(hidden, p.tensors["head.lm.w"]) + p.tensors["head.lm.b"]
    return GeneratorOutput(probs=T.softmax(logits), hidden=hidden, seq=seq,
                           bos_position=bos_at)


@dataclass
class EncoderOutput:
    pooled: Tensor   # (hidden,) first-position summary
    hidden: Tensor   # (L, hidden)


def encoder_forward(p: Parameters, seq: EncodedSequence) -> EncoderOutput:
    """Bidirectional forward; the first position pools the whole sequence."""
    emb = embed_inputs(p, seq)
    hidden = trunk(p, emb, causal=False)
    pooled = T.reshape(T.rows(hidden, [0]), (p.config.hidden_dim,))
    return EncoderOutput(pooled=pooled, hidden=hidden)


# --- heads ---------------------------------------------------------------


def _pooled_2d(out: EncoderOutput) -> Tensor:
    return T.reshape(out.pooled, (1, out.pooled.data.shape[0]))


def bow_distribution(p: Parameters, summary: Tensor) -> Tensor:
    """(1, vocab) bag-of-words distribution from a (1, hidden) summary."""
    logits = T.matmul(summary, p.tensors["head.bow.w"]) + p.tensors["head.bow.b"]
    return T.softmax(logits)


def posterior_distribution(p: Parameters, enc: EncoderOutput) -> Tensor:
    """(1, K) distribution over latent values from the pooled pair encoding."""
    logits = (T.matmul(_pooled_2d(enc), p.tensors["head.posterior.w"])
              + p.tensors["head.posterior.b"])
    return T.softmax(logits)


def coherence_probability(p: Parameters, enc: EncoderOutput) -> Tensor:
    """Scalar probability that the encoded (context, response) pair coheres.

    The logit is width-normalized (divided by sqrt(hidden)): the pooled
    vector leaves the final layer norm with ~sqrt(hidden) magnitude, and an
    unscaled scalar readout would take gradient steps ~hidden times larger
    than the rest of the network, destabilizing plain SGD.
    """
    scale = 1.0 / math.sqrt(p.config.hidden_dim)
    logit = (T.matmul(_pooled_2d(enc), p.tensors["head.coherence.w"]) * scale
             + p.tensors["head.coherence.b"])
    return T.reshape(T.sigmoid(logit), ())


def mlm_distributions(p: Parameters, hidden: Tensor,
                      positions: list[int]) -> Tensor:
    """(len(positions), vocab) reconstruction distributions."""
    picked = T.rows(hidden, positions)
    logits = T.matmul(picked, p.tensors["head.mlm.w"]) + p.tensors["head.mlm.b"]
    return T.softmax(logits)
