"""Curriculum training: general generation, diverse generation with a
discrete latent, coherence selection, and the topic discriminator.

Every stage follows the same skeleton: pre-encode the examples, draw seeded
batches, average per-example losses, take a plain SGD step, and append a
trace row. Runs are bit-deterministic for a fixed (plan, data, seed): batch
order, latent sampling, masking and negative draws all derive from one
generator seeded by the plan.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bpe import EOS_ID, EncodedSequence, Vocab, encode
from .graph import TrainingExample
from .losses import bce_loss, bow_loss, mlm_loss, nll_loss, rce_loss
from .nn import (
    ModelConfig,
    Parameters,
    build_pair_sequence,
    coherence_probability,
    encoder_forward,
    generator_forward,
    posterior_distribution,
)
from .tensor import Tensor

STAGES = ("stage1", "stage2_1", "stage2_2", "discriminator")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    stage: str
    batch_size: int = 16
    learning_rate: float = 0.5
    step_count: int = 200
    seed: int = 0
    eval_every: int = 50
    mask_rate: float = 0.15

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise TrainError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        for name in ("batch_size", "learning_rate", "step_count", "eval_every"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")


@dataclass
class TraceRow:
    step: int
    total: float
    comp1: float
    comp2: float
    valid: float | None = None
    ppl: float | None = None


@dataclass
class LossTrace:
    stage: str
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise TrainError(
                f"trace steps must increase: {self.rows[-1].step} -> {row.step}"
            )
        for name in ("total", "comp1", "comp2"):
            if not math.isfinite(getattr(row, name)):
                raise TrainError(f"non-finite {name} at step {row.step}")
        self.rows.append(row)

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "total", "comp1", "comp2", "valid", "ppl"])
            for r in self.rows:
                writer.writerow([
                    r.step, repr(r.total), repr(r.comp1), repr(r.comp2),
                    "" if r.valid is None else repr(r.valid),
                    "" if r.ppl is None else repr(r.ppl),
                ])


def load_trace_csv(path: str, stage: str = "") -> LossTrace:
    trace = LossTrace(stage=stage)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            trace.append(TraceRow(
                step=int(rec["step"]),
                total=float(rec["total"]),
                comp1=float(rec["comp1"]),
                comp2=float(rec["comp2"]),
                valid=float(rec["valid"]) if rec["valid"] else None,
                ppl=float(rec["ppl"]) if rec["ppl"] else None,
            ))
    return trace


def ensure_config_matches(init: ModelConfig, expected: ModelConfig) -> None:
    if init != expected:
        raise TrainError(
            f"checkpoint config does not match requested config:\n"
            f"  checkpoint: {init}\n  requested:  {expected}"
        )


# --- shared plumbing ---------------------------------------------------------


def _sgd_step(p: Parameters, lr: float) -> None:
    for t in p.tensors.values():
        if t.grad is not None:
            t.data -= (lr * t.grad).astype(t.data.dtype)


def _assert_finite_params(p: Parameters, step: int) -> None:
    for name, t in p.tensors.items():
        if not np.all(np.isfinite(t.data)):
            raise TrainError(f"non-finite values in {name} at step {step}")


def _context_budget(cfg: ModelConfig, response_len: int) -> int:
    # leave room for latent token, <bos>, response and <eos> target
    budget = cfg.max_seq_len - response_len - 3
    if budget < 1:
        raise TrainError(
            f"max_seq_len {cfg.max_seq_len} cannot fit a {response_len}-token response"
        )
    return budget


@dataclass
class _GenItem:
    context: EncodedSequence
    response: EncodedSequence
    targets: list[int]          # response ids + <eos>
    pair: EncodedSequence       # <bos> C R layout for the encoder


def _encode_generation_example(
    ex: TrainingExample, vocab: Vocab, cfg: ModelConfig
) -> _GenItem:
    if ex.response is None:
        raise TrainError(f"example of kind {ex.kind!r} lacks a response")
    resp = encode(vocab, [(ex.response.role, ex.response.text)],
                  max_len=cfg.max_seq_len // 2)
    ctx = encode(vocab, [(u.role, u.text) for u in ex.context],
                 max_len=_context_budget(cfg, len(resp)))
    if len(resp) == 0:
        raise TrainError("empty response after encoding")
    return _GenItem(
        context=ctx,
        response=resp,
        targets=list(resp.token_ids) + [EOS_ID],
        pair=build_pair_sequence(ctx, resp, cfg),
    )


def _encode_pair_example(
    ex: TrainingExample, vocab: Vocab, cfg: ModelConfig
) -> tuple[EncodedSequence, EncodedSequence, int]:
    # roles are pinned to A/B rather than inherited from the source nodes:
    # tree positives always alternate speakers while random negatives do not,
    # and an inherited role-parity feature would leak the label
    first, second = ex.context[0], ex.context[1]
    a = encode(vocab, [("A", first.text)], max_len=cfg.max_seq_len // 2 - 1)
    b = encode(vocab, [("B", second.text)], max_len=cfg.max_seq_len // 2 - 1)
    if ex.label not in (0, 1):
        raise TrainError(f"topic_pair example lacks a 0/1 label: {ex.label!r}")
    return a, b, ex.label


def _nll_for_item(p: Parameters, item: _GenItem,
                  z: int | None = None, latent_mix: Tensor | None = None) -> Tensor:
    out = generator_forward(p, item.context, item.response, z=z,
                            latent_mix=latent_mix)
    rows = T.rows(out.probs,
                  list(range(out.bos_position, out.bos_position + len(item.targets))))
    return nll_loss(rows, item.targets)


def _batch_mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for other in losses[1:]:
        total = total + other
    return (1.0 / len(losses)) * total


def _gumbel_argmax(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.uniform(1e-12, 1.0, size=probs.shape)
    return int(np.argmax(np.log(np.maximum(probs, 1e-12)) - np.log(-np.log(u))))


# --- stages ------------------------------------------------------------------


def train_stage1(
    plan: TrainPlan,
    params: Parameters,
    vocab: Vocab,
    data: list[TrainingExample],
    valid_data: list[TrainingExample] | None = None,
) -> tuple[Parameters, LossTrace]:
    """General response generation: summed next-token NLL, no latent."""
    if plan.stage != "stage1":
        raise TrainError(f"plan stage {plan.stage!r} is not stage1")
    if not data:
        raise TrainError("stage1 needs at least one training example")
    items = [_encode_generation_example(ex, vocab, params.config) for ex in data]
    valid_items = [_encode_generation_example(ex, vocab, params.config)
                   for ex in (valid_data or [])]

    rng = np.random.default_rng(plan.seed)
    trace = LossTrace(stage=plan.stage)
    for step in range(1, plan.step_count + 1):
        batch = [items[int(i)] for i in rng.integers(0, len(items), plan.batch_size)]
        params.zero_grad()
        losses = [_nll_for_item(params, item) for item in batch]
        loss = _batch_mean(losses)
        if not math.isfinite(float(loss.data)):
            raise TrainError(f"non-finite loss at step {step}")
        loss.backward()
        _sgd_step(params, plan.learning_rate)

        token_count = sum(len(item.targets) for item in batch)
        ppl = math.exp(sum(float(l.data) for l in losses) / token_count)
        valid = None
        if step % plan.eval_every == 0 or step == plan.step_count:
            _assert_finite_params(params, step)
            if valid_items:
                valid = _mean_nll(params, valid_items)
        trace.append(TraceRow(step=step, total=float(loss.data),
                              comp1=float(loss.data), comp2=0.0,
                              valid=valid, ppl=ppl))
    return params, trace


def _mean_nll(params: Parameters, items: list[_GenItem]) -> float:
    with T.no_grad():
        return float(np.mean([float(_nll_for_item(params, it).data) for it in items]))


def train_stage2_generation(
    plan: TrainPlan,
    params: Parameters,
    vocab: Vocab,
    data: list[TrainingExample],
    valid_data: list[TrainingExample] | None = None,
) -> tuple[Parameters, LossTrace]:
    """Diverse generation: latent-conditioned NLL plus bag-of-words loss.

    Per example: the posterior head reads the encoded (context, response)
    pair, a latent value is sampled from it (seeded Gumbel trick), and the
    sampled one-hot drives the generator through a straight-through mixture
    so the posterior receives gradient from both loss terms.
    """
    if plan.stage != "stage2_1":
        raise TrainError(f"plan stage {plan.stage!r} is not stage2_1")
    if not data:
        raise TrainError("stage2_1 needs at least one training example")
    items = [_encode_generation_example(ex, vocab, params.config) for ex in data]

    rng = np.random.default_rng(plan.seed)
    trace = LossTrace(stage=plan.stage)
    for step in range(1, plan.step_count + 1):
        batch = [items[int(i)] for i in rng.integers(0, len(items), plan.batch_size)]
        params.zero_grad()
        nll_parts: list[Tensor] = []
        bow_parts: list[Tensor] = []
        for item in batch:
            posterior = posterior_distribution(params, encoder_forward(params, item.pair))
            z = _gumbel_argmax(posterior.data[0], rng)
            hard = np.zeros_like(posterior.data)
            hard[0, z] = 1.0
            mix = T.straight_through(posterior, hard)
            nll_parts.append(_nll_for_item(params, item, latent_mix=mix))
            bow_parts.append(bow_loss(params, item.context, None,
                                      item.response.token_ids, latent_mix=mix))
        nll_mean = _batch_mean(nll_parts)
        bow_mean = _batch_mean(bow_parts)
        loss = nll_mean + bow_mean
        if not math.isfinite(float(loss.data)):
            raise TrainError(f"non-finite loss at step {step}")
        loss.backward()
        _sgd_step(params, plan.learning_rate)

        token_count = sum(len(item.targets) for item in batch)
        ppl = math.exp(sum(float(l.data) for l in nll_parts) / token_count)
        valid = None
        if step % plan.eval_every == 0 or step == plan.step_count:
            _assert_finite_params(params, step)
        comp1, comp2 = float(nll_mean.data), float(bow_mean.data)
        trace.append(TraceRow(step=step, total=comp1 + comp2,
                              comp1=comp1, comp2=comp2,
                              valid=valid, ppl=ppl))
    return params, trace


def train_stage2_selection(
    plan: TrainPlan,
    params: Parameters,
    vocab: Vocab,
    data: list[TrainingExample],
    valid_data: list[TrainingExample] | None = None,
) -> tuple[Parameters, LossTrace]:
    """Coherence selection: RCE on (C, R) vs in-batch swapped R̂, plus MLM."""
    if plan.stage != "stage2_2":
        raise TrainError(f"plan stage {plan.stage!r} is not stage2_2")
    if not data:
        raise TrainError("stage2_2 needs at least one training example")
    items = [_encode_generation_example(ex, vocab, params.config) for ex in data]
    distinct = {tuple(item.response.token_ids) for item in items}
    if len(distinct) < 2:
        raise TrainError("stage2_2 needs >= 2 distinct responses to draw negatives")

    rng = np.random.default_rng(plan.seed)
    trace = LossTrace(stage=plan.stage)
    for step in range(1, plan.step_count + 1):
        idx = [int(i) for i in rng.integers(0, len(items), plan.batch_size)]
        batch = [items[i] for i in idx]
        # swapped responses: rotate within the batch, re-draw from the full
        # corpus when the rotation lands on an identical response
        shift = int(rng.integers(1, max(2, len(batch))))
        negatives: list[EncodedSequence] = []
        for at, item in enumerate(batch):
            neg = batch[(at + shift) % len(batch)].response
            while tuple(neg.token_ids) == tuple(item.response.token_ids):
                neg = items[int(rng.integers(0, len(items)))].response
            negatives.append(neg)

        params.zero_grad()
        rce_parts = [
            rce_loss(params, item.context, item.response, neg)
            for item, neg in zip(batch, negatives)
        ]
        mlm_parts = [
            mlm_loss(params, item.pair, plan.mask_rate,
                     seed=plan.seed * 1_000_003 + step * 1_009 + at)
            for at, item in enumerate(batch)
        ]
        rce_mean = _batch_mean(rce_parts)
        mlm_mean = _batch_mean(mlm_parts)
        loss = rce_mean + mlm_mean
        if not math.isfinite(float(loss.data)):
            raise TrainError(f"non-finite loss at step {step}")
        loss.backward()
        _sgd_step(params, plan.learning_rate)
        if step % plan.eval_every == 0 or step == plan.step_count:
            _assert_finite_params(params, step)
        comp1, comp2 = float(rce_mean.data), float(mlm_mean.data)
        trace.append(TraceRow(step=step, total=comp1 + comp2,
                              comp1=comp1, comp2=comp2))
    return params, trace


def train_discriminator(
    plan: TrainPlan,
    params: Parameters,
    vocab: Vocab,
    data: list[TrainingExample],
    valid_data: list[TrainingExample] | None = None,
) -> tuple[Parameters, LossTrace]:
    """Topic discriminator: binary cross entropy over labeled utterance pairs."""
    if plan.stage != "discriminator":
        raise TrainError(f"plan stage {plan.stage!r} is not discriminator")
    if not data:
        raise TrainError("discriminator needs training pairs")
    pairs = [_encode_pair_example(ex, vocab, params.config) for ex in data]
    labels_present = {label for _, _, label in pairs}
    if labels_present != {0, 1}:
        raise TrainError(
            f"discriminator data must contain both classes, got labels {labels_present}"
        )
    valid_pairs = [_encode_pair_example(ex, vocab, params.config)
                   for ex in (valid_data or [])]

    rng = np.random.default_rng(plan.seed)
    trace = LossTrace(stage=plan.stage)
    for step in range(1, plan.step_count + 1):
        batch = [pairs[int(i)] for i in rng.integers(0, len(pairs), plan.batch_size)]
        params.zero_grad()
        probs = []
        labels = []
        for a, b, label in batch:
            seq = build_pair_sequence(a, b, params.config)
            prob = coherence_probability(params, encoder_forward(params, seq))
            probs.append(T.reshape(prob, (1,)))
            labels.append(label)
        loss = bce_loss(T.concat_rows(probs), labels)
        if not math.isfinite(float(loss.data)):
            raise TrainError(f"non-finite loss at step {step}")
        loss.backward()
        _sgd_step(params, plan.learning_rate)

        valid = None
        if step % plan.eval_every == 0 or step == plan.step_count:
            _assert_finite_params(params, step)
            if valid_pairs:
                valid = classification_accuracy(params, valid_pairs)
        trace.append(TraceRow(step=step, total=float(loss.data),
                              comp1=float(loss.data), comp2=0.0, valid=valid))
    return params, trace


def classification_accuracy(
    params: Parameters,
    pairs: list[tuple[EncodedSequence, EncodedSequence, int]],
    threshold: float = 0.5,
) -> float:
    with T.no_grad():
        hits = 0
        for a, b, label in pairs:
            seq = build_pair_sequence(a, b, params.config)
            prob = float(coherence_probability(params, encoder_forward(params, seq)).data)
            hits += int((prob > threshold) == bool(label))
    return hits / len(pairs)


TRAINERS = {
    "stage1": train_stage1,
    "stage2_1": train_stage2_generation,
    "stage2_2": train_stage2_selection,
    "discriminator": train_discriminator,
}
