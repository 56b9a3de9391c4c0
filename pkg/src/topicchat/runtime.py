"""Topic-switch chat engine.

Each turn: the discriminator scores how strongly the user input continues the
running context (β); if β falls at or below the threshold ε the context is
reset to just the new input and a fresh topic segment begins, otherwise the
input is appended. The generator then decodes one greedy candidate per latent
value and the selection model's coherence head picks the winner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .bpe import EOS_ID, EncodedSequence, Vocab, decode, encode, load_vocab
from .checkpoint import load_checkpoint
from .nn import Parameters, build_pair_sequence, coherence_probability, \
    encoder_forward, generator_forward
from .training import ensure_config_matches

DEFAULT_EPSILON = 0.61


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeParams:
    max_response_len: int = 16
    context_budget: int | None = None  # tokens kept from the context tail

    def __post_init__(self) -> None:
        if self.max_response_len < 1:
            raise InferenceError("max_response_len must be positive")


@dataclass
class ChatContext:
    turns: list[tuple[str, str]] = field(default_factory=list)  # (role, text)
    turn_counter: int = 0
    topic_segments: int = 1

    def next_role(self) -> str:
        if not self.turns:
            return "A"
        return "B" if self.turns[-1][0] == "A" else "A"


@dataclass(frozen=True)
class SwitchDecision:
    beta: float
    epsilon: float
    switched: bool
    degenerate: bool = False  # turn 0: no prior topic, switching suppressed


@dataclass
class CandidateResponse:
    z: int
    text: str
    coherence_score: float = 0.0


@dataclass
class ModelBundle:
    generator: Parameters
    selector: Parameters
    discriminator: Parameters
    vocab: Vocab


def load_models(gen_path: str, sel_path: str, disc_path: str,
                vocab_path: str) -> ModelBundle:
    bundle = ModelBundle(
        generator=load_checkpoint(gen_path),
        selector=load_checkpoint(sel_path),
        discriminator=load_checkpoint(disc_path),
        vocab=load_vocab(vocab_path),
    )
    ensure_config_matches(bundle.selector.config, bundle.generator.config)
    ensure_config_matches(bundle.discriminator.config, bundle.generator.config)
    return bundle


# --- discriminator ------------------------------------------------------------


def _encode_turns(vocab: Vocab, turns: list[tuple[str, str]],
                  budget: int) -> EncodedSequence:
    return encode(vocab, turns, max_len=budget)


def _budget(p: Parameters, decode_params: DecodeParams) -> int:
    if decode_params.context_budget is not None:
        return decode_params.context_budget
    # room for latent token, <bos> and a full response
    return max(1, p.config.max_seq_len - decode_params.max_response_len - 2)


def discriminator_score(
    disc: Parameters,
    vocab: Vocab,
    ctx: ChatContext,
    user_input: str,
    decode_params: DecodeParams = DecodeParams(),
) -> float:
    """β = probability that ``user_input`` continues the context's topic.

    The classifier trains on single-sentence pair sides with pinned A/B
    roles, so the running context is flattened into one role-A utterance and
    the input takes role B; a structured multi-turn side or conversation
    parity roles would be shapes it never saw.
    """
    budget = _budget(disc, decode_params)
    input_seq = _encode_turns(vocab, [("B", user_input)], budget)
    ctx_turns = [("A", " ".join(t for _, t in ctx.turns))] if ctx.turns else []
    ctx_seq = _encode_turns(vocab, ctx_turns,
                            max(1, disc.config.max_seq_len - len(input_seq) - 1))
    seq = build_pair_sequence(ctx_seq, input_seq, disc.config)
    with T.no_grad():
        beta = float(coherence_probability(disc, encoder_forward(disc, seq)).data)
    if not math.isfinite(beta):
        raise InferenceError(f"discriminator produced non-finite score {beta}")
    return beta


# --- Algorithm 1 --------------------------------------------------------------


def topic_switch_step(
    ctx: ChatContext,
    user_input: str,
    epsilon: float,
    beta: float,
) -> tuple[ChatContext, SwitchDecision]:
    """Apply the switch rule to a scored input.

    β ≤ ε resets the context to exactly the new input and opens a new topic
    segment; otherwise the input is appended. On the very first turn there is
    no previous topic to leave, so the decision is flagged degenerate and
    switching is suppressed (β is still reported).
    """
    if not 0.0 <= epsilon <= 1.0:
        raise InferenceError(f"epsilon must lie in [0, 1], got {epsilon}")
    role = ctx.next_role()
    if not ctx.turns:
        decision = SwitchDecision(beta=beta, epsilon=epsilon, switched=False,
                                  degenerate=True)
        new_ctx = ChatContext(turns=[(role, user_input)],
                              turn_counter=ctx.turn_counter + 1,
                              topic_segments=ctx.topic_segments)
        return new_ctx, decision

    switched = beta <= epsilon
    if switched:
        turns = [(role, user_input)]
        segments = ctx.topic_segments + 1
    else:
        turns = list(ctx.turns) + [(role, user_input)]
        segments = ctx.topic_segments
    decision = SwitchDecision(beta=beta, epsilon=epsilon, switched=switched)
    return ChatContext(turns=turns, turn_counter=ctx.turn_counter + 1,
                       topic_segments=segments), decision


# --- generation and selection --------------------------------------------------


def greedy_decode(
    gen: Parameters,
    vocab: Vocab,
    ctx_turns: list[tuple[str, str]],
    z: int,
    decode_params: DecodeParams = DecodeParams(),
) -> str:
    """Greedy latent-conditioned decode until <eos> or the length cap."""
    budget = _budget(gen, decode_params)
    ctx_seq = _encode_turns(vocab, list(ctx_turns), budget)
    resp_role = 0 if (ctx_seq.role_ids and ctx_seq.role_ids[-1] == 1) else 1

    generated: list[int] = []
    with T.no_grad():
        for _ in range(decode_params.max_response_len):
            prefix = EncodedSequence(
                token_ids=list(generated),
                role_ids=[resp_role] * len(generated),
                turn_ids=[0] * len(generated),
                position_ids=list(range(len(generated))),
            )
            out = generator_forward(gen, ctx_seq, prefix, z=z)
            dist = out.probs.data[-1].copy()
            dist[:vocab.special_count] = 0.0   # specials unreachable by decode
            dist[EOS_ID] = out.probs.data[-1][EOS_ID]
            next_id = int(np.argmax(dist))
            if next_id == EOS_ID:
                break
            generated.append(next_id)
    return decode(vocab, generated)


def generate_diverse(
    gen: Parameters,
    vocab: Vocab,
    ctx_turns: list[tuple[str, str]],
    K: int,
    decode_params: DecodeParams = DecodeParams(),
) -> list[CandidateResponse]:
    """One greedy candidate per latent value; empty generations are dropped."""
    if K < 1:
        raise InferenceError(f"K must be >= 1, got {K}")
    if K > gen.config.latent_count:
        raise InferenceError(
            f"K={K} exceeds the model's latent_count {gen.config.latent_count}"
        )
    candidates = [
        CandidateResponse(z=z, text=greedy_decode(gen, vocab, ctx_turns, z,
                                                  decode_params))
        for z in range(K)
    ]
    candidates = [c for c in candidates if c.text]
    if not candidates:
        raise InferenceError("all candidates decoded to empty text")
    return candidates


def argmax_candidate(candidates: list[CandidateResponse]) -> CandidateResponse:
    """Highest coherence score; exact ties go to the lowest z."""
    if not candidates:
        raise InferenceError("no candidates to select from")
    best = candidates[0]
    for c in candidates[1:]:
        if c.coherence_score > best.coherence_score or (
            c.coherence_score == best.coherence_score and c.z < best.z
        ):
            best = c
    return best


def select_response(
    sel: Parameters | None,
    vocab: Vocab | None,
    ctx_turns: list[tuple[str, str]],
    candidates: list[CandidateResponse],
    decode_params: DecodeParams = DecodeParams(),
) -> CandidateResponse:
    """Score candidates with the coherence head and return the argmax.

    With ``sel=None`` the already-present ``coherence_score`` values are
    trusted (score-injection path for tests and replay).
    """
    if not candidates:
        raise InferenceError("no candidates to select from")
    if sel is not None:
        budget = _budget(sel, decode_params)
        ctx_seq = _encode_turns(vocab, list(ctx_turns), budget)
        resp_role = "A" if (ctx_turns and ctx_turns[-1][0] == "B") else "B"
        with T.no_grad():
            for c in candidates:
                resp_seq = _encode_turns(vocab, [(resp_role, c.text)],
                                         decode_params.max_response_len)
                seq = build_pair_sequence(ctx_seq, resp_seq, sel.config)
                enc = encoder_forward(sel, seq)
                c.coherence_score = float(coherence_probability(sel, enc).data)
    return argmax_candidate(candidates)


# --- full turn -----------------------------------------------------------------


@dataclass
class ChatTurnResult:
    response: str
    decision: SwitchDecision | None
    candidates: list[CandidateResponse]
    ctx: ChatContext


def chat_turn(
    models: ModelBundle,
    ctx: ChatContext,
    user_input: str,
    epsilon: float = DEFAULT_EPSILON,
    K: int = 5,
    decode_params: DecodeParams = DecodeParams(),
    switch_enabled: bool = True,
) -> ChatTurnResult:
    """Score, maybe switch, generate K candidates, select, extend context."""
    if not user_input:
        raise InferenceError("user input must be non-empty")
    beta = discriminator_score(models.discriminator, models.vocab, ctx,
                               user_input, decode_params)
    if switch_enabled:
        new_ctx, decision = topic_switch_step(ctx, user_input, epsilon, beta)
    else:
        role = ctx.next_role()
        new_ctx = ChatContext(turns=list(ctx.turns) + [(role, user_input)],
                              turn_counter=ctx.turn_counter + 1,
                              topic_segments=ctx.topic_segments)
        decision = None

    candidates = generate_diverse(models.generator, models.vocab,
                                  new_ctx.turns, K, decode_params)
    best = select_response(models.selector, models.vocab, new_ctx.turns,
                           candidates, decode_params)
    bot_role = new_ctx.next_role()
    final_ctx = replace(new_ctx, turns=list(new_ctx.turns) + [(bot_role, best.text)])
    return ChatTurnResult(response=best.text, decision=decision,
                          candidates=candidates, ctx=final_ctx)


# --- threshold calibration ------------------------------------------------------


@dataclass(frozen=True)
class CalibrationPoint:
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass
class CalibrationResult:
    points: list[CalibrationPoint]
    epsilon: float


def calibration_curve(scores: list[float], labels: list[int]) -> CalibrationResult:
    """Sweep thresholds over the observed scores; pick ε at the best-F1 band.

    Predicted same-topic iff score > threshold (the switch rule's complement).
    The chosen ε is the midpoint of the contiguous threshold band achieving
    maximal F1, extended to the next distinct score above it, so ε sits well
    inside the optimal region rather than on its edge.
    """
    if len(scores) != len(labels):
        raise InferenceError("scores and labels differ in length")
    if set(labels) != {0, 1}:
        raise InferenceError(f"need both classes to calibrate, got {set(labels)}")

    uniq = sorted(set(scores))
    thresholds = [0.0] + [s for s in uniq if s > 0.0]
    points: list[CalibrationPoint] = []
    for th in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s > th and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s > th and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s <= th and y == 1)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        points.append(CalibrationPoint(th, precision, recall, f1))

    best = max(p.f1 for p in points)
    start = next(i for i, p in enumerate(points) if p.f1 == best)
    end = start
    while end + 1 < len(points) and points[end + 1].f1 == best:
        end += 1
    upper = points[end + 1].threshold if end + 1 < len(points) else 1.0
    epsilon = (points[start].threshold + upper) / 2.0
    return CalibrationResult(points=points, epsilon=epsilon)


def calibrate_threshold(
    disc: Parameters,
    vocab: Vocab,
    labeled_pairs: list[tuple[str, str, int]],
    decode_params: DecodeParams = DecodeParams(),
) -> CalibrationResult:
    """Score labeled (first, second, label) utterance pairs, then sweep."""
    scores: list[float] = []
    labels: list[int] = []
    for first, second, label in labeled_pairs:
        ctx = ChatContext(turns=[("A", first)], turn_counter=1)
        scores.append(discriminator_score(disc, vocab, ctx, second,
                                          decode_params))
        labels.append(int(label))
    return calibration_curve(scores, labels)


def save_calibration_csv(result: CalibrationResult, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,precision,recall,f1\n")
        for p in result.points:
            fh.write(f"{p.threshold!r},{p.precision!r},{p.recall!r},{p.f1!r}\n")
        fh.write(f"# chosen_epsilon={result.epsilon!r}\n")
