"""Bot-bot self-chat simulation, diversity metrics and rating aggregation.

A self-chat run seeds a dialogue with a question and then feeds each bot
response back in as the next input, alternating roles, recording the switch
decision at every turn. Reports aggregate lexical diversity (distinct-1/2),
average response length in tokens, average topic count per transcript and,
when available, mean human ratings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

from .bpe import Vocab
from .runtime import ChatContext, DecodeParams, ModelBundle, chat_turn

RATING_METRICS = ("coherence", "informativeness", "engagingness", "humanness")


class EvalError(ValueError):
    pass


# --- metrics -------------------------------------------------------------------


def distinct_n(token_lists: list[list], n: int) -> float:
    """Unique n-gram count over all lists, scaled by the total token count."""
    if n < 1:
        raise EvalError(f"n must be >= 1, got {n}")
    total_tokens = sum(len(tokens) for tokens in token_lists)
    if total_tokens == 0:
        return 0.0
    grams = {
        tuple(tokens[i:i + n])
        for tokens in token_lists
        for i in range(len(tokens) - n + 1)
    }
    return len(grams) / total_tokens


# --- self-chat -----------------------------------------------------------------


@dataclass
class TurnRecord:
    user_text: str
    bot_text: str
    switched: bool
    beta: float | None
    degenerate: bool = False


@dataclass
class Transcript:
    seed: str
    turns: list[TurnRecord] = field(default_factory=list)
    error: str | None = None


@dataclass
class SelfChatRun:
    seed_questions: list[str]
    turns_per_dialogue: int
    epsilon: float
    k: int
    switch_enabled: bool
    transcripts: list[Transcript] = field(default_factory=list)


def self_chat(
    models: ModelBundle,
    seeds: list[str],
    turns: int,
    epsilon: float,
    K: int,
    switch_enabled: bool = True,
    decode_params: DecodeParams = DecodeParams(),
) -> SelfChatRun:
    """Bot-bot simulation: the response to each turn becomes the next input."""
    run = SelfChatRun(seed_questions=list(seeds), turns_per_dialogue=turns,
                      epsilon=epsilon, k=K, switch_enabled=switch_enabled)
    for seed in seeds:
        transcript = Transcript(seed=seed)
        ctx = ChatContext()
        message = seed
        try:
            for _ in range(turns):
                result = chat_turn(models, ctx, message, epsilon=epsilon, K=K,
                                   decode_params=decode_params,
                                   switch_enabled=switch_enabled)
                decision = result.decision
                transcript.turns.append(TurnRecord(
                    user_text=message,
                    bot_text=result.response,
                    switched=bool(decision.switched) if decision else False,
                    beta=decision.beta if decision else None,
                    degenerate=decision.degenerate if decision else False,
                ))
                ctx = result.ctx
                message = result.response
        except Exception as exc:  # a broken seed must not sink the run
            transcript.error = f"{type(exc).__name__}: {exc}"
        run.transcripts.append(transcript)
    return run


def count_topics(transcript: Transcript) -> int:
    """One initial topic plus one per switch event."""
    return 1 + sum(1 for t in transcript.turns if t.switched)


# --- ratings ---------------------------------------------------------------------


def validate_rating(record: dict) -> dict:
    clean = {}
    for metric in RATING_METRICS:
        if metric not in record:
            raise EvalError(f"rating record missing {metric!r}")
        value = int(record[metric])
        if value not in (0, 1, 2):
            raise EvalError(f"{metric} rating {value} outside {{0, 1, 2}}")
        clean[metric] = value
    return clean


def aggregate_ratings(records: list[dict]) -> dict[str, float]:
    """Per-metric means plus the overall average of the four means."""
    if not records:
        raise EvalError("no rating records to aggregate")
    clean = [validate_rating(r) for r in records]
    means = {
        metric: sum(r[metric] for r in clean) / len(clean)
        for metric in RATING_METRICS
    }
    means["average"] = sum(means[m] for m in RATING_METRICS) / len(RATING_METRICS)
    return means


def load_ratings_csv(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            records.append({"session_id": rec.get("session_id", ""),
                            **validate_rating(rec)})
    return records


def save_ratings_csv(records: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session_id", *RATING_METRICS])
        for rec in records:
            writer.writerow([rec.get("session_id", ""),
                             *(rec[m] for m in RATING_METRICS)])


# --- reports --------------------------------------------------------------------


@dataclass
class EvalReport:
    variant: str
    distinct1: float
    distinct2: float
    avg_length: float        # tokens per bot response
    avg_topics: float
    transcript_count: int
    response_count: int
    rating_means: dict[str, float] | None = None


def build_report(
    run: SelfChatRun,
    vocab: Vocab,
    ratings: list[dict] | None = None,
    variant: str | None = None,
) -> EvalReport:
    """Aggregate a finished run; metrics cover bot responses only."""
    completed = [t for t in run.transcripts if t.error is None]
    responses = [turn.bot_text for t in completed for turn in t.turns]
    token_lists = [vocab.encode_text(text) for text in responses]
    total_tokens = sum(len(ids) for ids in token_lists)
    if variant is None:
        variant = "with-switch" if run.switch_enabled else "without-switch"
    return EvalReport(
        variant=variant,
        distinct1=distinct_n(token_lists, 1),
        distinct2=distinct_n(token_lists, 2),
        avg_length=(total_tokens / len(token_lists)) if token_lists else 0.0,
        avg_topics=(sum(count_topics(t) for t in completed) / len(completed))
        if completed else 0.0,
        transcript_count=len(run.transcripts),
        response_count=len(responses),
        rating_means=aggregate_ratings(ratings) if ratings else None,
    )


def side_by_side(reports: list[EvalReport]) -> dict:
    """Paired-variant table: one column per report, keyed by variant label."""
    return {"variants": [asdict(r) for r in reports]}


# --- (de)serialization ------------------------------------------------------------


def save_run(run: SelfChatRun, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(run), fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_run(path: str) -> SelfChatRun:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    run = SelfChatRun(
        seed_questions=raw["seed_questions"],
        turns_per_dialogue=raw["turns_per_dialogue"],
        epsilon=raw["epsilon"],
        k=raw["k"],
        switch_enabled=raw["switch_enabled"],
    )
    for t in raw["transcripts"]:
        run.transcripts.append(Transcript(
            seed=t["seed"],
            turns=[TurnRecord(**turn) for turn in t["turns"]],
            error=t.get("error"),
        ))
    return run


def save_report(report: dict | EvalReport, path: str) -> None:
    payload = asdict(report) if isinstance(report, EvalReport) else report
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=1)
        fh.write("\n")
