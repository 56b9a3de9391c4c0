#!/usr/bin/env python3
"""Train the full system on a synthetic corpus and demo the switch behaviour.

End to end: corpus -> tokenizer -> generator (two-stage curriculum) ->
selector -> discriminator -> threshold calibration -> held-out quality ->
a scripted chat that crosses topics -> self-chat reports with and without
switching. Runs in about two minutes at the default sizes; --quick cuts the
step counts by 10x for a smoke run.

Artifacts (checkpoints, vocab, calibration curve, reports) land in --out-dir.
"""

import argparse
import json
import time
from pathlib import Path

from topicchat.bpe import save_vocab, train_bpe
from topicchat.checkpoint import save_checkpoint
from topicchat.evalsuite import build_report, save_report, self_chat, side_by_side
from topicchat.graph import (
    SplitSpec,
    extract_discriminator_pairs,
    extract_one_to_many,
    extract_one_to_one,
    split_dataset,
)
from topicchat.nn import ModelConfig, init_parameters
from topicchat.runtime import (
    ChatContext,
    ModelBundle,
    calibrate_threshold,
    chat_turn,
    discriminator_score,
    save_calibration_csv,
)
from topicchat.synthetic import make_corpus
from topicchat.training import TRAINERS, TrainPlan


def train(stage: str, params, vocab, data, steps: int, lr: float,
          seed: int = 0, valid=None):
    plan = TrainPlan(stage=stage, batch_size=16, learning_rate=lr,
                     step_count=steps, seed=seed,
                     eval_every=max(1, steps // 4))
    started = time.perf_counter()
    if valid is not None:
        params, trace = TRAINERS[stage](plan, params, vocab, data,
                                        valid_data=valid)
    else:
        params, trace = TRAINERS[stage](plan, params, vocab, data)
    last = trace.rows[-1]
    print(f"  {stage}: {steps} steps in {time.perf_counter() - started:.1f}s, "
          f"loss {trace.rows[0].total:.3f} -> {last.total:.3f}")
    return params, trace


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--topics", type=int, default=2)
    parser.add_argument("--chains", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--out-dir", default="runs/pipeline")
    parser.add_argument("--quick", action="store_true",
                        help="10x fewer steps; expect worse quality")
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scale = 10 if args.quick else 1

    print("== corpus ==")
    corpus = make_corpus(n_topics=args.topics, chains_per_topic=args.chains,
                         depth=8, seed=args.seed)
    o2o = extract_one_to_one(corpus)
    o2m = extract_one_to_many(corpus)
    pairs = extract_discriminator_pairs(corpus, negative_ratio=1.0, seed=1)
    train_pairs, valid_pairs, test_pairs = split_dataset(
        pairs, SplitSpec(0.7, 0.15, 0.15, seed=2))
    print(f"  {len(corpus.nodes)} utterances, {len(o2o)} adjacent pairs, "
          f"{len(o2m)} dialogue paths, {len(pairs)} labeled pairs")

    texts = [n.text for n in corpus.nodes.values()]
    vocab = train_bpe(texts, 364, latent_count=args.k)
    save_vocab(vocab, str(out / "vocab.txt"))
    config = ModelConfig(vocab_size=len(vocab.pieces), max_seq_len=48,
                         position_table_size=48, hidden_dim=32, ffn_dim=64,
                         layer_count=1, head_count=2, latent_count=args.k,
                         turn_count=8)

    print("== generator (two-stage curriculum) ==")
    gen = init_parameters(config)
    gen, _ = train("stage1", gen, vocab, o2o, 800 // scale, 0.05)
    gen, _ = train("stage2_1", gen, vocab, o2m, 600 // scale, 0.05)
    save_checkpoint(gen, str(out / "gen"))

    print("== selector ==")
    sel = init_parameters(config)
    sel, _ = train("stage2_2", sel, vocab, o2o, 600 // scale, 0.1)
    save_checkpoint(sel, str(out / "sel"))

    print("== discriminator ==")
    disc = init_parameters(config)
    disc, _ = train("discriminator", disc, vocab, train_pairs, 2000 // scale,
                    0.1, seed=1, valid=valid_pairs)
    save_checkpoint(disc, str(out / "disc"))

    print("== calibration ==")
    labeled = [(ex.context[0].text, ex.context[1].text, ex.label)
               for ex in valid_pairs]
    calibration = calibrate_threshold(disc, vocab, labeled)
    save_calibration_csv(calibration, str(out / "curve.csv"))
    epsilon = calibration.epsilon
    print(f"  epsilon = {epsilon:.4f} over {len(calibration.points)} thresholds")

    scores, labels = [], []
    for ex in test_pairs:
        ctx = ChatContext(turns=[("A", ex.context[0].text)], turn_counter=1)
        scores.append(discriminator_score(disc, vocab, ctx, ex.context[1].text))
        labels.append(ex.label)
    tp = sum(1 for s, y in zip(scores, labels) if s > epsilon and y == 1)
    fp = sum(1 for s, y in zip(scores, labels) if s > epsilon and y == 0)
    fn = sum(1 for s, y in zip(scores, labels) if s <= epsilon and y == 1)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    print(f"  held-out precision {precision:.3f}, recall {recall:.3f} "
          f"({len(test_pairs)} pairs)")

    print("== scripted chat (stay, stay, jump) ==")
    models = ModelBundle(generator=gen, selector=sel, discriminator=disc,
                         vocab=vocab)
    script = [corpus.nodes["0-0-0"].text, corpus.nodes["0-1-0"].text,
              corpus.nodes["1-0-0"].text]
    ctx = ChatContext()
    for line in script:
        result = chat_turn(models, ctx, line, epsilon=epsilon, K=args.k)
        d = result.decision
        flag = "SWITCH" if d.switched else ("first" if d.degenerate else "stay")
        print(f"  you> {line}")
        print(f"  bot ({d.beta:.3f}, {flag})> {result.response}")
        ctx = result.ctx

    print("== self-chat reports ==")
    seeds = [corpus.nodes[f"{t}-0-0"].text for t in range(args.topics)]
    reports = []
    for enabled in (True, False):
        run = self_chat(models, seeds, turns=5, epsilon=epsilon, K=args.k,
                        switch_enabled=enabled)
        reports.append(build_report(run, vocab))
    save_report(side_by_side(reports), str(out / "report.json"))
    for rep in reports:
        print(f"  {rep.variant}: distinct1={rep.distinct1:.3f} "
              f"distinct2={rep.distinct2:.3f} avg_topics={rep.avg_topics:.2f}")

    print(f"artifacts in {out}/")
    print(json.dumps({"epsilon": epsilon, "precision": precision,
                      "recall": recall}, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
