#!/usr/bin/env python3
"""Generate a synthetic topic-disjoint dialogue corpus and its training sets.

Writes graph.json (the dialogue forest), corpus.txt (one utterance per line,
handy for tokenizer training) and the three extracted example files the
trainers consume. Topic inventories are disjoint word sets, so discriminator
quality and switch behaviour can be judged by eye.
"""

import argparse
import json
from pathlib import Path

from topicchat.graph import (
    extract_discriminator_pairs,
    extract_one_to_many,
    extract_one_to_one,
    save_examples,
    save_graph,
)
from topicchat.synthetic import TOPIC_INVENTORIES, make_corpus


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--topics", type=int, default=2)
    parser.add_argument("--chains", type=int, default=50,
                        help="root-to-leaf walks grown per topic tree")
    parser.add_argument("--depth", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--words-per-turn", type=int, default=3)
    parser.add_argument("--negative-ratio", type=float, default=1.0)
    parser.add_argument("--out-dir", default="runs/corpus")
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    corpus = make_corpus(n_topics=args.topics, chains_per_topic=args.chains,
                         depth=args.depth, seed=args.seed,
                         words_per_turn=args.words_per_turn)
    save_graph(corpus, str(out / "graph.json"))
    texts = [corpus.nodes[k].text for k in sorted(corpus.nodes)]
    (out / "corpus.txt").write_text("\n".join(texts) + "\n", encoding="utf-8")

    sets = {
        "one_to_one": extract_one_to_one(corpus),
        "one_to_many": extract_one_to_many(corpus),
        "pairs": extract_discriminator_pairs(
            corpus, negative_ratio=args.negative_ratio, seed=args.seed),
    }
    for name, examples in sets.items():
        save_examples(examples, str(out / f"{name}.jsonl"))

    summary = {
        "nodes": len(corpus.nodes),
        "topics": args.topics,
        **{name: len(examples) for name, examples in sets.items()},
        "inventories": {t: sorted(TOPIC_INVENTORIES[t])
                        for t in range(args.topics)},
    }
    print(json.dumps(summary, indent=1))
    print(f"corpus written to {out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
