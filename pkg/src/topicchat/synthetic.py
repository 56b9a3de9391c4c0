"""Synthetic dialogue corpora with disjoint per-topic vocabularies.

Each topic draws every word from its own inventory, so topic membership of
any utterance is decidable from surface text alone. That separability gives
training fixtures where pair discrimination and switch behaviour have a known
right answer.
"""

from __future__ import annotations

import random

from .graph import DialogueGraph, DialogueNode

# Inventories share no words across topics; keep them alphabetic and lowercase
# so byte-level tokenization stays simple.
TOPIC_INVENTORIES: list[list[str]] = [
    ["red", "ruby", "crimson", "scarlet", "rust", "ember", "flame", "cherry"],
    ["blue", "navy", "azure", "cobalt", "teal", "sky", "ocean", "wave"],
    ["green", "moss", "fern", "jade", "leaf", "olive", "pine", "mint"],
    ["gold", "amber", "honey", "brass", "sun", "wheat", "dune", "sand"],
    ["violet", "plum", "orchid", "iris", "lilac", "mauve", "grape", "dusk"],
]


class SyntheticError(ValueError):
    pass


def topic_sentence(rng: random.Random, topic_id: int, words: int = 3) -> str:
    inventory = TOPIC_INVENTORIES[topic_id % len(TOPIC_INVENTORIES)]
    return " ".join(rng.choice(inventory) for _ in range(words))


def make_corpus(
    n_topics: int = 2,
    chains_per_topic: int = 4,
    depth: int = 8,
    seed: int = 0,
    words_per_turn: int = 3,
) -> DialogueGraph:
    """One branching dialogue tree per topic, every turn in its inventory.

    Each tree grows from `chains_per_topic` root-to-leaf walks of random
    length in [1, depth]. A walk follows an existing child about half the
    time and forks a fresh one otherwise, always forking at its final step,
    so trees share prefixes but end in distinct leaves. That yields
    one-to-many paths with varied context lengths (down to a single turn)
    and genuine sibling candidates under one context.
    """
    if n_topics < 1:
        raise SyntheticError(f"need at least 1 topic, got {n_topics}")
    if n_topics > len(TOPIC_INVENTORIES):
        raise SyntheticError(
            f"at most {len(TOPIC_INVENTORIES)} disjoint topics available, "
            f"got {n_topics}")
    if depth < 1:
        raise SyntheticError(f"depth must be >= 1, got {depth}")
    rng = random.Random(seed)
    nodes: dict[str, DialogueNode] = {}
    for topic in range(n_topics):
        root = DialogueNode(
            topic_id=topic, depth=0, candidate_index=0, parent_id=None,
            role="A", text=topic_sentence(rng, topic, words_per_turn))
        nodes[root.node_id] = root
        children: dict[str, list[DialogueNode]] = {root.node_id: []}
        next_index: dict[int, int] = {}  # depth -> next free candidate slot
        for _ in range(chains_per_topic):
            walk_len = rng.randint(1, depth)
            parent = root
            for level in range(1, walk_len + 1):
                existing = children[parent.node_id]
                if existing and level < walk_len and rng.random() < 0.5:
                    parent = rng.choice(existing)
                    continue
                slot = next_index.get(level, 0)
                next_index[level] = slot + 1
                node = DialogueNode(
                    topic_id=topic,
                    depth=level,
                    candidate_index=slot,
                    parent_id=parent.node_id,
                    role="B" if level % 2 == 1 else "A",
                    text=topic_sentence(rng, topic, words_per_turn))
                nodes[node.node_id] = node
                children[node.node_id] = []
                existing.append(node)
                parent = node
    return DialogueGraph(nodes=nodes)


def inventory_words(topic_id: int) -> set[str]:
    return set(TOPIC_INVENTORIES[topic_id % len(TOPIC_INVENTORIES)])


def text_topic(text: str) -> int | None:
    """Topic whose inventory covers every word of `text`, if one exists."""
    words = set(text.split())
    if not words:
        return None
    for topic_id, inventory in enumerate(TOPIC_INVENTORIES):
        if words <= set(inventory):
            return topic_id
    return None
