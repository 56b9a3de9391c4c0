"""Tree-structured dialogue corpus: loading, validation, extraction, splits.

The corpus is a forest of topic-rooted utterance trees. Node ids encode
(topic, depth, candidate) as "t-i-j"; each non-root node points at a parent
one level up. Three extractions feed the training stages: adjacent utterance
pairs (breadth-first), full root-to-leaf paths (depth-first), and labeled
same-topic / cross-topic utterance pairs for the discriminator.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bpe import Vocab

DEFAULT_MAX_DEPTH = 8
MIN_CANDIDATE_FANOUT = 3  # corpus-collection convention, reported as a warning only


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    role: str  # "A" | "B"
    text: str


@dataclass(frozen=True)
class DialogueNode:
    topic_id: int
    depth: int
    candidate_index: int
    parent_id: str | None
    role: str
    text: str

    @property
    def node_id(self) -> str:
        return f"{self.topic_id}-{self.depth}-{self.candidate_index}"

    @property
    def utterance(self) -> Utterance:
        return Utterance(self.role, self.text)


@dataclass
class DialogueGraph:
    """Immutable after construction; extraction functions are pure."""

    nodes: dict[str, DialogueNode]
    max_depth: int = DEFAULT_MAX_DEPTH
    children: dict[str, list[str]] = field(init=False, repr=False)
    roots: list[str] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.children = {nid: [] for nid in self.nodes}
        self.roots = []
        for node in self.nodes.values():
            if node.parent_id is None:
                self.roots.append(node.node_id)
            elif node.parent_id in self.children:
                self.children[node.parent_id].append(node.node_id)
        order = lambda nid: (self.nodes[nid].depth, self.nodes[nid].candidate_index)
        for kids in self.children.values():
            kids.sort(key=order)
        self.roots.sort(key=lambda nid: (self.nodes[nid].topic_id,
                                         self.nodes[nid].candidate_index))

    @property
    def topic_count(self) -> int:
        return len({n.topic_id for n in self.nodes.values()})

    def topic_ids(self) -> list[int]:
        return sorted({n.topic_id for n in self.nodes.values()})

    def root_of(self, node_id: str) -> str:
        nid = node_id
        while self.nodes[nid].parent_id is not None:
            nid = self.nodes[nid].parent_id
        return nid


@dataclass(frozen=True)
class TrainingExample:
    kind: str  # one_to_one | one_to_many | topic_pair
    context: tuple[Utterance, ...]
    response: Utterance | None
    topic_ids: tuple[int, ...]
    label: int | None = None
    group: str = ""


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.90
    valid_fraction: float = 0.05
    test_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        fractions = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if any(not 0.0 < f < 1.0 for f in fractions):
            raise GraphError(f"split fractions must lie in (0, 1): {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise GraphError(f"split fractions must sum to 1: {fractions}")


# --- corpus file -------------------------------------------------------------
#
# UTF-8 line-delimited JSON, one node per line:
#   {"topic_id": int, "node_id": "t-i-j", "parent_id": str|null,
#    "role": "A"|"B", "text": str}


def _parse_node_id(node_id: str, lineno: int) -> tuple[int, int, int]:
    parts = node_id.split("-")
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise GraphError(f"line {lineno}: node_id {node_id!r} is not 't-i-j'")
    return int(parts[0]), int(parts[1]), int(parts[2])


def load_graph(path: str, max_depth: int = DEFAULT_MAX_DEPTH) -> DialogueGraph:
    """Load and structurally validate a corpus file.

    Raises ``GraphError`` (with the offending line number) on malformed
    records, duplicate (t, i, j) keys, dangling parent references and cycles.
    Soft invariants (role alternation, depth bounds) are the business of
    :func:`validate_graph` so that damaged graphs can still be inspected.
    """
    nodes: dict[str, DialogueNode] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            missing = {"topic_id", "node_id", "parent_id", "role", "text"} - rec.keys()
            if missing:
                raise GraphError(f"line {lineno}: missing fields {sorted(missing)}")
            topic, depth, cand = _parse_node_id(rec["node_id"], lineno)
            if rec["topic_id"] != topic:
                raise GraphError(
                    f"line {lineno}: topic_id {rec['topic_id']} disagrees with "
                    f"node_id {rec['node_id']!r}"
                )
            if rec["role"] not in ("A", "B"):
                raise GraphError(f"line {lineno}: role must be 'A' or 'B'")
            node = DialogueNode(
                topic_id=topic,
                depth=depth,
                candidate_index=cand,
                parent_id=rec["parent_id"],
                role=rec["role"],
                text=rec["text"],
            )
            if node.node_id in nodes:
                raise GraphError(f"line {lineno}: duplicate node_id {node.node_id!r}")
            nodes[node.node_id] = node

    for node in nodes.values():
        if node.parent_id is not None and node.parent_id not in nodes:
            raise GraphError(
                f"node {node.node_id}: dangling parent reference {node.parent_id!r}"
            )
    _check_acyclic(nodes)
    return DialogueGraph(nodes=nodes, max_depth=max_depth)


def _check_acyclic(nodes: dict[str, DialogueNode]) -> None:
    state: dict[str, int] = {}  # 1 = on current chain, 2 = cleared
    for start in nodes:
        nid, chain = start, []
        while nid is not None and state.get(nid, 0) != 2:
            if state.get(nid) == 1:
                raise GraphError(f"cycle detected through node {nid}")
            state[nid] = 1
            chain.append(nid)
            nid = nodes[nid].parent_id
        for seen in chain:
            state[seen] = 2


def save_graph(graph: DialogueGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nid in sorted(graph.nodes, key=lambda n: _sort_key(graph.nodes[n])):
            node = graph.nodes[nid]
            fh.write(json.dumps({
                "topic_id": node.topic_id,
                "node_id": node.node_id,
                "parent_id": node.parent_id,
                "role": node.role,
                "text": node.text,
            }, ensure_ascii=False) + "\n")


def _sort_key(node: DialogueNode) -> tuple[int, int, int]:
    return (node.topic_id, node.depth, node.candidate_index)


# --- validation --------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_graph(graph: DialogueGraph) -> ValidationReport:
    """Check every node/graph invariant; violations are report entries."""
    report = ValidationReport()
    fanout: Counter[str] = Counter()
    for node in graph.nodes.values():
        nid = node.node_id
        if not node.text:
            report.violations.append(f"{nid}: empty text")
        if node.depth > graph.max_depth:
            report.violations.append(
                f"{nid}: depth {node.depth} exceeds max_depth {graph.max_depth}"
            )
        if node.depth == 0:
            if node.parent_id is not None:
                report.violations.append(f"{nid}: root node has a parent")
            continue
        if node.parent_id is None:
            report.violations.append(f"{nid}: non-root node without parent")
            continue
        parent = graph.nodes.get(node.parent_id)
        if parent is None:
            report.violations.append(f"{nid}: dangling parent {node.parent_id!r}")
            continue
        fanout[parent.node_id] += 1
        if parent.depth != node.depth - 1:
            report.violations.append(
                f"{nid}: parent {parent.node_id} is at depth {parent.depth}, "
                f"expected {node.depth - 1}"
            )
        if parent.topic_id != node.topic_id:
            report.violations.append(
                f"{nid}: crosses topics ({parent.topic_id} -> {node.topic_id})"
            )
        if parent.role == node.role:
            report.violations.append(
                f"{nid}: role {node.role} does not alternate with parent"
            )
    for pid, count in sorted(fanout.items()):
        if count < MIN_CANDIDATE_FANOUT:
            report.warnings.append(
                f"{pid}: only {count} candidate children (corpus convention is "
                f">= {MIN_CANDIDATE_FANOUT})"
            )
    return report


# --- training-data extraction ------------------------------------------------


def _tree_key(graph: DialogueGraph, node_id: str) -> str:
    return f"tree:{graph.root_of(node_id)}"


def extract_one_to_one(graph: DialogueGraph) -> list[TrainingExample]:
    """One (parent -> child) pair per edge, in breadth-first emission order."""
    edges = [
        (graph.nodes[node.parent_id], node)
        for node in graph.nodes.values()
        if node.parent_id is not None
    ]
    edges.sort(key=lambda e: (e[1].depth, e[1].candidate_index, e[1].topic_id))
    return [
        TrainingExample(
            kind="one_to_one",
            context=(parent.utterance,),
            response=child.utterance,
            topic_ids=(child.topic_id,),
            group=_tree_key(graph, child.node_id),
        )
        for parent, child in edges
    ]


def _paths_from(graph: DialogueGraph, node_id: str) -> Iterable[list[str]]:
    kids = graph.children[node_id]
    if not kids:
        yield [node_id]
        return
    for kid in kids:
        for tail in _paths_from(graph, kid):
            yield [node_id] + tail


def extract_one_to_many(graph: DialogueGraph) -> list[TrainingExample]:
    """One example per root-to-maximal-leaf path, in depth-first order."""
    examples = []
    for root in graph.roots:
        for path in _paths_from(graph, root):
            utts = [graph.nodes[nid].utterance for nid in path]
            if len(utts) < 2:
                continue  # a bare root has no response to learn
            examples.append(TrainingExample(
                kind="one_to_many",
                context=tuple(utts[:-1]),
                response=utts[-1],
                topic_ids=(graph.nodes[path[0]].topic_id,),
                group=_tree_key(graph, root),
            ))
    return examples


def extract_discriminator_pairs(
    graph: DialogueGraph,
    negative_ratio: float = 1.0,
    seed: int = 0,
) -> list[TrainingExample]:
    """Labeled utterance pairs: intra-topic turns (1) vs cross-topic draws (0).

    Positives are every parent -> child turn. Negatives pair uniformly drawn
    utterances from two distinct topics; their count is
    ``round(negative_ratio * positives)`` and the draw is seed-deterministic.
    """
    topics = graph.topic_ids()
    if len(topics) < 2:
        raise GraphError("need at least 2 topics to form negative pairs")

    examples: list[TrainingExample] = []
    for idx, ex in enumerate(extract_one_to_one(graph)):
        examples.append(TrainingExample(
            kind="topic_pair",
            context=(ex.context[0], ex.response),
            response=None,
            topic_ids=(ex.topic_ids[0], ex.topic_ids[0]),
            label=1,
            group=f"pair:pos:{idx}",
        ))

    by_topic: dict[int, list[DialogueNode]] = {t: [] for t in topics}
    for nid in sorted(graph.nodes, key=lambda n: _sort_key(graph.nodes[n])):
        node = graph.nodes[nid]
        by_topic[node.topic_id].append(node)

    rng = np.random.default_rng(seed)
    negative_count = round(negative_ratio * len(examples))
    for idx in range(negative_count):
        t1, t2 = rng.choice(topics, size=2, replace=False)
        a = by_topic[int(t1)][int(rng.integers(len(by_topic[int(t1)])))]
        b = by_topic[int(t2)][int(rng.integers(len(by_topic[int(t2)])))]
        examples.append(TrainingExample(
            kind="topic_pair",
            context=(a.utterance, b.utterance),
            response=None,
            topic_ids=(a.topic_id, b.topic_id),
            label=0,
            group=f"pair:neg:{idx}",
        ))
    return examples


def split_dataset(
    examples: Sequence[TrainingExample],
    spec: SplitSpec,
) -> tuple[list[TrainingExample], list[TrainingExample], list[TrainingExample]]:
    """Partition examples into train/valid/test by whole source group.

    All examples sharing a ``group`` key land in the same split, so no
    dialogue path leaks across splits. Group counts follow the fractions by
    largest remainder, i.e. within one group of the exact targets.
    """
    groups: dict[str, list[TrainingExample]] = {}
    for ex in examples:
        groups.setdefault(ex.group, []).append(ex)
    keys = sorted(groups)
    if len(keys) < 3:
        raise GraphError(f"need at least 3 groups to split, got {len(keys)}")

    rng = np.random.default_rng(spec.seed)
    keys = [keys[i] for i in rng.permutation(len(keys))]

    fractions = (spec.train_fraction, spec.valid_fraction, spec.test_fraction)
    counts = [math.floor(f * len(keys)) for f in fractions]
    remainders = [f * len(keys) - c for f, c in zip(fractions, counts)]
    for _ in range(len(keys) - sum(counts)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0

    splits: list[list[TrainingExample]] = []
    start = 0
    for count in counts:
        bucket = keys[start:start + count]
        start += count
        chosen = set(bucket)
        splits.append([ex for ex in examples if ex.group in chosen])
    return splits[0], splits[1], splits[2]


# --- corpus statistics -------------------------------------------------------


@dataclass
class GraphStats:
    utterance_tokens_min: int
    utterance_tokens_max: int
    utterance_tokens_avg: float
    dialogue_tokens_min: int
    dialogue_tokens_max: int
    dialogue_tokens_avg: float
    turn_count: int
    total_dialogues: int
    total_utterances: int
    per_topic_dialogues: dict[int, int]
    topic_dialogues_max: int
    topic_dialogues_min: int
    topic_dialogues_mean: float
    topic_dialogues_variance: float


def graph_stats(graph: DialogueGraph, vocab: Vocab) -> GraphStats:
    """Corpus statistics; a dialogue is one root-to-maximal-leaf path."""
    utt_tokens = {
        nid: len(vocab.encode_text(node.text)) for nid, node in graph.nodes.items()
    }
    dialogue_tokens: list[int] = []
    per_topic: Counter[int] = Counter()
    turn_count = 0
    for root in graph.roots:
        for path in _paths_from(graph, root):
            if len(path) < 2:
                continue  # a bare root is not a dialogue
            dialogue_tokens.append(sum(utt_tokens[nid] for nid in path))
            per_topic[graph.nodes[root].topic_id] += 1
            turn_count = max(turn_count, len(path) - 1)

    utt_values = list(utt_tokens.values())
    topic_counts = [per_topic[t] for t in graph.topic_ids()]
    return GraphStats(
        utterance_tokens_min=min(utt_values, default=0),
        utterance_tokens_max=max(utt_values, default=0),
        utterance_tokens_avg=float(np.mean(utt_values)) if utt_values else 0.0,
        dialogue_tokens_min=min(dialogue_tokens, default=0),
        dialogue_tokens_max=max(dialogue_tokens, default=0),
        dialogue_tokens_avg=float(np.mean(dialogue_tokens)) if dialogue_tokens else 0.0,
        turn_count=turn_count,
        total_dialogues=len(dialogue_tokens),
        total_utterances=len(graph.nodes),
        per_topic_dialogues=dict(sorted(per_topic.items())),
        topic_dialogues_max=max(topic_counts, default=0),
        topic_dialogues_min=min(topic_counts, default=0),
        topic_dialogues_mean=float(np.mean(topic_counts)) if topic_counts else 0.0,
        topic_dialogues_variance=float(np.var(topic_counts)) if topic_counts else 0.0,
    )


# --- example (de)serialization ----------------------------------------------


def save_examples(examples: Sequence[TrainingExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "kind": ex.kind,
                "context": [{"role": u.role, "text": u.text} for u in ex.context],
                "response": (
                    {"role": ex.response.role, "text": ex.response.text}
                    if ex.response else None
                ),
                "topic_ids": list(ex.topic_ids),
                "label": ex.label,
                "group": ex.group,
            }, ensure_ascii=False) + "\n")


def load_examples(path: str) -> list[TrainingExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            examples.append(TrainingExample(
                kind=rec["kind"],
                context=tuple(Utterance(u["role"], u["text"]) for u in rec["context"]),
                response=(Utterance(rec["response"]["role"], rec["response"]["text"])
                          if rec.get("response") else None),
                topic_ids=tuple(rec["topic_ids"]),
                label=rec.get("label"),
                group=rec.get("group", ""),
            ))
    return examples
