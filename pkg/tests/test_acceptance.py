"""Shipping gate: one test per go/no-go requirement, strictest tolerances.

Each test here restates a requirement end to end rather than trusting the
per-module suites: gradients against central differences, extraction against
brute-force tree walks, learnability and determinism of stage-1 training,
held-out discriminator quality at the calibrated threshold, the switch rule's
exact semantics, self-chat metric recomputation, and the HTTP service driven
over a real socket. The browser client ships with its own contract tests
under frontend/.
"""

import dataclasses
import json
import random
import threading
import time

import numpy as np
import pytest

from fixtures import (
    GRAD_CFG,
    LOSS_BUILDERS,
    arrays_of,
    loss_over_arrays,
    params_from_arrays,
    tiny_params,
)
from oracles import (
    count_edges_brute,
    count_leaves_brute,
    enumerate_paths_brute,
    finite_difference_grads,
    random_tree_graph,
    relative_grad_error,
)
from topicchat.bpe import decode, encode, train_bpe
from topicchat.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from topicchat.evalsuite import build_report, count_topics, self_chat
from topicchat.graph import extract_one_to_many, extract_one_to_one
from topicchat.nn import ModelConfig
from topicchat.runtime import (
    CandidateResponse,
    ChatContext,
    argmax_candidate,
    calibration_curve,
    chat_turn,
    discriminator_score,
    select_response,
    topic_switch_step,
)
from topicchat.synthetic import inventory_words, make_corpus
from topicchat.training import TrainPlan, train_stage1


# --- 1: gradient fidelity --------------------------------------------------------


def test_loss_gradients_match_central_differences():
    started = time.perf_counter()
    param_count = sum(t.data.size for t in tiny_params().tensors.values())
    assert param_count <= 5000

    for seed in (5, 11):
        base = {k: v.astype(np.float64)
                for k, v in arrays_of(tiny_params(seed=seed)).items()}
        for name, build in sorted(LOSS_BUILDERS.items()):
            p = params_from_arrays(base)
            build(p).backward()
            fd = finite_difference_grads(loss_over_arrays(build), base)
            worst = 0.0
            for key, want in fd.items():
                if not want.any():
                    continue
                got = p.tensors[key].grad
                assert got is not None, f"{name}: {key} missing gradient"
                if (np.linalg.norm(want) < 1e-8
                        and np.linalg.norm(got) < 1e-8):
                    # analytically zero direction (e.g. a bias the softmax is
                    # invariant to): both sides are truncation noise
                    continue
                worst = max(worst, relative_grad_error(got, want))
            assert worst < 1e-3, f"{name} seed {seed}: worst rel err {worst}"

    assert time.perf_counter() - started < 60.0


# --- 2: extraction counts ---------------------------------------------------------


def test_extraction_counts_match_brute_force_over_random_trees():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 100:
        graph = random_tree_graph(rng, n_topics=1, max_children=2,
                                  leaf_probability=0.45)
        if len(graph.nodes) > 100:
            continue
        checked += 1
        assert len(extract_one_to_one(graph)) == count_edges_brute(graph)
        paths = enumerate_paths_brute(graph)
        long_paths = [p for p in paths if len(p) >= 2]
        assert len(extract_one_to_many(graph)) == len(long_paths)
        assert len(long_paths) == count_leaves_brute(graph)


# --- 3: tokenizer round-trip -------------------------------------------------------


def fuzz_string(rng: random.Random) -> str:
    pools = [
        (0x20, 0x7E),        # ascii
        (0xA1, 0x2FF),       # accented latin
        (0x3041, 0x30FF),    # kana
        (0x4E00, 0x9FBF),    # cjk
        (0x1F300, 0x1F64F),  # emoji
    ]
    chars = []
    for _ in range(rng.randint(0, 40)):
        lo, hi = rng.choice(pools)
        chars.append(chr(rng.randint(lo, hi)))
    return "".join(chars)


def test_tokenizer_round_trips_fuzzed_utf8(vocab):
    rng = random.Random(9)
    for _ in range(1000):
        text = fuzz_string(rng)
        assert decode(vocab, vocab.encode_text(text)) == text


# --- 4: stage-1 learnability and determinism ----------------------------------------


def test_stage1_halves_nll_and_repeats_bit_identically(tmp_path):
    corpus = make_corpus(n_topics=4, chains_per_topic=50, depth=8, seed=7)
    dialogues = extract_one_to_many(corpus)
    assert len(dialogues) >= 150  # one dialogue per root-to-leaf path

    texts = [n.text for n in corpus.nodes.values()]
    vocab = train_bpe(texts, 400, latent_count=3)
    cfg = ModelConfig(vocab_size=len(vocab.pieces), max_seq_len=48,
                      position_table_size=48, hidden_dim=32, ffn_dim=64,
                      layer_count=1, head_count=2, latent_count=3,
                      turn_count=8)
    plan = TrainPlan(stage="stage1", batch_size=16, learning_rate=0.05,
                     step_count=200, seed=0, eval_every=100)

    from topicchat.nn import init_parameters

    runs = []
    for label in ("first", "second"):
        params, trace = train_stage1(plan, init_parameters(cfg), vocab,
                                     dialogues, None)
        out = tmp_path / label
        save_checkpoint(params, str(out))
        runs.append((trace, out))

    trace, _ = runs[0]
    assert trace.rows[-1].total <= 0.5 * trace.rows[0].total

    first, second = runs[0][1], runs[1][1]
    for name in ("manifest.json", "params.bin"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


# --- 5: discriminator quality --------------------------------------------------------


def pair_fields(example) -> tuple[str, str, int]:
    return example.context[0].text, example.context[1].text, example.label


def test_calibrated_discriminator_precision_recall_on_heldout(
        models, pair_splits, epsilon):
    _, _, test_pairs = pair_splits
    scores, labels = [], []
    for ex in test_pairs:
        first, second, label = pair_fields(ex)
        ctx = ChatContext(turns=[("A", first)], turn_counter=1)
        scores.append(discriminator_score(models.discriminator, models.vocab,
                                          ctx, second))
        labels.append(label)

    tp = sum(1 for s, y in zip(scores, labels) if s > epsilon and y == 1)
    fp = sum(1 for s, y in zip(scores, labels) if s > epsilon and y == 0)
    fn = sum(1 for s, y in zip(scores, labels) if s <= epsilon and y == 1)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    assert precision >= 0.95, f"held-out precision {precision:.4f}"
    assert recall >= 0.95, f"held-out recall {recall:.4f}"

    # the full sweep must agree with a from-scratch confusion matrix
    curve = calibration_curve(scores, labels)
    for point in curve.points:
        tp = sum(1 for s, y in zip(scores, labels) if s > point.threshold and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s > point.threshold and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s <= point.threshold and y == 1)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        assert point.precision == p
        assert point.recall == r
        assert point.f1 == f1


# --- 6: switch-rule semantics ---------------------------------------------------------


def test_switch_rule_semantics_and_context_reset(models, corpus, epsilon):
    # switched <=> beta <= epsilon, including the boundary, on a busy context
    busy = ChatContext(turns=[("A", "x"), ("B", "y")], turn_counter=2)
    for beta in (0.0, 0.3, 0.6099, 0.61, 0.6101, 0.9, 1.0):
        _, decision = topic_switch_step(busy, "next", 0.61, beta)
        assert decision.switched == (beta <= 0.61)

    # two same-topic turns, then a cross-topic one
    vocab = models.vocab
    ctx = ChatContext()
    for text in (corpus.nodes["0-0-0"].text, corpus.nodes["0-1-0"].text):
        result = chat_turn(models, ctx, text, epsilon=epsilon, K=3)
        ctx = result.ctx
    pre_switch_ids = {tid for _, text in ctx.turns
                      for tid in vocab.encode_text(text)}

    result = chat_turn(models, ctx, corpus.nodes["1-0-0"].text,
                       epsilon=epsilon, K=3)
    assert result.decision.switched

    generator_turns = result.ctx.turns[:-1]  # context as the generator saw it
    assert generator_turns == [("A", corpus.nodes["1-0-0"].text)]
    generator_ids = set(encode(vocab, generator_turns).token_ids)
    assert generator_ids, "empty generator input"
    assert not generator_ids & pre_switch_ids

    assert result.ctx.topic_segments == 2  # one initial topic + one switch


# --- 7: selection argmax ---------------------------------------------------------------


def test_selection_argmax_over_injected_scores(vocab):
    rng = random.Random(17)
    for trial in range(1000):
        n = rng.randint(1, 8)
        grid = [0.1, 0.25, 0.5, 0.75, 0.9]
        pool = [CandidateResponse(z=z, text=f"c{z}",
                                  coherence_score=rng.choice(grid)
                                  if trial % 2 else rng.random())
                for z in range(n)]
        rng.shuffle(pool)
        best_score = max(c.coherence_score for c in pool)
        want = min(c.z for c in pool if c.coherence_score == best_score)
        assert argmax_candidate(pool).z == want
        assert select_response(None, vocab, [("A", "s")], pool).z == want


# --- 8: self-chat at scale ---------------------------------------------------------------


def twenty_seeds(corpus) -> list[str]:
    per_topic: dict[int, list[str]] = {0: [], 1: []}
    for node_id in sorted(corpus.nodes):
        node = corpus.nodes[node_id]
        if len(per_topic[node.topic_id]) < 10:
            per_topic[node.topic_id].append(node.text)
    assert len(per_topic[0]) == len(per_topic[1]) == 10
    return per_topic[0] + per_topic[1]


def test_self_chat_metrics_match_independent_tallies(models, corpus, epsilon):
    seeds = twenty_seeds(corpus)
    run = self_chat(models, seeds, turns=10, epsilon=epsilon, K=3)
    assert len(run.transcripts) == 20
    for transcript in run.transcripts:
        assert transcript.error is None
        assert len(transcript.turns) == 10

    report = build_report(run, models.vocab)
    responses = [t.bot_text for tr in run.transcripts for t in tr.turns]
    token_lists = [models.vocab.encode_text(r) for r in responses]
    total = sum(len(ids) for ids in token_lists)
    unigrams = {(t,) for ids in token_lists for t in ids}
    bigrams = {tuple(ids[i:i + 2]) for ids in token_lists
               for i in range(len(ids) - 1)}
    topic_counts = [1 + sum(t.switched for t in tr.turns)
                    for tr in run.transcripts]

    assert abs(report.distinct1 - len(unigrams) / total) < 1e-9
    assert abs(report.distinct2 - len(bigrams) / total) < 1e-9
    assert abs(report.avg_length - total / len(token_lists)) < 1e-9
    assert abs(report.avg_topics - sum(topic_counts) / 20) < 1e-9

    disabled = self_chat(models, seeds[:5], turns=10, epsilon=epsilon, K=3,
                         switch_enabled=False)
    assert all(not turn.switched
               for tr in disabled.transcripts for turn in tr.turns)
    assert all(count_topics(tr) == 1 for tr in disabled.transcripts)


# --- 9: scripted cross-topic behaviour ------------------------------------------------------


def test_scripted_cross_topic_turn_switches_and_changes_inventory(
        models, corpus, epsilon):
    script = [
        corpus.nodes["0-0-0"].text,
        corpus.nodes["0-1-0"].text,
        corpus.nodes["1-0-0"].text,
    ]

    ctx = ChatContext()
    flags, responses = [], []
    for line in script:
        result = chat_turn(models, ctx, line, epsilon=epsilon, K=3)
        flags.append(result.decision.switched)
        responses.append(result.response)
        ctx = result.ctx

    assert flags == [False, False, True]
    assert set(responses[-1].split()) <= inventory_words(1)

    # same script with switching disabled: a switch-free transcript
    ctx = ChatContext()
    for line in script:
        result = chat_turn(models, ctx, line, epsilon=epsilon, K=3,
                           switch_enabled=False)
        assert result.decision is None
        ctx = result.ctx
    assert ctx.topic_segments == 1


# --- 10: checkpoint durability ----------------------------------------------------------------


def test_checkpoint_round_trip_and_corruption_detection(models, tmp_path):
    first = tmp_path / "first"
    save_checkpoint(models.generator, str(first))
    loaded = load_checkpoint(str(first))
    assert dataclasses.asdict(loaded.config) == \
        dataclasses.asdict(models.generator.config)
    for name, tensor in models.generator.tensors.items():
        assert np.array_equal(loaded.tensors[name].data, tensor.data)
        assert loaded.tensors[name].data.dtype == tensor.data.dtype

    second = tmp_path / "second"
    save_checkpoint(loaded, str(second))
    for fname in ("manifest.json", "params.bin"):
        assert (first / fname).read_bytes() == (second / fname).read_bytes()

    broken = tmp_path / "broken-manifest"
    save_checkpoint(models.generator, str(broken))
    manifest = broken / "manifest.json"
    manifest.write_text(manifest.read_text()[:40])
    with pytest.raises(CheckpointError, match="invalid JSON"):
        load_checkpoint(str(broken))

    clipped = tmp_path / "clipped-blob"
    save_checkpoint(models.generator, str(clipped))
    blob = clipped / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated blob"):
        load_checkpoint(str(clipped))

    mislabeled = tmp_path / "mislabeled"
    save_checkpoint(models.generator, str(mislabeled))
    manifest = mislabeled / "manifest.json"
    meta = json.loads(manifest.read_text())
    meta["tensors"][0]["shape"][0] += 1
    manifest.write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(str(mislabeled))


# --- 11: service over a real socket -------------------------------------------------------------


@pytest.fixture
def live_server(models, epsilon, checkpoint_dirs):
    import uvicorn

    from topicchat.service import ServiceConfig, create_app

    entered = threading.Event()
    release = threading.Event()
    blocking = threading.Event()

    def hook(session_id: str) -> None:
        if blocking.is_set():
            entered.set()
            release.wait(timeout=30)

    app = create_app(
        models,
        ServiceConfig(epsilon=epsilon, k=3,
                      checkpoint_dirs={
                          k: v for k, v in checkpoint_dirs.items()
                          if k != "vocab"}),
        turn_hook=hook)
    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=0,
                                           log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 30
    while not server.started:
        assert time.time() < deadline, "server failed to start"
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    try:
        yield f"http://127.0.0.1:{port}", blocking, entered, release
    finally:
        server.should_exit = True
        thread.join(timeout=10)


def test_http_service_session_lifecycle(live_server, corpus):
    import httpx

    base, blocking, entered, release = live_server
    script = [
        corpus.nodes["0-0-0"].text,
        corpus.nodes["0-1-0"].text,
        corpus.nodes["1-0-0"].text,
    ]
    with httpx.Client(base_url=base, timeout=60.0) as client:
        assert client.get("/healthz").json()["status"] == "ok"

        sid = client.post("/sessions", json={}).json()["id"]
        replies = [client.post(f"/sessions/{sid}/messages",
                               json={"text": line}).json()
                   for line in script]
        assert [r["switched"] for r in replies] == [False, False, True]

        transcript = client.get(f"/sessions/{sid}").json()
        assert [t["switched"] for t in transcript["turns"]] == \
            [r["switched"] for r in replies]
        assert [t["response"] for t in transcript["turns"]] == \
            [r["response"] for r in replies]
        assert transcript["topic_segments"] == 2

        rated = client.post(f"/sessions/{sid}/ratings",
                            json={"coherence": 2, "informativeness": 1,
                                  "engagingness": 2, "humanness": 1})
        assert rated.status_code == 201
        assert client.get(f"/sessions/{sid}").json()["rating"] is not None

        # two turns racing on one session: exactly one is refused
        blocking.set()
        outcome: dict = {}

        def slow_turn():
            outcome["first"] = client.post(f"/sessions/{sid}/messages",
                                           json={"text": script[0]})

        worker = threading.Thread(target=slow_turn)
        worker.start()
        assert entered.wait(timeout=30)
        blocking.clear()
        try:
            refused = client.post(f"/sessions/{sid}/messages",
                                  json={"text": script[1]})
        finally:
            release.set()
            worker.join(timeout=60)
        assert refused.status_code == 409
        assert refused.json()["error"]["code"] == "turn_in_flight"
        assert outcome["first"].status_code == 200
