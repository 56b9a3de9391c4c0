"""Session-scoped trained fixtures shared by runtime, eval and service tests.

Training the three small networks takes about a minute, so it happens once
per session on a fixed two-topic synthetic corpus. Everything downstream
(chat behaviour, calibration, the HTTP service, acceptance checks) reuses
these models and their on-disk checkpoints.
"""

import pytest

from topicchat.bpe import save_vocab, train_bpe
from topicchat.checkpoint import save_checkpoint
from topicchat.graph import (
    SplitSpec,
    extract_discriminator_pairs,
    extract_one_to_many,
    extract_one_to_one,
    split_dataset,
)
from topicchat.nn import ModelConfig, init_parameters
from topicchat.runtime import ModelBundle, calibrate_threshold
from topicchat.synthetic import make_corpus
from topicchat.training import TRAINERS, TrainPlan

TWO_TOPIC_SEED = 0
VOCAB_SIZE = 364
LATENT_COUNT = 3

FIXTURE_CONFIG = ModelConfig(
    vocab_size=VOCAB_SIZE,
    max_seq_len=48,
    position_table_size=48,
    hidden_dim=32,
    ffn_dim=64,
    layer_count=1,
    head_count=2,
    latent_count=LATENT_COUNT,
    turn_count=8,
)


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(n_topics=2, chains_per_topic=50, depth=8,
                       seed=TWO_TOPIC_SEED)


@pytest.fixture(scope="session")
def vocab(corpus):
    texts = [n.text for n in corpus.nodes.values()]
    return train_bpe(texts, VOCAB_SIZE, latent_count=LATENT_COUNT)


@pytest.fixture(scope="session")
def pair_splits(corpus):
    pairs = extract_discriminator_pairs(corpus, negative_ratio=1.0, seed=1)
    return split_dataset(pairs, SplitSpec(0.7, 0.15, 0.15, seed=2))


@pytest.fixture(scope="session")
def generator(corpus, vocab):
    params = init_parameters(FIXTURE_CONFIG)
    params, _ = TRAINERS["stage1"](
        TrainPlan(stage="stage1", batch_size=16, learning_rate=0.05,
                  step_count=800, seed=0, eval_every=400),
        params, vocab, extract_one_to_one(corpus))
    params, _ = TRAINERS["stage2_1"](
        TrainPlan(stage="stage2_1", batch_size=16, learning_rate=0.05,
                  step_count=600, seed=0, eval_every=200),
        params, vocab, extract_one_to_many(corpus))
    return params


@pytest.fixture(scope="session")
def selector(corpus, vocab):
    params = init_parameters(FIXTURE_CONFIG)
    params, _ = TRAINERS["stage2_2"](
        TrainPlan(stage="stage2_2", batch_size=16, learning_rate=0.1,
                  step_count=600, seed=0, eval_every=200),
        params, vocab, extract_one_to_one(corpus))
    return params


@pytest.fixture(scope="session")
def discriminator(vocab, pair_splits):
    train, valid, _ = pair_splits
    params = init_parameters(FIXTURE_CONFIG)
    params, _ = TRAINERS["discriminator"](
        TrainPlan(stage="discriminator", batch_size=16, learning_rate=0.1,
                  step_count=2000, seed=1, eval_every=500),
        params, vocab, train, valid_data=valid)
    return params


@pytest.fixture(scope="session")
def epsilon(discriminator, vocab, pair_splits):
    _, valid, _ = pair_splits
    labeled = [(ex.context[0].text, ex.context[1].text, ex.label)
               for ex in valid]
    return calibrate_threshold(discriminator, vocab, labeled).epsilon


@pytest.fixture(scope="session")
def models(generator, selector, discriminator, vocab):
    return ModelBundle(generator=generator, selector=selector,
                       discriminator=discriminator, vocab=vocab)


@pytest.fixture(scope="session")
def checkpoint_dirs(models, tmp_path_factory):
    """On-disk copies for everything that loads checkpoints by path."""
    root = tmp_path_factory.mktemp("trained")
    paths = {
        "generator": str(root / "gen"),
        "selector": str(root / "sel"),
        "discriminator": str(root / "disc"),
        "vocab": str(root / "vocab.txt"),
    }
    save_checkpoint(models.generator, paths["generator"])
    save_checkpoint(models.selector, paths["selector"])
    save_checkpoint(models.discriminator, paths["discriminator"])
    save_vocab(models.vocab, paths["vocab"])
    return paths
