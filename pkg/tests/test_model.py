"""Transformer forwards, sequence layouts, heads and the five objectives."""

import dataclasses
import math

import numpy as np
import pytest

from fixtures import (
    CTX_IDS,
    GRAD_CFG,
    LOSS_BUILDERS,
    RESP_IDS,
    arrays_of,
    loss_over_arrays,
    params_from_arrays,
    seq_of,
    tiny_params,
    two_turn_context,
)
from oracles import (
    finite_difference_grads,
    manual_embed,
    manual_trunk,
    relative_grad_error,
)
from topicchat import losses
from topicchat import tensor as T
from topicchat.bpe import BOS_ID, EOS_ID, MASK_ID, EncodedSequence, latent_token_id
from topicchat.nn import (
    ModelConfig,
    ModelError,
    build_generator_sequence,
    build_pair_sequence,
    coherence_probability,
    embed_inputs,
    encoder_forward,
    generator_forward,
    init_parameters,
    mlm_distributions,
    parameter_schema,
    posterior_distribution,
)
from topicchat.tensor import Tensor


def f64_params(seed=0):
    """Same weights as tiny_params but promoted so ops run in float64."""
    p = tiny_params(seed)
    return params_from_arrays(
        {k: v.astype(np.float64) for k, v in arrays_of(p).items()})


# --- config and schema ------------------------------------------------------


def test_config_rejects_nonsense():
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=0)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=100, hidden_dim=6, head_count=4)
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=6, latent_count=5)  # latent ids spill past vocab


def test_schema_shapes_match_init():
    p = tiny_params()
    schema = parameter_schema(GRAD_CFG)
    assert [name for name, _, _ in schema] == list(p.tensors)
    for name, shape, _ in schema:
        assert p.tensors[name].data.shape == shape


def test_init_is_seeded():
    a, b = tiny_params(3), tiny_params(3)
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    c = tiny_params(4)
    assert any(not np.array_equal(a.tensors[n].data, c.tensors[n].data)
               for n in a.tensors)


# --- sequence builders ----------------------------------------------------------


def test_generator_layout_with_latent():
    ctx = two_turn_context()  # roles [0,0,1], turns [0,0,1]
    resp = seq_of(RESP_IDS, role=1, turn=0)
    seq, bos_at = build_generator_sequence(ctx, resp, 1, GRAD_CFG)
    assert seq.token_ids == [latent_token_id(1), *CTX_IDS, BOS_ID, *RESP_IDS]
    assert bos_at == 4
    # latent and <bos> both speak as the responder, in the response turn
    assert seq.role_ids == [1, 0, 0, 1, 1, 1, 1]
    assert seq.turn_ids == [2, 0, 0, 1, 2, 2, 2]
    assert seq.position_ids == list(range(7))


def test_generator_layout_without_latent():
    seq, bos_at = build_generator_sequence(
        two_turn_context(), EncodedSequence(), None, GRAD_CFG)
    assert seq.token_ids == [*CTX_IDS, BOS_ID]
    assert bos_at == 3


def test_generator_rejects_bad_latent():
    with pytest.raises(ModelError):
        build_generator_sequence(two_turn_context(), EncodedSequence(),
                                 GRAD_CFG.latent_count, GRAD_CFG)


def test_pair_layout():
    ctx = two_turn_context()
    seq = build_pair_sequence(ctx, seq_of(RESP_IDS, role=1, turn=0), GRAD_CFG)
    assert seq.token_ids == [BOS_ID, *CTX_IDS, *RESP_IDS]
    assert seq.turn_ids == [0, 0, 0, 1, 2, 2]
    assert seq.position_ids == list(range(6))


def test_turn_ids_clamp_to_table():
    ctx = seq_of([7] * 4, role=0, turn=GRAD_CFG.turn_count + 3)
    seq = build_pair_sequence(ctx, seq_of([8], role=1, turn=0), GRAD_CFG)
    assert max(seq.turn_ids) == GRAD_CFG.turn_count - 1


# --- embeddings -------------------------------------------------------------------


def test_embedding_is_four_way_sum():
    p = f64_params()
    seq = build_pair_sequence(two_turn_context(),
                              seq_of(RESP_IDS, role=1, turn=0), GRAD_CFG)
    got = embed_inputs(p, seq).data
    want = manual_embed(arrays_of(p), seq)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_embedding_with_latent_mixture():
    p = f64_params()
    seq, _ = build_generator_sequence(two_turn_context(), EncodedSequence(),
                                      0, GRAD_CFG)
    mix = np.array([[0.3, 0.7]], dtype=np.float64)
    got = embed_inputs(p, seq, latent_mix=Tensor(mix)).data
    want = manual_embed(arrays_of(p), seq, latent_mix=mix,
                        latent_count=GRAD_CFG.latent_count)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_embedding_range_checks():
    p = tiny_params()
    bad = seq_of([GRAD_CFG.vocab_size])
    with pytest.raises(ModelError):
        embed_inputs(p, bad)
    too_long = seq_of([7] * (GRAD_CFG.max_seq_len + 1))
    with pytest.raises(ModelError):
        embed_inputs(p, too_long)


# --- trunk vs plain-numpy reference -------------------------------------------------


@pytest.mark.parametrize("causal", [True, False])
def test_forward_matches_numpy_reference(causal):
    p = f64_params(seed=11)
    seq = build_pair_sequence(two_turn_context(),
                              seq_of(RESP_IDS, role=1, turn=0), GRAD_CFG)
    arrays = arrays_of(p)
    emb = manual_embed(arrays, seq)
    want = manual_trunk(arrays, GRAD_CFG.layer_count, GRAD_CFG.head_count,
                        emb, causal=causal)
    if causal:
        got = generator_forward(p, two_turn_context(),
                                seq_of(RESP_IDS, role=1, turn=0), z=None)
        # generator prepends <bos> between context and response
        seq2, _ = build_generator_sequence(two_turn_context(),
                                           seq_of(RESP_IDS, role=1, turn=0),
                                           None, GRAD_CFG)
        emb2 = manual_embed(arrays, seq2)
        want = manual_trunk(arrays, GRAD_CFG.layer_count, GRAD_CFG.head_count,
                            emb2, causal=True)
        np.testing.assert_allclose(got.hidden.data, want, rtol=0, atol=1e-9)
    else:
        got = encoder_forward(p, seq)
        np.testing.assert_allclose(got.hidden.data, want, rtol=0, atol=1e-9)
        np.testing.assert_allclose(got.pooled.data, want[0], rtol=0, atol=1e-9)


def test_generator_rows_are_distributions():
    p = tiny_params()
    out = generator_forward(p, two_turn_context(),
                            seq_of(RESP_IDS, role=1, turn=0), z=1)
    sums = out.probs.data.sum(axis=-1)
    np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)
    assert (out.probs.data >= 0).all()


def test_causal_rows_ignore_future_tokens():
    p = tiny_params()
    resp_a = seq_of([10, 11], role=1, turn=0)
    resp_b = seq_of([10, 12], role=1, turn=0)  # differs only in the last token
    out_a = generator_forward(p, two_turn_context(), resp_a, z=0)
    out_b = generator_forward(p, two_turn_context(), resp_b, z=0)
    changed_at = out_a.bos_position + 1  # position of the second response token
    np.testing.assert_array_equal(out_a.probs.data[:changed_at + 1],
                                  out_b.probs.data[:changed_at + 1])
    assert not np.array_equal(out_a.probs.data[changed_at + 1],
                              out_b.probs.data[changed_at + 1])


def test_latent_value_changes_distribution():
    p = tiny_params()
    outs = [generator_forward(p, two_turn_context(), EncodedSequence(), z=z)
            for z in range(GRAD_CFG.latent_count)]
    assert not np.array_equal(outs[0].probs.data[-1], outs[1].probs.data[-1])


def test_one_hot_mixture_equals_discrete_latent():
    p = tiny_params()
    for z in range(GRAD_CFG.latent_count):
        mix = np.zeros((1, GRAD_CFG.latent_count), dtype=np.float32)
        mix[0, z] = 1.0
        via_mix = generator_forward(p, two_turn_context(), EncodedSequence(),
                                    latent_mix=Tensor(mix))
        via_id = generator_forward(p, two_turn_context(), EncodedSequence(), z=z)
        np.testing.assert_allclose(via_mix.probs.data, via_id.probs.data,
                                   atol=1e-6)


# --- heads ------------------------------------------------------------------------


def test_head_output_shapes():
    p = tiny_params()
    seq = build_pair_sequence(two_turn_context(),
                              seq_of(RESP_IDS, role=1, turn=0), GRAD_CFG)
    enc = encoder_forward(p, seq)
    assert enc.pooled.data.shape == (GRAD_CFG.hidden_dim,)
    post = posterior_distribution(p, enc)
    assert post.data.shape == (1, GRAD_CFG.latent_count)
    np.testing.assert_allclose(post.data.sum(), 1.0, atol=1e-6)
    coh = coherence_probability(p, enc)
    assert coh.data.shape == ()
    assert 0.0 < float(coh.data) < 1.0
    mlm = mlm_distributions(p, enc.hidden, [1, 3])
    assert mlm.data.shape == (2, GRAD_CFG.vocab_size)


# --- analytic loss values -----------------------------------------------------------


def test_bce_analytic_values():
    half = Tensor(np.array([0.5, 0.5]))
    assert math.isclose(float(losses.bce_loss(half, [1, 0]).data),
                        math.log(2), rel_tol=1e-6)
    quarter = Tensor(np.array([0.25]))
    assert math.isclose(float(losses.bce_loss(quarter, [0]).data),
                        math.log(4 / 3), rel_tol=1e-6)


def test_bce_is_mean_not_sum():
    p = Tensor(np.array([0.5, 0.5, 0.5, 0.5]))
    assert math.isclose(float(losses.bce_loss(p, [1, 1, 0, 0]).data),
                        math.log(2), rel_tol=1e-6)


def test_nll_analytic_values():
    uniform = Tensor(np.full((2, 4), 0.25))
    # summed over positions: 2 * ln 4
    assert math.isclose(float(losses.nll_loss(uniform, [0, 3]).data),
                        2 * math.log(4), rel_tol=1e-6)


def test_nll_rejects_bad_targets():
    dist = Tensor(np.full((2, 4), 0.25))
    with pytest.raises(ModelError):
        losses.nll_loss(dist, [0])
    with pytest.raises(ModelError):
        losses.nll_loss(dist, [0, 4])


def test_loss_clamp_keeps_zero_probability_finite():
    dist = Tensor(np.array([[1.0, 0.0]]))
    val = float(losses.nll_loss(dist, [1]).data)
    assert math.isfinite(val)
    assert val == pytest.approx(-math.log(losses.PROB_EPS), rel=1e-3)


def test_bow_is_permutation_invariant_bitwise():
    p = tiny_params()
    ctx = two_turn_context()
    a = losses.bow_loss(p, ctx, 0, [10, 11, 12, 13])
    b = losses.bow_loss(p, ctx, 0, [13, 11, 12, 10])
    assert float(a.data) == float(b.data)


def test_bow_rejects_empty_response():
    with pytest.raises(ModelError):
        losses.bow_loss(tiny_params(), two_turn_context(), 0, [])


def test_rce_prefers_separated_scores():
    # oracle: -(log p_pos + log(1 - p_neg)) recomputed from the head directly
    p = f64_params(seed=2)
    ctx = two_turn_context()
    pos = seq_of(RESP_IDS, role=1, turn=0)
    neg = seq_of([12, 13], role=1, turn=0)
    got = float(losses.rce_loss(p, ctx, pos, neg).data)
    p_pos = float(coherence_probability(
        p, encoder_forward(p, build_pair_sequence(ctx, pos, GRAD_CFG))).data)
    p_neg = float(coherence_probability(
        p, encoder_forward(p, build_pair_sequence(ctx, neg, GRAD_CFG))).data)
    assert got == pytest.approx(-(math.log(p_pos) + math.log(1 - p_neg)),
                                rel=1e-9)


def test_masked_positions_count_law():
    for length in range(1, 30):
        picked = losses.masked_positions(length, 0.15, seed=1)
        assert len(picked) == max(1, math.ceil(0.15 * length))
        assert len(set(picked)) == len(picked)
        assert all(0 <= i < length for i in picked)


def test_masked_positions_seeded():
    assert (losses.masked_positions(20, 0.3, seed=5)
            == losses.masked_positions(20, 0.3, seed=5))
    runs = {tuple(losses.masked_positions(20, 0.3, seed=s)) for s in range(10)}
    assert len(runs) > 1


def test_mlm_loss_masks_then_reconstructs():
    p = f64_params(seed=3)
    seq = build_pair_sequence(two_turn_context(),
                              seq_of(RESP_IDS, role=1, turn=0), GRAD_CFG)
    got = float(losses.mlm_loss(p, seq, mask_rate=0.3, seed=7).data)
    # oracle: corrupt manually, re-encode, read the picked probabilities
    positions = losses.masked_positions(len(seq), 0.3, seed=7)
    corrupted = EncodedSequence(
        token_ids=[MASK_ID if i in positions else t
                   for i, t in enumerate(seq.token_ids)],
        role_ids=list(seq.role_ids), turn_ids=list(seq.turn_ids),
        position_ids=list(seq.position_ids))
    enc = encoder_forward(p, corrupted)
    dists = mlm_distributions(p, enc.hidden, positions).data
    want = -sum(math.log(dists[i, seq.token_ids[pos]])
                for i, pos in enumerate(positions))
    assert got == pytest.approx(want, rel=1e-9)


# --- gradients ---------------------------------------------------------------------


def test_constant_head_gets_zero_or_no_grad():
    p = tiny_params()
    LOSS_BUILDERS["nll"](p).backward()
    g = p.tensors["head.coherence.w"].grad
    assert g is None or not g.any()


@pytest.mark.parametrize("name", sorted(LOSS_BUILDERS))
def test_all_five_losses_match_finite_differences(name):
    build = LOSS_BUILDERS[name]
    arrays = {k: v.astype(np.float64)
              for k, v in arrays_of(tiny_params(seed=5)).items()}
    p = params_from_arrays(arrays)
    loss = build(p)
    loss.backward()
    fd = finite_difference_grads(loss_over_arrays(build), arrays)
    worst = 0.0
    for key, want in fd.items():
        if not want.any():
            continue
        got = p.tensors[key].grad
        assert got is not None, f"{key} missing gradient"
        worst = max(worst, relative_grad_error(got, want))
    assert worst < 1e-3, f"{name}: worst rel err {worst}"
