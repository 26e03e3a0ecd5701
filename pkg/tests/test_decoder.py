import math
from dataclasses import fields

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poet import autodiff as ad
from poet.autodiff import Tape, Tensor
from poet.decoder import (Attention, DecodeState, attend, beam_decode, caption_nll, generate, greedy_decode,
                          init_state, step, teacher_forced_loss)
from poet.encoder import encode

from conftest import make_setup


def nodes_of(params, batch):
    return encode(batch, params)[0]


def test_init_state_mean():
    v = np.random.default_rng(0).normal(size=(6,))
    assert np.allclose(init_state(Tensor(np.tile(v, (1, 4, 1)))).h.data[0], v, atol=1e-15)
    rows = np.random.default_rng(1).normal(size=(1, 270, 5))
    assert np.allclose(init_state(Tensor(rows)).h.data, rows.mean(axis=1), atol=1e-15)
    assert not init_state(Tensor(np.zeros((1, 3, 4)))).h.data.any()
    with pytest.raises(ValueError):
        init_state(Tensor(np.zeros((1, 0, 4))))


def test_attend_identical_rows_and_single_node():
    samples, vocab, batch, params = make_setup(perturb=0.5)
    p = params.decoder
    row = np.random.default_rng(2).normal(size=6)
    h = Tensor(np.random.default_rng(3).normal(size=(1, 6)))
    ctx, w = attend(Tensor(np.tile(row, (1, 5, 1))), h, p)
    assert np.allclose(ctx.data[0], row, atol=1e-14)
    assert abs(w.data.sum() - 1) <= 1e-12
    ctx, _ = attend(Tensor(row[None, None]), h, p)
    assert np.allclose(ctx.data[0], row, atol=1e-15)


def test_zero_weights_step_halves_hidden():
    samples, vocab, batch, params = make_setup()
    p = params.decoder
    for f in fields(p):
        getattr(p, f.name).data[...] = 0.0
    h = Tensor(np.random.default_rng(0).normal(size=(2, 6)))
    nodes = nodes_of(params, batch)
    state, logits = step(DecodeState(h), [1, 1], nodes, p)
    assert np.allclose(state.h.data, 0.5 * h.data, atol=1e-15)
    assert logits.shape == (2, len(vocab))


def test_step_rejects_bad_word_id():
    samples, vocab, batch, params = make_setup()
    nodes = nodes_of(params, batch)
    with pytest.raises(IndexError):
        step(init_state(nodes), [len(vocab), 1], nodes, params.decoder)


def test_step_gradcheck():
    # moderate scales: saturated gates leave gradients at the roundoff floor
    samples, vocab, batch, params = make_setup(perturb=0.2)
    nodes = Tensor(nodes_of(params, batch).data, requires_grad=True)
    h = Tensor(0.5 * np.random.default_rng(4).normal(size=(2, 6)), requires_grad=True)
    w = Tensor(np.random.default_rng(5).normal(size=(2, len(vocab))))
    p = params.decoder
    tensors = [nodes, h] + [getattr(p, f.name) for f in fields(p)]
    res = ad.gradient_check(lambda: ad.sum(step(DecodeState(h), [4, 5], nodes, p)[1] * w), tensors)
    assert res.max_rel_err < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(2, 60))
def test_uniform_logits_loss(t, v):
    targets = np.random.default_rng(t * v).integers(0, v, size=(1, t))
    loss = caption_nll(Tensor(np.zeros((1, t, v))), targets, np.ones((1, t), bool))
    assert loss.item() == pytest.approx(t * math.log(v), rel=1e-13)


def test_confident_logits_loss():
    t, v = 6, 100
    targets = np.arange(t)[None] + 3
    logits = np.zeros((1, t, v))
    logits[0, np.arange(t), targets[0]] = 30.0
    loss = caption_nll(Tensor(logits), targets, np.ones((1, t), bool)).item()
    assert loss == pytest.approx(t * math.log1p(99 * math.exp(-30)), rel=1e-6)
    assert loss < 1e-10


def test_loss_excludes_padding_and_averages_batch():
    logits = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5)))
    targets = np.array([[1, 2, 0], [3, 4, 2]])
    mask = np.array([[True, True, False], [True, True, True]])
    lp = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
    per = [-(lp[0, 0, 1] + lp[0, 1, 2]), -(lp[1, 0, 3] + lp[1, 1, 4] + lp[1, 2, 2])]
    assert caption_nll(logits, targets, mask).item() == pytest.approx(sum(per) / 2, abs=1e-13)


def test_teacher_forced_loss_positive_and_matches_steps():
    samples, vocab, batch, params = make_setup(perturb=0.3, n=1)
    nodes = nodes_of(params, batch)
    loss = teacher_forced_loss(batch, nodes, params.decoder).item()
    ids = batch.caption_ids[0]
    state, manual = init_state(nodes), 0.0
    for t in range(len(ids) - 1):
        state, lg = step(state, [ids[t]], nodes, params.decoder)
        z = lg.data[0] - lg.data[0].max()
        manual -= z[ids[t + 1]] - np.log(np.exp(z).sum())
    assert loss > 0
    assert loss == pytest.approx(manual, rel=1e-12)


def test_loss_decreases_monotonically_on_one_sample():
    samples, vocab, batch, params = make_setup(n=1, node_dim=8)
    losses = []
    for _ in range(50):
        params.zero_grad()
        with Tape() as tape:
            loss = teacher_forced_loss(batch, nodes_of(params, batch), params.decoder)
        tape.backward(loss)
        losses.append(loss.item())
        for t in params.tensors():
            t.data -= 0.02 * t.grad
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_step_distribution_normalises():
    samples, vocab, batch, params = make_setup(perturb=1.0)
    nodes = nodes_of(params, batch)
    _, logits = step(init_state(nodes), [1, 1], nodes, params.decoder)
    p = ad.softmax(logits, axis=-1).data
    assert np.abs(p.sum(-1) - 1).max() <= 1e-12


# ---------------------------------------------------------------- generation


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    samples, vocab, batch, params = make_setup(perturb=0.8, seed=seed, n=3)
    assert generate(batch, params, beam=1) == [
        beam_decode(Tensor(nodes_of(params, batch).data[i: i + 1]), params.decoder, 1, 2, 1, 30) for i in range(3)]


def test_generation_halts_at_max_len():
    samples, vocab, batch, params = make_setup(n=2)
    params.decoder.b_out.data[...] = 0.0
    params.decoder.b_out.data[5] = 50.0  # never eos
    for beam in (1, 3):
        out = generate(batch, params, beam=beam, max_len=7)
        assert all(len(seq) == 7 and set(seq) == {5} for seq in out)


def test_generation_stops_at_eos():
    samples, vocab, batch, params = make_setup(n=2)
    params.decoder.b_out.data[vocab.eos_id] = 50.0
    assert generate(batch, params) == [[], []]
    assert generate(batch, params, beam=2) == [[], []]


def test_greedy_deterministic_and_beam_validation():
    samples, vocab, batch, params = make_setup(perturb=0.5, n=2)
    assert generate(batch, params) == generate(batch, params)
    with pytest.raises(ValueError):
        generate(batch, params, beam=0)


def test_beam_prefers_length_normalised_score():
    # token 4: prefix log-prob high then eos; beam must compare by mean log-prob
    samples, vocab, batch, params = make_setup(perturb=0.7, seed=3, n=1)
    nodes = Tensor(nodes_of(params, batch).data)
    for beam in (2, 4):
        seq = beam_decode(nodes, params.decoder, 1, 2, beam, 10)
        assert len(seq) <= 10
        assert all(0 <= t < len(vocab) for t in seq)


def test_greedy_decode_batch_matches_single():
    samples, vocab, batch, params = make_setup(perturb=0.6, n=3)
    nodes = nodes_of(params, batch)
    together = greedy_decode(nodes, params.decoder, 1, 2, 12)
    alone = [greedy_decode(Tensor(nodes.data[i: i + 1]), params.decoder, 1, 2, 12)[0] for i in range(3)]
    assert together == alone


def test_attention_cache_equals_direct():
    samples, vocab, batch, params = make_setup(perturb=0.5)
    nodes = nodes_of(params, batch)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 6)))
    a = Attention(nodes, params.decoder)(h)[0].data
    assert np.array_equal(a, attend(nodes, h, params.decoder)[0].data)
