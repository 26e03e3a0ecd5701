"""Attentional GRU decoder: teacher-forced loss, greedy and beam generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import Vocabulary


@dataclass
class DecoderParams:
    word_embed: Tensor  # (V, D_w)
    w_x: Tensor  # (3D, D_w + D) input-to-gates: update, reset, candidate
    b_x: Tensor  # (3D,)
    u_zr: Tensor  # (2D, D) hidden-to-(update, reset)
    u_h: Tensor  # (D, D) hidden-to-candidate, applied to r * h
    w_md: Tensor  # (D_att, 2D) additive attention over [node, hidden]
    b_md: Tensor  # (D_att,)
    w_rho: Tensor  # (1, D_att)
    w_out: Tensor  # (V, D)
    b_out: Tensor  # (V,)

    @property
    def vocab_size(self) -> int:
        return self.word_embed.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.u_h.shape[0]


@dataclass
class DecodeState:
    h: Tensor  # (B, D)
    tokens: list[list[int]] = field(default_factory=list)
    t: int = 0


class Attention:
    """Caches the node-side half of the additive attention for one sequence."""

    def __init__(self, node_feats: Tensor, p: DecoderParams):
        b, n, d = node_feats.shape
        self.nodes = node_feats
        self.node_proj = ad.linear(node_feats, p.w_md[:, :d], p.b_md)  # (B, N, D_att)
        self.w_hidden = p.w_md[:, d:]
        self.w_rho = p.w_rho

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        b, n, d = self.nodes.shape
        d_att = self.node_proj.shape[-1]
        pre = self.node_proj + ad.reshape(ad.linear(h, self.w_hidden), (b, 1, d_att))
        scores = ad.reshape(ad.linear(ad.tanh(pre), self.w_rho), (b, n))
        weights = ad.softmax(scores, axis=-1)
        context = ad.reshape(ad.matmul(ad.reshape(weights, (b, 1, n)), self.nodes), (b, d))
        return context, weights


def init_state(node_feats: Tensor) -> DecodeState:
    if node_feats.shape[1] == 0:
        raise ValueError("cannot initialise the decoder from an empty node set")
    return DecodeState(ad.mean(node_feats, axis=1), [[] for _ in range(node_feats.shape[0])], 0)


def attend(node_feats: Tensor, h: Tensor, p: DecoderParams) -> tuple[Tensor, Tensor]:
    """Context vector and attention weights for hidden state ``h``."""
    return Attention(node_feats, p)(h)


def gru_cell(h: Tensor, x: Tensor, p: DecoderParams) -> Tensor:
    d = h.shape[-1]
    gx = ad.linear(x, p.w_x, p.b_x)
    zr = ad.sigmoid(gx[:, : 2 * d] + ad.linear(h, p.u_zr))
    z, r = zr[:, :d], zr[:, d:]
    cand = ad.tanh(gx[:, 2 * d:] + ad.linear(r * h, p.u_h))
    return h + z * (cand - h)


def step(state: DecodeState, prev_ids, node_feats: Tensor, p: DecoderParams,
         attention: Attention | None = None) -> tuple[DecodeState, Tensor]:
    """One decoding step from the previous words; returns (next state, logits (B, V))."""
    prev_ids = np.atleast_1d(np.asarray(prev_ids, dtype=np.intp))
    if prev_ids.min() < 0 or prev_ids.max() >= p.vocab_size:
        raise IndexError(f"word id out of range for vocabulary of {p.vocab_size}")
    attention = attention or Attention(node_feats, p)
    context, _ = attention(state.h)
    x = ad.concat([ad.take(p.word_embed, prev_ids, axis=0), context], axis=-1)
    h = gru_cell(state.h, x, p)
    logits = ad.linear(h, p.w_out, p.b_out)
    return DecodeState(h, state.tokens, state.t + 1), logits


def caption_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sequence summed negative log-likelihood, averaged over the batch.

    ``logits`` is (B, T, V); ``targets``/``mask`` are (B, T).
    """
    logp = ad.pick(ad.log_softmax(logits, axis=-1), targets, axis=-1)  # (B, T)
    total = ad.sum(logp * Tensor(mask.astype(np.float64)))
    return total * (-1.0 / logits.shape[0])


def teacher_forced_loss(batch, node_feats: Tensor, p: DecoderParams) -> Tensor:
    ids, mask = batch.caption_ids, batch.caption_mask
    if ids.shape[1] < 2 or not mask[:, 1].all():
        raise ValueError("every caption needs at least <sos> and <eos>")
    inputs, targets, tmask = ids[:, :-1], ids[:, 1:], mask[:, 1:]
    attention = Attention(node_feats, p)
    state = init_state(node_feats)
    logits = []
    for t in range(inputs.shape[1]):
        state, lg = step(state, inputs[:, t], node_feats, p, attention)
        logits.append(lg)
    return caption_nll(ad.stack(logits, axis=1), targets, tmask)


def _log_probs(logits: Tensor) -> np.ndarray:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(node_feats: Tensor, p: DecoderParams, sos_id: int, eos_id: int,
                  max_len: int = 30) -> list[list[int]]:
    """Argmax decoding for a batch; ties go to the lowest token id."""
    with ad.no_grad():
        b = node_feats.shape[0]
        attention = Attention(node_feats, p)
        state = init_state(node_feats)
        prev = np.full(b, sos_id, dtype=np.intp)
        out = state.tokens
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            state, logits = step(state, prev, node_feats, p, attention)
            prev = np.argmax(_log_probs(logits), axis=-1)
            for i in np.flatnonzero(~done):
                if prev[i] == eos_id:
                    done[i] = True
                else:
                    out[i].append(int(prev[i]))
            if done.all():
                break
        return out


def beam_decode(node_feats: Tensor, p: DecoderParams, sos_id: int, eos_id: int,
                beam: int = 4, max_len: int = 30) -> list[int]:
    """Beam search for a single video (node_feats of batch size 1).

    Each step keeps the ``beam`` best expansions of the live hypotheses by
    summed log-probability; hypotheses ending in eos leave the beam.  The
    winner maximises summed log-probability divided by its length.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    if node_feats.shape[0] != 1:
        raise ValueError("beam_decode handles one video at a time")
    with ad.no_grad():
        nodes1 = node_feats.data
        live = [([], 0.0)]
        h = ad.mean(node_feats, axis=1).data
        finished: list[tuple[list[int], float]] = []
        for _ in range(max_len):
            k = len(live)
            nodes = Tensor(np.repeat(nodes1, k, axis=0))
            state = DecodeState(Tensor(h))
            prev = np.array([seq[-1] if seq else sos_id for seq, _ in live], dtype=np.intp)
            state, logits = step(state, prev, nodes, p)
            scores = np.array([s for _, s in live])[:, None] + _log_probs(logits)
            flat = scores.reshape(-1)
            order = np.argsort(-flat, kind="stable")[:beam]
            vocab = scores.shape[1]
            next_live, next_h = [], []
            for idx in order:
                src, tok = divmod(int(idx), vocab)
                seq = live[src][0] + [tok]
                if tok == eos_id:
                    finished.append((seq, float(flat[idx])))
                else:
                    next_live.append((seq, float(flat[idx])))
                    next_h.append(state.h.data[src])
            if not next_live:
                break
            live, h = next_live, np.stack(next_h)
        finished.extend(live)
        best = max(finished, key=lambda c: c[1] / len(c[0]))
        return [t for t in best[0] if t != eos_id]


def generate(batch, params, variant: str = "poet", beam: int = 1, max_len: int = 30) -> list[list[int]]:
    """Decode token ids (without sos/eos) for every video in ``batch``."""
    from .encoder import encode

    if beam < 1:
        raise ValueError("beam width must be >= 1")
    sos, eos = Vocabulary.sos_id, Vocabulary.eos_id
    with ad.no_grad():
        nodes, _ = encode(batch, params, variant)
        if beam == 1:
            return greedy_decode(nodes, params.decoder, sos, eos, max_len)
        return [beam_decode(Tensor(nodes.data[i: i + 1]), params.decoder, sos, eos, beam, max_len)
                for i in range(nodes.shape[0])]
