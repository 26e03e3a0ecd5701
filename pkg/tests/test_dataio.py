import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poet.dataio import (EOS, MAX_ASPECTS, PAD, SOS, UNK, DataError, SynthConfig, SynthLatent, VideoSample,
                         Vocabulary, build_vocab, collate, load_jsonl, oracle_caption, read_config, split_dataset,
                         synth_generate, wrap_caption, write_jsonl)

SMALL = SynthConfig(n_frames=3, n_parts=2, frame_dim=4, part_dim=3)


def record(n_frames=3, n_parts=2, vid="v", caption=("a", "b")):
    return {"video_id": vid, "frame_feats": np.zeros((n_frames, 4)).tolist(),
            "part_feats": np.ones((n_frames, n_parts, 3)).tolist(), "aspects": ["red"], "caption": list(caption)}


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def test_load_two_lines(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [record(vid="a"), record(vid="b")])
    got = load_jsonl(p)
    assert [s.video_id for s in got] == ["a", "b"]
    assert got[0].caption == [SOS, "a", "b", EOS]


def test_load_wrong_frame_count_names_line(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [record(30), record(29)])
    with pytest.raises(DataError, match=r"d\.jsonl:2: .*expected 30 frames, got 29"):
        load_jsonl(p, n_frames=30)


def test_load_malformed_json(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"video_id": \n')
    with pytest.raises(DataError, match=":1:"):
        load_jsonl(p)


def test_load_non_finite(tmp_path):
    p = tmp_path / "d.jsonl"
    r = record()
    r["frame_feats"][0][0] = float("nan")
    p.write_text(json.dumps(r) + "\n")
    with pytest.raises(DataError, match="non-finite"):
        load_jsonl(p)


def test_load_missing_key_and_header_conflict(tmp_path):
    p = tmp_path / "d.jsonl"
    r = record()
    del r["aspects"]
    write_lines(p, [r])
    with pytest.raises(DataError, match="missing keys"):
        load_jsonl(p)
    write_lines(p, [{"header": {"n_frames": 3}}, record()])
    with pytest.raises(DataError, match="expected 5"):
        load_jsonl(p, n_frames=5)


def test_too_many_aspects_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    r = record()
    r["aspects"] = [f"x{i}" for i in range(MAX_ASPECTS + 1)]
    write_lines(p, [r])
    with pytest.raises(DataError, match="aspects"):
        load_jsonl(p)


def test_long_caption_truncated_before_eos():
    assert wrap_caption([str(i) for i in range(40)]) == [SOS, *[str(i) for i in range(30)], EOS]
    assert wrap_caption([SOS, "a", EOS]) == [SOS, "a", EOS]


def test_jsonl_round_trip(tmp_path):
    samples = synth_generate(1, 5, SMALL)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, samples)
    write_jsonl(b, load_jsonl(a))
    assert a.read_bytes() == b.read_bytes()
    back = load_jsonl(a)
    for s, t in zip(samples, back):
        assert np.array_equal(s.part_feats, t.part_feats)
        assert s.caption == t.caption and s.aspects == t.aspects


# ---------------------------------------------------------------- vocabulary


def sample_with(words, aspects=()):
    return VideoSample("v", np.zeros((1, 1)), np.zeros((1, 1, 1)), list(aspects), wrap_caption(words))


def test_vocab_min_freq():
    v = build_vocab([sample_with("a a a b".split())], min_freq=2)
    assert "a" in v and "b" not in v
    v1 = build_vocab([sample_with("a a a b".split(), ["red"])], min_freq=1)
    assert len(v1) == 3 + 4
    assert v1.itos[:4] == [PAD, SOS, EOS, UNK]


def test_vocab_encode_decode_and_unk():
    v = Vocabulary(["b", "a"])
    assert v.itos == [PAD, SOS, EOS, UNK, "a", "b"]
    assert v.encode(["a", "zzz"]) == [4, v.unk_id]
    assert v.decode([1, 5, 4, 2]) == ["b", "a"]
    assert Vocabulary.from_list(v.to_list()) == v
    with pytest.raises(DataError):
        Vocabulary.from_list(["a", "b"])


def test_vocab_of_synthetic_corpus_is_template_plus_reserved():
    cfg = SynthConfig()
    v = build_vocab(synth_generate(0, 200, cfg), min_freq=1)
    assert len(v) == len(cfg.template_tokens()) + 4 == 2 + 8 + 24 + 4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), max_size=6), min_size=1, max_size=8), st.integers(1, 4))
def test_vocab_kept_tokens_meet_min_freq(captions, k):
    samples = [sample_with(c) for c in captions]
    v = build_vocab(samples, min_freq=k)
    counts = {}
    for c in captions:
        for t in c:
            counts[t] = counts.get(t, 0) + 1
    assert set(v.itos[4:]) == {t for t, c in counts.items() if c >= k}
    assert len(set(v.itos)) == len(v.itos)


# ---------------------------------------------------------------- splits


def test_split_ratios_and_disjointness():
    samples = synth_generate(0, 100, SMALL)
    split = split_dataset(samples, seed=3)
    assert (len(split.train), len(split.val), len(split.test)) == (65, 5, 30)
    ids = [{s.video_id for s in part} for part in (split.train, split.val, split.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    with pytest.raises(ValueError):
        split_dataset(samples, ratios=(0.5, 0.5, 0.5))


def test_split_keeps_duplicate_ids_together():
    samples = synth_generate(0, 10, SMALL)
    dup = samples + [VideoSample(s.video_id, s.frame_feats, s.part_feats, s.aspects, s.caption) for s in samples]
    split = split_dataset(dup, seed=1)
    for part in (split.train, split.val, split.test):
        others = [q for q in (split.train, split.val, split.test) if q is not part]
        ids = {s.video_id for s in part}
        assert all(not ids & {s.video_id for s in o} for o in others)


# ---------------------------------------------------------------- config


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlr = 0.5\nepochs=3\nvariant = poet\nnames = a, b,c\nflag = true\n")
    assert read_config(p) == {"lr": 0.5, "epochs": 3, "variant": "poet", "names": ["a", "b", "c"], "flag": True}
    p.write_text("novalue\n")
    with pytest.raises(DataError, match=":1:"):
        read_config(p)


def test_synth_config_rejects_unknown_keys():
    with pytest.raises(DataError):
        SynthConfig.from_dict({"bogus": 1})
    assert SynthConfig.from_dict({"aspect_alphabet": ["x", "y"], "max_aspects": 2}).aspect_alphabet == ["x", "y"]


# ---------------------------------------------------------------- synthetic generator


def test_synth_deterministic():
    a, b = synth_generate(7, 20, SMALL), synth_generate(7, 20, SMALL)
    for s, t in zip(a, b):
        assert s.video_id == t.video_id
        assert np.array_equal(s.frame_feats, t.frame_feats) and np.array_equal(s.part_feats, t.part_feats)
        assert s.aspects == t.aspects and s.caption == t.caption


def test_oracle_caption_example():
    # generator stores relevant aspects sorted
    cap = oracle_caption(SynthLatent(highlight=3, relevant=sorted(["red", "cotton"])), SynthConfig())
    assert cap == [SOS, "this", "hem", "is", "cotton", "red", EOS]
    assert oracle_caption(SynthLatent(0, []), SynthConfig()) == [SOS, "this", "collar", "is", EOS]


def test_synth_captions_follow_latent_state():
    cfg = SynthConfig(n_frames=4, n_parts=5)
    samples, latents = synth_generate(11, 80, cfg, with_latent=True)
    sig = cfg.signatures()
    for s, z in zip(samples, latents):
        assert s.caption == oracle_caption(z, cfg)
        assert set(z.relevant) <= set(s.aspects)
        assert all(a not in s.words() for a in s.aspects if a not in z.relevant)
        assert 2 <= len(s.aspects) <= 6
    # highlight part is shifted by +2 on average
    shift = np.mean([s.part_feats[:, z.highlight].mean() for s, z in zip(samples, latents)])
    assert 1.7 < shift < 2.3
    # frame features are the signature sum plus zero-mean noise
    resid = [s.frame_feats.mean(0) - sum(sig[cfg.aspect_alphabet.index(a)] for a in z.relevant)
             for s, z in zip(samples, latents)]
    assert abs(np.mean(resid)) < 0.05


def test_synth_max_mode_shifts_a_single_frame():
    cfg = SynthConfig(n_frames=6, n_parts=3, highlight_mode="max", highlight_mean=50.0)
    samples, latents = synth_generate(2, 10, cfg, with_latent=True)
    for s, z in zip(samples, latents):
        big = np.argwhere(s.part_feats.mean(axis=2) > 25)
        assert big.tolist() == [[big[0][0], z.highlight]]


def test_synth_alphabet_too_small():
    with pytest.raises(ValueError):
        synth_generate(0, 1, SynthConfig(aspect_alphabet=["a", "b"], max_aspects=3))


def test_collate_masks():
    samples = synth_generate(0, 4, SMALL)
    v = build_vocab(samples, 1)
    b = collate(samples, v)
    assert b.aspect_ids.shape[0] == 4 and b.frame_feats.shape == (4, 3, 4)
    for i, s in enumerate(samples):
        assert b.aspect_mask[i].sum() == len(s.aspects)
        assert v.decode(b.caption_ids[i][b.caption_mask[i]], strip=False) == s.caption
        assert (b.caption_ids[i][~b.caption_mask[i]] == v.pad_id).all()
