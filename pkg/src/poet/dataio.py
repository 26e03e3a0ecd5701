"""Dataset records, vocabulary, JSON Lines I/O and the synthetic video generator."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)
MAX_ASPECTS = 12
MAX_CAPTION_LEN = 30


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class VideoSample:
    video_id: str
    frame_feats: np.ndarray  # (N_f, D_f)
    part_feats: np.ndarray  # (N_f, N_p, D_p)
    aspects: list[str]
    caption: list[str]  # wrapped: [<sos>, ..., <eos>]

    @property
    def n_frames(self) -> int:
        return self.frame_feats.shape[0]

    @property
    def n_parts(self) -> int:
        return self.part_feats.shape[1]

    def words(self) -> list[str]:
        """Caption tokens without the sos/eos wrapper."""
        return [t for t in self.caption if t not in (SOS, EOS, PAD)]


def wrap_caption(tokens: Sequence[str], max_len: int = MAX_CAPTION_LEN) -> list[str]:
    """Strip any existing markers, truncate to ``max_len`` and add sos/eos."""
    body = [t for t in tokens if t not in (SOS, EOS)]
    return [SOS, *body[:max_len], EOS]


def validate_sample(s: VideoSample, n_frames: int | None = None, n_parts: int | None = None,
                    frame_dim: int | None = None, part_dim: int | None = None,
                    max_caption_len: int = MAX_CAPTION_LEN) -> None:
    ff, pf = s.frame_feats, s.part_feats
    if ff.ndim != 2:
        raise DataError(f"{s.video_id}: frame_feats must be 2-d, got shape {ff.shape}")
    if pf.ndim != 3:
        raise DataError(f"{s.video_id}: part_feats must be 3-d, got shape {pf.shape}")
    if n_frames is not None and ff.shape[0] != n_frames:
        raise DataError(f"{s.video_id}: expected {n_frames} frames, got {ff.shape[0]}")
    if pf.shape[0] != ff.shape[0]:
        raise DataError(f"{s.video_id}: expected {ff.shape[0]} part frames, got {pf.shape[0]}")
    if n_parts is not None and pf.shape[1] != n_parts:
        raise DataError(f"{s.video_id}: expected {n_parts} parts per frame, got {pf.shape[1]}")
    if frame_dim is not None and ff.shape[1] != frame_dim:
        raise DataError(f"{s.video_id}: expected frame dim {frame_dim}, got {ff.shape[1]}")
    if part_dim is not None and pf.shape[2] != part_dim:
        raise DataError(f"{s.video_id}: expected part dim {part_dim}, got {pf.shape[2]}")
    if not (np.isfinite(ff).all() and np.isfinite(pf).all()):
        raise DataError(f"{s.video_id}: non-finite feature value")
    if len(s.aspects) > MAX_ASPECTS:
        raise DataError(f"{s.video_id}: {len(s.aspects)} aspects exceeds {MAX_ASPECTS}")
    if len(s.caption) < 2 or s.caption[0] != SOS or s.caption[-1] != EOS:
        raise DataError(f"{s.video_id}: caption must be wrapped in {SOS}/{EOS}")
    if len(s.caption) > max_caption_len + 2:
        raise DataError(f"{s.video_id}: caption longer than {max_caption_len} tokens")


# ---------------------------------------------------------------- JSON Lines


def _sample_to_record(s: VideoSample) -> dict:
    return {
        "video_id": s.video_id,
        "frame_feats": s.frame_feats.tolist(),
        "part_feats": s.part_feats.tolist(),
        "aspects": list(s.aspects),
        "caption": s.words(),
    }


def write_jsonl(path: str | Path, samples: Iterable[VideoSample]) -> None:
    samples = list(samples)
    with open(path, "w", encoding="utf-8") as fh:
        if samples:
            s0 = samples[0]
            header = {"header": {"n_frames": s0.n_frames, "n_parts": s0.n_parts,
                                 "frame_dim": s0.frame_feats.shape[1],
                                 "part_dim": s0.part_feats.shape[2]}}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_to_record(s), sort_keys=True) + "\n")


def load_jsonl(path: str | Path, n_frames: int | None = None, n_parts: int | None = None,
               max_caption_len: int = MAX_CAPTION_LEN) -> list[VideoSample]:
    """Read and validate one sample per line.

    An optional first line ``{"header": {...}}`` declares the feature dims;
    explicit ``n_frames``/``n_parts`` arguments must agree with it.  Without a
    header the first record fixes the dims for the rest of the file.
    """
    dims: dict[str, int | None] = {"n_frames": n_frames, "n_parts": n_parts,
                                   "frame_dim": None, "part_dim": None}
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if "header" in obj:
                for k, v in obj["header"].items():
                    if k not in dims:
                        raise DataError(f"{path}:{lineno}: unknown header key {k!r}")
                    if dims[k] is not None and dims[k] != v:
                        raise DataError(f"{path}:{lineno}: header {k}={v} but expected {dims[k]}")
                    dims[k] = int(v)
                continue
            missing = {"video_id", "frame_feats", "part_feats", "aspects", "caption"} - obj.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            try:
                ff = np.asarray(obj["frame_feats"], dtype=np.float64)
                pf = np.asarray(obj["part_feats"], dtype=np.float64)
            except (ValueError, TypeError):
                raise DataError(f"{path}:{lineno}: ragged or non-numeric features") from None
            s = VideoSample(str(obj["video_id"]), ff, pf, [str(a) for a in obj["aspects"]],
                            wrap_caption(obj["caption"], max_caption_len))
            try:
                validate_sample(s, dims["n_frames"], dims["n_parts"], dims["frame_dim"],
                                dims["part_dim"], max_caption_len)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if dims["n_frames"] is None:
                dims.update(n_frames=s.n_frames, n_parts=s.n_parts,
                            frame_dim=ff.shape[1], part_dim=pf.shape[2])
            samples.append(s)
    return samples


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token/id mapping shared by aspects and captions.

    Ids 0..3 are reserved for pad, sos, eos and unk; the remaining tokens are
    sorted so that two builds from the same corpus agree exactly.
    """

    def __init__(self, tokens: Iterable[str]):
        kept = sorted(set(tokens) - set(RESERVED))
        self.itos: list[str] = [*RESERVED, *kept]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    pad_id, sos_id, eos_id, unk_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = [self.itos[i] for i in ids]
        if strip:
            out = [t for t in out if t not in (PAD, SOS, EOS)]
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        v = cls(itos[4:])
        if v.itos != list(itos):
            raise DataError("vocabulary list is not in canonical order")
        return v


def build_vocab(train: Sequence[VideoSample], min_freq: int = 30) -> Vocabulary:
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if not train:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for s in train:
        counts.update(s.aspects)
        counts.update(s.words())
    return Vocabulary(t for t, c in counts.items() if c >= min_freq)


# ---------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    train: list[VideoSample]
    val: list[VideoSample]
    test: list[VideoSample]
    ratios: tuple[float, float, float] = (0.65, 0.05, 0.30)


def split_dataset(samples: Sequence[VideoSample], seed: int = 0,
                  ratios: tuple[float, float, float] = (0.65, 0.05, 0.30)) -> DatasetSplit:
    """Random split by unique video_id."""
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    ids = sorted({s.video_id for s in samples})
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    bucket = {}
    for rank, k in enumerate(order):
        bucket[ids[k]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    parts: list[list[VideoSample]] = [[], [], []]
    for s in samples:
        parts[bucket[s.video_id]].append(s)
    return DatasetSplit(*parts, ratios=ratios)


# ---------------------------------------------------------------- config files


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [parse_value(p) for p in text.split(",") if p.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; commas make lists."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = parse_value(v)
    return out


# ---------------------------------------------------------------- synthetic data


DEFAULT_PART_NAMES = ("collar", "sleeve", "cuff", "hem", "waistline", "pocket", "button", "zipper")
DEFAULT_ASPECTS = (
    "black", "blue", "casual", "cotton", "denim", "floral", "green", "knit",
    "lace", "linen", "long", "loose", "plaid", "red", "short", "silk",
    "slim", "striped", "summer", "white", "winter", "wool", "vintage", "yellow",
)


@dataclass
class SynthConfig:
    n_frames: int = 30
    n_parts: int = 8
    frame_dim: int = 32
    part_dim: int = 16
    part_names: list[str] = field(default_factory=lambda: list(DEFAULT_PART_NAMES))
    aspect_alphabet: list[str] = field(default_factory=lambda: list(DEFAULT_ASPECTS))
    min_aspects: int = 2
    max_aspects: int = 6
    relevant_prob: float = 0.5
    highlight_mean: float = 2.0
    frame_noise: float = 1.0
    # "mean": highlight part is shifted in every frame.
    # "max": highlight part is shifted in a single random frame, so only the
    # cross-frame maximum of its activations singles it out.
    highlight_mode: str = "mean"
    alphabet_seed: int = 12345

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown SynthConfig keys {sorted(unknown)}")
        kw = dict(d)
        for k in ("part_names", "aspect_alphabet"):
            if k in kw and not isinstance(kw[k], list):
                kw[k] = [kw[k]]
            if k in kw:
                kw[k] = [str(x) for x in kw[k]]
        return cls(**kw)

    def template_tokens(self) -> set[str]:
        return {"this", "is", *self.part_names[: self.n_parts], *self.aspect_alphabet}

    def signatures(self) -> np.ndarray:
        """Fixed random unit vector per aspect token, independent of the sample seed."""
        rng = np.random.default_rng(self.alphabet_seed)
        sig = rng.standard_normal((len(self.aspect_alphabet), self.frame_dim))
        return sig / np.linalg.norm(sig, axis=1, keepdims=True)


@dataclass
class SynthLatent:
    """Generator state behind one sample (exposed for oracle checks)."""

    highlight: int
    relevant: list[str]


def synth_generate(seed: int, n: int, cfg: SynthConfig | None = None,
                   with_latent: bool = False):
    """Generate ``n`` samples whose captions are a function of hidden state.

    Each video has a highlight part whose features are shifted by
    ``highlight_mean``; a random subset of its aspects is "relevant" and
    their signature vectors are added to every frame feature.  The caption
    names the highlight part and lists the relevant aspects in sorted order.
    """
    cfg = cfg or SynthConfig()
    if cfg.n_parts > len(cfg.part_names):
        raise ValueError(f"need {cfg.n_parts} part names, alphabet has {len(cfg.part_names)}")
    if cfg.max_aspects > len(cfg.aspect_alphabet):
        raise ValueError(f"cannot draw {cfg.max_aspects} aspects from {len(cfg.aspect_alphabet)}")
    if not 1 <= cfg.min_aspects <= cfg.max_aspects <= MAX_ASPECTS:
        raise ValueError("aspect count bounds must satisfy 1 <= min <= max <= 12")
    if cfg.highlight_mode not in ("mean", "max"):
        raise ValueError(f"unknown highlight_mode {cfg.highlight_mode!r}")
    rng = np.random.default_rng(seed)
    sig = cfg.signatures()
    nf, npart = cfg.n_frames, cfg.n_parts
    samples, latents = [], []
    for k in range(n):
        j_star = int(rng.integers(npart))
        parts = rng.standard_normal((nf, npart, cfg.part_dim))
        if cfg.highlight_mode == "mean":
            parts[:, j_star, :] += cfg.highlight_mean
        else:
            parts[int(rng.integers(nf)), j_star, :] += cfg.highlight_mean
        n_asp = int(rng.integers(cfg.min_aspects, cfg.max_aspects + 1))
        chosen = rng.choice(len(cfg.aspect_alphabet), size=n_asp, replace=False)
        relevant_mask = rng.random(n_asp) < cfg.relevant_prob
        frames = cfg.frame_noise * rng.standard_normal((nf, cfg.frame_dim))
        for a, rel in zip(chosen, relevant_mask):
            if rel:
                frames += sig[a]
        aspects = [cfg.aspect_alphabet[a] for a in chosen]
        relevant = sorted(cfg.aspect_alphabet[a] for a, r in zip(chosen, relevant_mask) if r)
        caption = wrap_caption(["this", cfg.part_names[j_star], "is", *relevant])
        samples.append(VideoSample(f"synth-{seed}-{k:05d}", frames, parts, aspects, caption))
        latents.append(SynthLatent(j_star, relevant))
    return (samples, latents) if with_latent else samples


def oracle_caption(latent: SynthLatent, cfg: SynthConfig) -> list[str]:
    """Caption a perfect decoder would emit given the generator's hidden state."""
    return wrap_caption(["this", cfg.part_names[latent.highlight], "is", *latent.relevant])


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    """Padded arrays for a list of samples sharing N_f, N_p and feature dims."""

    video_ids: list[str]
    frame_feats: np.ndarray  # (B, N_f, D_f)
    part_feats: np.ndarray  # (B, N_f, N_p, D_p)
    aspect_ids: np.ndarray  # (B, A) int, pad where masked
    aspect_mask: np.ndarray  # (B, A) bool
    caption_ids: np.ndarray  # (B, L) int incl. sos/eos, pad after eos
    caption_mask: np.ndarray  # (B, L) bool

    def __len__(self) -> int:
        return len(self.video_ids)


def collate(samples: Sequence[VideoSample], vocab: Vocabulary) -> Batch:
    if not samples:
        raise DataError("cannot collate an empty batch")
    b = len(samples)
    a_max = max(1, max(len(s.aspects) for s in samples))
    l_max = max(len(s.caption) for s in samples)
    aspect_ids = np.full((b, a_max), vocab.pad_id, dtype=np.intp)
    aspect_mask = np.zeros((b, a_max), dtype=bool)
    caption_ids = np.full((b, l_max), vocab.pad_id, dtype=np.intp)
    caption_mask = np.zeros((b, l_max), dtype=bool)
    for i, s in enumerate(samples):
        aspect_ids[i, : len(s.aspects)] = vocab.encode(s.aspects)
        aspect_mask[i, : len(s.aspects)] = True
        caption_ids[i, : len(s.caption)] = vocab.encode(s.caption)
        caption_mask[i, : len(s.caption)] = True
    return Batch(
        [s.video_id for s in samples],
        np.stack([s.frame_feats for s in samples]),
        np.stack([s.part_feats for s in samples]),
        aspect_ids, aspect_mask, caption_ids, caption_mask,
    )
