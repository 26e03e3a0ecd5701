"""SGD training loop, evaluation and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .dataio import MAX_CAPTION_LEN, VideoSample, Vocabulary, collate
from .decoder import generate, teacher_forced_loss
from .encoder import canonical_variant, encode
from .metrics import CorpusPair, EvalReport, evaluate_corpus
from .params import ModelConfig, PoetParams, init_params, save_checkpoint
from .vidgraph import GraphConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    variant: str = "poet"
    layers: int = 2
    max_caption_len: int = MAX_CAPTION_LEN
    clip: float = 5.0
    node_dim: int = 32
    aspect_dim: int = 32
    word_dim: int = 64
    beam: int = 1

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.lr < 0 or self.clip <= 0:
            raise ValueError("lr must be >= 0 and clip > 0")
        for name in ("batch_size", "epochs", "max_caption_len", "node_dim", "aspect_dim", "word_dim", "beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.layers < 0:
            raise ValueError("TrainConfig.layers must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: PoetParams
    loss_curve: list[float]
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def model_config_for(samples: Sequence[VideoSample], vocab: Vocabulary, cfg: TrainConfig) -> ModelConfig:
    s = samples[0]
    graph = GraphConfig(s.n_frames, s.n_parts, s.frame_feats.shape[1], s.part_feats.shape[2],
                        cfg.node_dim, cfg.aspect_dim)
    return ModelConfig(graph, len(vocab), word_dim=cfg.word_dim, layers=cfg.layers)


def batch_loss(batch, params: PoetParams, variant: str):
    nodes, _ = encode(batch, params, variant)
    return teacher_forced_loss(batch, nodes, params.decoder)


def clip_scale(grads: Sequence[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads))
    return 1.0 if norm <= max_norm or norm == 0.0 else max_norm / norm


def sgd_step(params: PoetParams, lr: float, max_norm: float) -> float:
    """Apply ``p -= lr * clip(grad)`` in place; returns the clip factor used."""
    tensors = params.tensors()
    scale = clip_scale([t.grad for t in tensors], max_norm)
    for t in tensors:
        t.data -= (lr * scale) * t.grad
    return scale


def evaluate_loss(samples: Sequence[VideoSample], params: PoetParams, vocab: Vocabulary,
                  variant: str, batch_size: int = 64) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i: i + batch_size]
            total += batch_loss(collate(chunk, vocab), params, variant).item() * len(chunk)
    return total / len(samples)


def train(samples: Sequence[VideoSample], vocab: Vocabulary, cfg: TrainConfig,
          val: Sequence[VideoSample] | None = None, checkpoint_dir: str | Path | None = None,
          params: PoetParams | None = None, steps: int | None = None) -> TrainResult:
    """Mini-batch SGD with global-norm clipping.

    ``steps`` caps the total number of parameter updates (useful for
    single-sample memorisation).  With a validation set the returned params
    are those of the epoch with the lowest validation loss.
    """
    if not samples:
        raise TrainingError("empty training split")
    samples = list(samples)
    init_seed, order_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if params is None:
        params = init_params(model_config_for(samples, vocab, cfg), int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(order_seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params, [])
    best_val, best_state = math.inf, None
    done = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_loss, seen = 0.0, 0
        for b, start in enumerate(range(0, len(samples), cfg.batch_size)):
            if steps is not None and done >= steps:
                break
            chunk = [samples[k] for k in order[start: start + cfg.batch_size]]
            batch = collate(chunk, vocab)
            params.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(batch, params, cfg.variant)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b} "
                                    f"(videos {batch.video_ids[:3]}...): {exc}") from None
            tape.backward(loss)
            sgd_step(params, cfg.lr, cfg.clip)
            epoch_loss += loss.item() * len(chunk)
            seen += len(chunk)
            done += 1
        if seen == 0:
            break
        result.loss_curve.append(epoch_loss / seen)
        if val:
            v = evaluate_loss(val, params, vocab, cfg.variant)
            result.val_curve.append(v)
            if v < best_val:
                best_val, best_state, result.best_epoch = v, params.state_dict(), epoch
        if ckpt is not None:
            save_checkpoint(ckpt / "last.ckpt", params, vocab.to_list(), cfg.variant)
            if result.best_epoch == epoch:
                save_checkpoint(ckpt / "best.ckpt", params, vocab.to_list(), cfg.variant)
        log.debug("epoch %d loss %.4f", epoch, result.loss_curve[-1])
    if best_state is not None:
        params.load_state_dict(best_state)
    return result


def write_loss_curve(path: str | Path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(curve):
            w.writerow([e, repr(float(v))])


# ---------------------------------------------------------------- evaluation


def predict(samples: Sequence[VideoSample], params: PoetParams, vocab: Vocabulary, variant: str,
            beam: int = 1, max_len: int = MAX_CAPTION_LEN, batch_size: int = 64) -> list[list[str]]:
    out = []
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i: i + batch_size], vocab)
        out.extend(vocab.decode(ids) for ids in generate(batch, params, variant, beam, max_len))
    return out


def corpus_for(samples: Sequence[VideoSample], candidates: Sequence[list[str]]) -> list[CorpusPair]:
    return [CorpusPair(list(c), s.words(), list(s.aspects)) for s, c in zip(samples, candidates)]


def evaluate(samples: Sequence[VideoSample], params: PoetParams, vocab: Vocabulary, variant: str,
             beam: int = 1, max_len: int = MAX_CAPTION_LEN) -> EvalReport:
    return evaluate_corpus(corpus_for(samples, predict(samples, params, vocab, variant, beam, max_len)))


ABLATION_VARIANTS = ("poet", "poet_minus_kl", "gcn_minus_kl")


def run_ablation(train_set: Sequence[VideoSample], test_set: Sequence[VideoSample], vocab: Vocabulary,
                 cfg: TrainConfig, variants: Sequence[str] = ABLATION_VARIANTS,
                 val: Sequence[VideoSample] | None = None) -> dict[str, EvalReport]:
    """Train each variant from the same seed and score it on the test split."""
    reports = {}
    for v in variants:
        name = canonical_variant(v)
        vcfg = TrainConfig.from_dict({**cfg.__dict__, "variant": name})
        res = train(train_set, vocab, vcfg, val=val)
        reports[name] = evaluate(test_set, res.params, vocab, name, beam=cfg.beam, max_len=cfg.max_caption_len)
    return reports


def format_ablation(reports: dict[str, EvalReport]) -> str:
    cols = ["bleu1", "meteor_lite", "rouge_l", "cider", "aspect_capture", "unique_4grams", "unique_5grams"]
    width = max(len(k) for k in reports) if reports else 7
    lines = [f"{'variant':<{width}}  " + "  ".join(f"{c:>14}" for c in cols)]
    for name, rep in reports.items():
        d = rep.to_dict()
        cells = [f"{d[c]:>14.4f}" if isinstance(d[c], float) else f"{d[c]:>14d}" for c in cols]
        lines.append(f"{name:<{width}}  " + "  ".join(cells))
    return "\n".join(lines)
