"""Finite-difference checks of the full captioning loss on a micro instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataio import Batch, SynthConfig, build_vocab, collate, synth_generate, wrap_caption
from .decoder import teacher_forced_loss
from .encoder import encode
from .params import ModelConfig, PoetParams, init_params
from .vidgraph import GraphConfig


@dataclass
class MicroInstance:
    batch: Batch
    params: PoetParams


def micro_instance(seed: int = 0, node_dim: int = 6, perturb: float = 0.3) -> MicroInstance:
    """Two frames, two parts, three aspects and a four-word caption.

    Parameters are pushed away from their small initial values so that
    gates and attention are not stuck near their linear regime.
    """
    sc = SynthConfig(n_frames=2, n_parts=2, frame_dim=6, part_dim=5, min_aspects=3, max_aspects=3)
    s = synth_generate(seed, 1, sc)[0]
    s.caption = wrap_caption(["this", s.aspects[0], "is", s.aspects[1]])
    vocab = build_vocab([s], 1)
    g = GraphConfig(2, 2, 6, 5, node_dim, 4)
    params = init_params(ModelConfig(g, len(vocab), word_dim=4), seed)
    rng = np.random.default_rng(seed + 1)
    for t in params.tensors():
        t.data += rng.normal(0.0, perturb, size=t.shape)
    return MicroInstance(collate([s], vocab), params)


# groups of parameters, named after the module that owns them
GROUPS = {
    "vidgraph": ("graph.",),
    "encoder.sti": ("sti.",),
    "encoder.kl": ("kl.", "aspect_embed"),
    "decoder": ("decoder.",),
}


def run_suite(seed: int = 0, h: float = 1e-5) -> dict[str, ad.GradCheckResult]:
    """Max relative error per module for the full poet loss (and the GCN baseline)."""
    inst = micro_instance(seed)
    named = dict(inst.params.named_tensors())

    def loss_for(variant):
        def f():
            nodes, _ = encode(inst.batch, inst.params, variant)
            return teacher_forced_loss(inst.batch, nodes, inst.params.decoder)
        return f

    out = {}
    for group, prefixes in GROUPS.items():
        tensors = [t for k, t in named.items() if k.startswith(prefixes)]
        out[group] = ad.gradient_check(loss_for("poet"), tensors, h)
    gcn = [t for k, t in named.items() if k.startswith("gcn.")]
    out["encoder.gcn"] = ad.gradient_check(loss_for("gcn_minus_kl"), gcn, h)
    return out
