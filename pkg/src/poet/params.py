"""The complete learnable parameter set, its initialisation and checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"POETCKPT"
    version    u32      1
    graph      6 x u32  n_frames, n_parts, frame_dim, part_dim, node_dim, aspect_dim
    meta       u32 length + UTF-8 JSON (vocabulary, decoder dims, layer count, variant)
    count      u32      number of tensors
    tensor     u16 name length, name, u8 ndim, ndim x u32 extents, float64 payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .decoder import DecoderParams
from .encoder import GcnParams, KlParams, StiParams
from .vidgraph import GraphConfig, GraphEmbeddings

MAGIC = b"POETCKPT"
VERSION = 1

EMBEDDINGS = {"order_part", "order_frame", "part_type", "frame_type", "aspect_embed", "word_embed"}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    graph: GraphConfig
    vocab_size: int
    word_dim: int = 64
    memory_dim: int = 0  # 0 -> node_dim
    attn_dim: int = 0  # 0 -> node_dim
    layers: int = 2

    @property
    def d_mem(self) -> int:
        return self.memory_dim or self.graph.node_dim

    @property
    def d_att(self) -> int:
        return self.attn_dim or self.graph.node_dim


@dataclass
class PoetParams:
    config: ModelConfig
    graph: GraphEmbeddings
    sti: list[StiParams]
    gcn: list[GcnParams]
    kl: list[KlParams]
    aspect_embed: Tensor
    decoder: DecoderParams

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Every learnable tensor with a stable dotted name."""
        for f in fields(self.graph):
            yield f"graph.{f.name}", getattr(self.graph, f.name)
        for group in ("sti", "gcn", "kl"):
            for k, block in enumerate(getattr(self, group)):
                for f in fields(block):
                    yield f"{group}.{k}.{f.name}", getattr(block, f.name)
        yield "aspect_embed", self.aspect_embed
        for f in fields(self.decoder):
            yield f"decoder.{f.name}", getattr(self.decoder, f.name)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        if set(own) != set(state):
            raise CheckpointError(f"tensor names differ: {sorted(set(own) ^ set(state))}")
        for k, t in own.items():
            if t.shape != state[k].shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} does not match {t.shape}")
            t.data[...] = state[k]

    def copy(self) -> "PoetParams":
        clone = build_params(self.config, lambda name, shape: np.zeros(shape))
        clone.load_state_dict(self.state_dict())
        return clone


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    g = cfg.graph
    d, v = g.node_dim, cfg.vocab_size
    out = {
        "graph.order_part": (g.n_frames, g.part_dim),
        "graph.order_frame": (g.n_frames, g.frame_dim),
        "graph.part_type": (g.n_parts, g.part_dim),
        "graph.frame_type": (g.frame_dim,),
        "graph.w_part": (d, g.part_dim),
        "graph.b_part": (d,),
        "graph.w_frame": (d, g.frame_dim),
        "graph.b_frame": (d,),
        "graph.w_edge": (1, 2 * d),
        "graph.b_edge": (1,),
    }
    for k in range(cfg.layers):
        for n in ("n", "r", "na", "ra"):
            out[f"sti.{k}.w_{n}"] = (d, d)
            out[f"sti.{k}.b_{n}"] = (d,)
    for k in range(cfg.layers):
        out[f"gcn.{k}.weight"] = (d, d)
    for k in range(cfg.layers):
        out.update({
            f"kl.{k}.w_h": (1, g.aspect_dim + d), f"kl.{k}.b_h": (1,),
            f"kl.{k}.w_a": (d, g.aspect_dim), f"kl.{k}.b_a": (d,),
            f"kl.{k}.w_gl": (d, d), f"kl.{k}.b_gl": (d,),
            f"kl.{k}.w_m": (cfg.d_mem, 2 * d), f"kl.{k}.b_m": (cfg.d_mem,),
            f"kl.{k}.w_omega": (1, cfg.d_mem),
        })
    out["aspect_embed"] = (v, g.aspect_dim)
    out.update({
        "decoder.word_embed": (v, cfg.word_dim),
        "decoder.w_x": (3 * d, cfg.word_dim + d), "decoder.b_x": (3 * d,),
        "decoder.u_zr": (2 * d, d), "decoder.u_h": (d, d),
        "decoder.w_md": (cfg.d_att, 2 * d), "decoder.b_md": (cfg.d_att,),
        "decoder.w_rho": (1, cfg.d_att),
        "decoder.w_out": (v, d), "decoder.b_out": (v,),
    })
    return out


def build_params(cfg: ModelConfig, fill) -> PoetParams:
    """Assemble a PoetParams whose tensors come from ``fill(name, shape)``."""
    t = {name: Tensor(fill(name, shape), requires_grad=True, name=name) for name, shape in _shapes(cfg).items()}

    def block(cls, prefix):
        return cls(**{f.name: t[f"{prefix}.{f.name}"] for f in fields(cls)})

    return PoetParams(
        config=cfg,
        graph=block(GraphEmbeddings, "graph"),
        sti=[block(StiParams, f"sti.{k}") for k in range(cfg.layers)],
        gcn=[block(GcnParams, f"gcn.{k}") for k in range(cfg.layers)],
        kl=[block(KlParams, f"kl.{k}") for k in range(cfg.layers)],
        aspect_embed=t["aspect_embed"],
        decoder=block(DecoderParams, "decoder"),
    )


def init_params(cfg: ModelConfig, seed: int) -> PoetParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, N(0, 0.02) embeddings."""
    rng = np.random.default_rng(seed)

    def fill(name: str, shape):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in EMBEDDINGS:
            return rng.normal(0.0, 0.02, size=shape)
        if leaf.startswith("b_"):
            return np.zeros(shape)
        bound = 1.0 / np.sqrt(shape[-1])
        return rng.uniform(-bound, bound, size=shape)

    return build_params(cfg, fill)


# ---------------------------------------------------------------- checkpoints


def _config_to_meta(cfg: ModelConfig, extra: dict) -> dict:
    d = asdict(cfg)
    d.pop("graph")
    return {**d, **extra}


def save_checkpoint(path: str | Path, params: PoetParams, vocab: list[str] | None = None,
                    variant: str | None = None) -> None:
    g = params.config.graph
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<6I", g.n_frames, g.n_parts, g.frame_dim, g.part_dim, g.node_dim, g.aspect_dim))
    meta = json.dumps(_config_to_meta(params.config, {"vocab": vocab, "variant": variant}),
                      sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    named = list(params.named_tensors())
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[PoetParams, dict]:
    """Return (params, meta) where meta carries ``vocab`` and ``variant``."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    graph = GraphConfig(*take("<6I"))
    (meta_len,) = take("<I")
    if pos + meta_len > len(data):
        raise CheckpointError(f"{path}: truncated metadata")
    meta = json.loads(bytes(view[pos: pos + meta_len]).decode("utf-8"))
    pos += meta_len
    cfg = ModelConfig(graph=graph, vocab_size=meta["vocab_size"], word_dim=meta["word_dim"],
                      memory_dim=meta["memory_dim"], attn_dim=meta["attn_dim"], layers=meta["layers"])
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (n,) = take("<H")
        name = bytes(view[pos: pos + n]).decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        state[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    params = build_params(cfg, lambda name, shape: np.zeros(shape))
    params.load_state_dict(state)
    return params, meta
