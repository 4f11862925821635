"""Graph encoders: multi-head-attention transformer and gated GCN.

Both map a batch of coordinate sets (B, n, 2) to per-node embeddings
(B, n, d) plus a graph embedding (B, d) that is the mean over nodes. No
positional encodings, so both are equivariant under node permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, uniform_init

ENCODER_KINDS = ("gat", "gcn")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "gat"
    layers: int = 3
    embed_dim: int = 128
    heads: int = 8          # transformer only
    ff_dim: int = 512       # transformer only

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kind == "gat" and self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "layers": self.layers, "embed_dim": self.embed_dim,
                "heads": self.heads, "ff_dim": self.ff_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: d[k] for k in ("kind", "layers", "embed_dim", "heads", "ff_dim")})


@dataclass
class Embeddings:
    node: Tensor   # (B, n, d)
    graph: Tensor  # (B, d), mean of node embeddings


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> tuple[dict[str, Tensor], dict[str, BatchNormState]]:
    """Fresh encoder parameters and batch-norm running stats."""
    d = cfg.embed_dim
    params: dict[str, Tensor] = {}
    states: dict[str, BatchNormState] = {}

    def linear(name: str, fan_in: int, fan_out: int):
        params[f"{name}.w"] = uniform_init((fan_in, fan_out), fan_in, rng)
        params[f"{name}.b"] = uniform_init((fan_out,), fan_in, rng)

    def bn(name: str):
        params[f"{name}.gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(d), requires_grad=True)
        states[name] = BatchNormState(d)

    linear("enc.embed", 2, d)
    if cfg.kind == "gat":
        for i in range(cfg.layers):
            for w in ("wq", "wk", "wv", "wo"):
                params[f"enc.l{i}.attn.{w}"] = uniform_init((d, d), d, rng)
            bn(f"enc.l{i}.bn1")
            linear(f"enc.l{i}.ff1", d, cfg.ff_dim)
            linear(f"enc.l{i}.ff2", cfg.ff_dim, d)
            bn(f"enc.l{i}.bn2")
    else:
        linear("enc.edge_embed", 1, d)
        for i in range(cfg.layers):
            for w in ("node_u", "node_v", "edge_u", "edge_v"):
                linear(f"enc.l{i}.{w}", d, d)
            bn(f"enc.l{i}.bn_node")
            bn(f"enc.l{i}.bn_edge")
    return params, states


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, n, d) -> (B, heads, n, d/heads)."""
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    """(B, heads, n, dh) -> (B, n, heads*dh)."""
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _bn_nodes(x: Tensor, params, states, name: str, training: bool) -> Tensor:
    """Batch norm over all node rows of a (B, n, d) tensor."""
    b, n, d = x.shape
    flat = ad.reshape(x, (b * n, d))
    out = ad.batch_norm(flat, params[f"{name}.gamma"], params[f"{name}.beta"], states[name], training)
    return ad.reshape(out, (b, n, d))


def _encode_gat(cfg, params, states, coords: np.ndarray, training: bool) -> Embeddings:
    b, n, _ = coords.shape
    scale = 1.0 / np.sqrt(cfg.embed_dim // cfg.heads)
    h = ad.add(ad.matmul(Tensor(coords), params["enc.embed.w"]), params["enc.embed.b"])
    for i in range(cfg.layers):
        p = f"enc.l{i}"
        q = _split_heads(ad.matmul(h, params[f"{p}.attn.wq"]), cfg.heads)
        k = _split_heads(ad.matmul(h, params[f"{p}.attn.wk"]), cfg.heads)
        v = _split_heads(ad.matmul(h, params[f"{p}.attn.wv"]), cfg.heads)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
        attn = ad.softmax(scores)
        mixed = ad.matmul(_merge_heads(ad.matmul(attn, v)), params[f"{p}.attn.wo"])
        h = _bn_nodes(ad.add(h, mixed), params, states, f"{p}.bn1", training)
        ff = ad.relu(ad.add(ad.matmul(h, params[f"{p}.ff1.w"]), params[f"{p}.ff1.b"]))
        ff = ad.add(ad.matmul(ff, params[f"{p}.ff2.w"]), params[f"{p}.ff2.b"])
        h = _bn_nodes(ad.add(h, ff), params, states, f"{p}.bn2", training)
    return Embeddings(node=h, graph=ad.tmean(h, axis=1))


def _bn_edges(e: Tensor, params, states, name: str, training: bool) -> Tensor:
    b, n, m, d = e.shape
    flat = ad.reshape(e, (b * n * m, d))
    out = ad.batch_norm(flat, params[f"{name}.gamma"], params[f"{name}.beta"], states[name], training)
    return ad.reshape(out, (b, n, m, d))


def _encode_gcn(cfg, params, states, coords: np.ndarray, training: bool) -> Embeddings:
    b, n, _ = coords.shape
    diffs = coords[:, :, None, :] - coords[:, None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=-1))[..., None]  # (B, n, n, 1)
    x = ad.add(ad.matmul(Tensor(coords), params["enc.embed.w"]), params["enc.embed.b"])
    e = ad.add(ad.matmul(Tensor(dists), params["enc.edge_embed.w"]), params["enc.edge_embed.b"])
    for i in range(cfg.layers):
        p = f"enc.l{i}"
        ue = ad.add(ad.matmul(e, params[f"{p}.edge_u.w"]), params[f"{p}.edge_u.b"])
        vx = ad.add(ad.matmul(x, params[f"{p}.edge_v.w"]), params[f"{p}.edge_v.b"])
        e_new = ad.add(ue, ad.add(ad.reshape(vx, (b, 1, n, -1)), ad.reshape(vx, (b, n, 1, -1))))
        gate = ad.sigmoid(e_new)
        ux = ad.add(ad.matmul(x, params[f"{p}.node_u.w"]), params[f"{p}.node_u.b"])
        wx = ad.add(ad.matmul(x, params[f"{p}.node_v.w"]), params[f"{p}.node_v.b"])
        num = ad.tsum(ad.mul(gate, ad.reshape(wx, (b, 1, n, -1))), axis=2)
        den = ad.add(ad.tsum(gate, axis=2), 1e-20)
        x_new = ad.add(ux, ad.div(num, den))
        x = ad.add(x, ad.relu(_bn_nodes(x_new, params, states, f"{p}.bn_node", training)))
        e = ad.add(e, ad.relu(_bn_edges(e_new, params, states, f"{p}.bn_edge", training)))
    return Embeddings(node=x, graph=ad.tmean(x, axis=1))


def encode(cfg: EncoderConfig, params, states, coords: np.ndarray, training: bool = False) -> Embeddings:
    """Embed a (B, n, 2) coordinate batch. All instances in a batch share n."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise ValueError(f"coords must be (B, n, 2), got {coords.shape}")
    if cfg.kind == "gat":
        return _encode_gat(cfg, params, states, coords, training)
    return _encode_gcn(cfg, params, states, coords, training)
