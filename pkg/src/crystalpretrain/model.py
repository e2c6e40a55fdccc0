"""Gated graph-convolution encoder over crystal graphs, with projection and
task heads.

Each convolution concatenates anchor, neighbor and edge features, splits the
result through a sigmoid gate and a softplus filter, and adds the aggregated
messages back onto the anchor (residual update). Mean pooling over each
crystal's nodes yields the crystal vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .elements import MAX_Z
from .graphs import CrystalGraph, FeatureTable, init_node_features
from .rng import RngStream

TASKS = ("regression", "binary-classification")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_conv: int = 3
    embed_dim: int = 128
    head_hidden: int = 128

    def __post_init__(self):
        for name in ("hidden_dim", "n_conv", "embed_dim", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def param_spec(cfg: ModelConfig, edge_feature_width: int = 41,
               external_feature_width: int | None = None) -> dict[str, tuple]:
    """Expected name -> shape table for a full parameter set."""
    h = cfg.hidden_dim
    spec: dict[str, tuple] = {}
    if external_feature_width is None:
        spec["atom_embedding"] = (MAX_Z, h)
    else:
        spec["input_projection"] = (external_feature_width, h)
    z_width = 2 * h + edge_feature_width
    for t in range(cfg.n_conv):
        spec[f"conv{t}.gate_weight"] = (z_width, h)
        spec[f"conv{t}.gate_bias"] = (1, h)
        spec[f"conv{t}.self_weight"] = (z_width, h)
        spec[f"conv{t}.self_bias"] = (1, h)
    spec["projection.w1"] = (h, cfg.embed_dim)
    spec["projection.b1"] = (1, cfg.embed_dim)
    spec["projection.w2"] = (cfg.embed_dim, cfg.embed_dim)
    spec["projection.b2"] = (1, cfg.embed_dim)
    spec["head.w1"] = (h, cfg.head_hidden)
    spec["head.b1"] = (1, cfg.head_hidden)
    spec["head.w2"] = (cfg.head_hidden, 1)
    spec["head.b2"] = (1, 1)
    return spec


def init_params(cfg: ModelConfig, seed: int, edge_feature_width: int = 41,
                external_feature_width: int | None = None) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    Normal(0, 1/sqrt(hidden)) embedding rows; a pure function of the seed."""
    params: dict[str, Tensor] = {}
    for name, shape in param_spec(cfg, edge_feature_width, external_feature_width).items():
        gen = RngStream(seed, "init", name).generator()
        if name.endswith("bias") or name in ("projection.b1", "projection.b2",
                                             "head.b1", "head.b2"):
            values = np.zeros(shape)
        elif name == "atom_embedding":
            values = gen.normal(0.0, 1.0 / np.sqrt(cfg.hidden_dim), size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            values = gen.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return params


def encoder_param_names(params: dict[str, Tensor]) -> list[str]:
    return [n for n in params
            if n in ("atom_embedding", "input_projection") or n.startswith("conv")]


def pretrain_param_names(params: dict[str, Tensor]) -> list[str]:
    return encoder_param_names(params) + [n for n in params if n.startswith("projection.")]


def finetune_param_names(params: dict[str, Tensor]) -> list[str]:
    return encoder_param_names(params) + [n for n in params if n.startswith("head.")]


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    ones = Tensor(np.ones((x.shape[0], 1)))
    return ad.add(ad.matmul(x, w), ad.matmul(ones, b))


def cgcnn_conv(node_feats: Tensor, edge_feats: Tensor, src: np.ndarray,
               dst: np.ndarray, gate_weight: Tensor, gate_bias: Tensor,
               self_weight: Tensor, self_bias: Tensor) -> Tensor:
    """One gated residual convolution layer."""
    vi = ad.gather_rows(node_feats, src)
    vj = ad.gather_rows(node_feats, dst)
    z = ad.concat([vi, vj, edge_feats])
    gate = ad.sigmoid(_affine(z, gate_weight, gate_bias))
    filt = ad.softplus(_affine(z, self_weight, self_bias))
    messages = ad.mul(gate, filt)
    agg = ad.segment_sum(messages, src, node_feats.shape[0])
    return ad.add(node_feats, agg)


def pool(node_feats: Tensor, crystal_ids: np.ndarray, n_crystals: int) -> Tensor:
    """Mean over each crystal's nodes; masked atoms still count."""
    return ad.segment_mean(node_feats, crystal_ids, n_crystals)


def project(params: dict[str, Tensor], crystal_vecs: Tensor) -> Tensor:
    hidden = ad.relu(_affine(crystal_vecs, params["projection.w1"], params["projection.b1"]))
    return _affine(hidden, params["projection.w2"], params["projection.b2"])


def head_forward(params: dict[str, Tensor], crystal_vecs: Tensor,
                 task: str = "regression") -> Tensor:
    """Per-crystal scalar: regression value, or classification logit."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    hidden = ad.relu(_affine(crystal_vecs, params["head.w1"], params["head.b1"]))
    return _affine(hidden, params["head.w2"], params["head.b2"])


@dataclass
class GraphBatch:
    """Several graphs fused into one disjoint union for a single forward pass."""

    node_z: np.ndarray
    node_matrix: np.ndarray | None
    node_keep: np.ndarray  # 1.0 for live nodes, 0.0 for masked
    src: np.ndarray
    dst: np.ndarray
    edge_features: np.ndarray
    crystal_ids: np.ndarray
    n_crystals: int


def build_batch(graphs: list[CrystalGraph], mode: str = "learned-embedding",
                table: FeatureTable | None = None) -> GraphBatch:
    node_z, keeps, srcs, dsts, feats, segs = [], [], [], [], [], []
    matrices = []
    offset = 0
    for k, g in enumerate(graphs):
        node_z.append(g.node_z)
        keeps.append(np.where(g.node_masked, 0.0, 1.0))
        srcs.append(g.src + offset)
        dsts.append(g.dst + offset)
        feats.append(g.edge_features)
        segs.append(np.full(g.n_nodes, k, dtype=np.int64))
        if mode == "external-table":
            matrices.append(init_node_features(g.node_z, mode, table).matrix)
        offset += g.n_nodes
    return GraphBatch(
        node_z=np.concatenate(node_z),
        node_matrix=np.concatenate(matrices) if matrices else None,
        node_keep=np.concatenate(keeps),
        src=np.concatenate(srcs),
        dst=np.concatenate(dsts),
        edge_features=np.concatenate(feats),
        crystal_ids=np.concatenate(segs),
        n_crystals=len(graphs),
    )


def encode(params: dict[str, Tensor], batch: GraphBatch, cfg: ModelConfig) -> Tensor:
    """Graph batch -> per-crystal pooled vectors (n_crystals, hidden_dim)."""
    if batch.node_matrix is not None:
        feats = ad.matmul(Tensor(batch.node_matrix), params["input_projection"])
    else:
        feats = ad.embedding_lookup(params["atom_embedding"], batch.node_z - 1)
    if not batch.node_keep.all():
        keep = np.broadcast_to(batch.node_keep[:, None], feats.shape)
        feats = ad.mul(feats, Tensor(keep))
    edge_feats = Tensor(batch.edge_features)
    for t in range(cfg.n_conv):
        feats = cgcnn_conv(feats, edge_feats, batch.src, batch.dst,
                           params[f"conv{t}.gate_weight"], params[f"conv{t}.gate_bias"],
                           params[f"conv{t}.self_weight"], params[f"conv{t}.self_bias"])
    return pool(feats, batch.crystal_ids, batch.n_crystals)


def embed_graphs(params: dict[str, Tensor], graphs: list[CrystalGraph],
                 cfg: ModelConfig, mode: str = "learned-embedding",
                 table: FeatureTable | None = None) -> Tensor:
    """Graphs -> projected embeddings (len(graphs), embed_dim)."""
    batch = build_batch(graphs, mode, table)
    return project(params, encode(params, batch, cfg))
