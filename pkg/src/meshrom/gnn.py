"""Message-passing layers and the mesh encoder / decoder.

Every undirected mesh edge is expanded into two directed edges, each with its
own hidden state; the reversed copy starts from the negated displacement. Node
``i`` aggregates the mean of the updated states of the edges leaving it, and
an isolated node aggregates the zero vector.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .mesh import EDGE_FEATURE_DIM, FieldSnapshot, MeshGraph
from .nn import (LayerNormParams, MlpParams, init_layernorm, init_mlp, layernorm_apply,
                 mlp_apply)
from .sampling import CoordSet, interpolation_matrix


@dataclass
class GnnLayerParams:
    mlp_e: MlpParams
    mlp_n: MlpParams
    lnm_e: LayerNormParams
    lnm_n: LayerNormParams

    @property
    def node_hidden(self):
        return self.mlp_n.n_out

    @property
    def edge_hidden(self):
        return self.mlp_e.n_out

    def __post_init__(self):
        hn, he = self.mlp_n.n_out, self.mlp_e.n_out
        if self.mlp_e.n_in != 2 * hn + he or self.mlp_n.n_in != hn + he:
            raise ShapeError(
                f"GNN layer dims inconsistent: mlp_e {self.mlp_e.n_in}->{he}, mlp_n {self.mlp_n.n_in}->{hn}"
            )


@dataclass
class EncoderParams:
    mlp_0: MlpParams
    lnm_0: LayerNormParams
    mlp_1: MlpParams
    lnm_1: LayerNormParams
    gnn_stack: list
    mlp_2: MlpParams
    lnm_2: LayerNormParams
    latent_coords: CoordSet
    k_interp: int = 3

    def __post_init__(self):
        if len(self.gnn_stack) < 1:
            raise ValidationError("the GNN stack needs at least one layer")

    @property
    def n_latent(self):
        return self.mlp_2.n_out


@dataclass
class DecoderParams:
    mlp_0: MlpParams
    lnm_0: LayerNormParams
    mlp_1: MlpParams
    lnm_1: LayerNormParams
    gnn_stack: list
    mlp_2: MlpParams
    latent_coords: CoordSet
    k_interp: int = 3

    def __post_init__(self):
        if len(self.gnn_stack) < 1:
            raise ValidationError("the GNN stack needs at least one layer")

    @property
    def n_fields(self):
        return self.mlp_2.n_out


@dataclass(frozen=True, eq=False)
class LatentState:
    values: np.ndarray  # (N_z, |X2|)
    coords: CoordSet
    time: float = 0.0
    param: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(self.coords):
            raise ValidationError(f"latent values {v.shape} do not match {len(self.coords)} latent points")
        if not np.all(np.isfinite(v)):
            raise ValidationError("latent state has non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "param", np.atleast_1d(np.asarray(self.param, float)))

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)

    @classmethod
    def from_flat(cls, token, n_latent: int, coords: CoordSet, time=0.0, param=()):
        return cls(np.asarray(token, float).reshape(n_latent, len(coords)), coords, time, param)


# --- construction -------------------------------------------------------------


def init_gnn_layer(hidden: int, edge_hidden: int, mlp_hidden: int, n_layers: int,
                   rng, activation="relu", zero_last=False) -> GnnLayerParams:
    mid = [mlp_hidden] * (n_layers - 1)
    return GnnLayerParams(
        init_mlp([2 * hidden + edge_hidden, *mid, edge_hidden], rng, activation, zero_last=zero_last),
        init_mlp([hidden + edge_hidden, *mid, hidden], rng, activation, zero_last=zero_last),
        init_layernorm(edge_hidden),
        init_layernorm(hidden),
    )


def _coder_parts(n_in, n_out, hidden, mlp_hidden, n_layers, n_gnn, rng, activation):
    mid = [mlp_hidden] * (n_layers - 1)
    return dict(
        mlp_0=init_mlp([n_in, *mid, hidden], rng, activation),
        lnm_0=init_layernorm(hidden),
        mlp_1=init_mlp([EDGE_FEATURE_DIM, *mid, hidden], rng, activation),
        lnm_1=init_layernorm(hidden),
        gnn_stack=[init_gnn_layer(hidden, hidden, mlp_hidden, n_layers, rng, activation) for _ in range(n_gnn)],
        mlp_2=init_mlp([hidden, *mid, n_out], rng, activation),
    )


def init_encoder(n_fields: int, latent_coords: CoordSet, *, n_latent=16, hidden=128, mlp_hidden=128,
                 mlp_layers=3, n_gnn=3, k_interp=3, activation="relu", seed=0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    parts = _coder_parts(n_fields, n_latent, hidden, mlp_hidden, mlp_layers, n_gnn, rng, activation)
    return EncoderParams(**parts, lnm_2=init_layernorm(n_latent), latent_coords=latent_coords, k_interp=k_interp)


def init_decoder(n_fields: int, latent_coords: CoordSet, *, n_latent=16, hidden=128, mlp_hidden=128,
                 mlp_layers=3, n_gnn=3, k_interp=3, activation="relu", seed=1) -> DecoderParams:
    rng = np.random.default_rng(seed)
    parts = _coder_parts(n_latent, n_fields, hidden, mlp_hidden, mlp_layers, n_gnn, rng, activation)
    return DecoderParams(**parts, latent_coords=latent_coords, k_interp=k_interp)


# --- graph operators ---------------------------------------------------------


class GraphOps:
    """Sparse gather / mean-aggregate operators for a directed edge list."""

    def __init__(self, n_nodes: int, src, dst):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        ne = src.shape[0]
        rows = np.arange(ne)
        ones = np.ones(ne)
        self.n_nodes = n_nodes
        self.src, self.dst = src, dst
        self.gather_src = sp.csr_matrix((ones, (rows, src)), shape=(ne, n_nodes))
        self.gather_dst = sp.csr_matrix((ones, (rows, dst)), shape=(ne, n_nodes))
        deg = np.bincount(src, minlength=n_nodes).astype(float)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        self.aggregate = sp.csr_matrix((inv[src], (src, rows)), shape=(n_nodes, ne))


class HiddenGraph(NamedTuple):
    nodes: Tensor  # (N, node_hidden)
    edges: Tensor  # (n_directed, edge_hidden)
    ops: GraphOps


def gnn_layer(h: HiddenGraph, p: GnnLayerParams) -> HiddenGraph:
    """Residual edge update followed by a residual node update; adjacency unchanged."""
    nodes, edges, ops = h
    if nodes.shape[-1] != p.node_hidden or edges.shape[-1] != p.edge_hidden:
        raise ShapeError(
            f"hidden graph widths ({nodes.shape[-1]}, {edges.shape[-1]}) vs layer "
            f"({p.node_hidden}, {p.edge_hidden})"
        )
    ui = ad.spmm(ops.gather_src, nodes)
    uj = ad.spmm(ops.gather_dst, nodes)
    msg = layernorm_apply(p.lnm_e, mlp_apply(p.mlp_e, ad.concat([ui, uj, edges], axis=1)))
    edges2 = ad.add(edges, msg)
    agg = ad.spmm(ops.aggregate, edges2)
    upd = layernorm_apply(p.lnm_n, mlp_apply(p.mlp_n, ad.concat([nodes, agg], axis=1)))
    return HiddenGraph(ad.add(nodes, upd), edges2, ops)


def gnn_stack(h: HiddenGraph, layers) -> HiddenGraph:
    for p in layers:
        h = gnn_layer(h, p)
    return h


class CoderContext:
    """Mesh-dependent constants for encode/decode, batched block-diagonally."""

    def __init__(self, g: MeshGraph, latent: CoordSet, k: int):
        self.graph = g
        self.latent = latent
        self.k = k
        src, dst, feats = g.directed_edges()
        self._src, self._dst, self._feats = src, dst, feats
        full = CoordSet(g.coords)
        self._down = interpolation_matrix(full, latent, k)
        self._up = interpolation_matrix(latent, full, k)
        self._batched = {}

    def batch(self, b: int):
        if b not in self._batched:
            n = self.graph.node_count
            offs = np.repeat(np.arange(b) * n, self._src.shape[0])
            ops = GraphOps(b * n, np.tile(self._src, b) + offs, np.tile(self._dst, b) + offs)
            eye = sp.identity(b, format="csr")
            self._batched[b] = (
                ops,
                np.tile(self._feats, (b, 1)),
                sp.kron(eye, self._down, format="csr"),
                sp.kron(eye, self._up, format="csr"),
            )
        return self._batched[b]


_CONTEXTS: "weakref.WeakKeyDictionary[MeshGraph, dict]" = weakref.WeakKeyDictionary()


def coder_context(g: MeshGraph, latent: CoordSet, k: int) -> CoderContext:
    per_graph = _CONTEXTS.setdefault(g, {})
    key = (id(latent), k)
    ctx = per_graph.get(key)
    if ctx is None or ctx.latent is not latent:
        ctx = per_graph[key] = CoderContext(g, latent, k)
    return ctx


# --- encoder / decoder on tensors -------------------------------------------------


def _embed(ctx, b, u0, p):
    ops, e0, _, _ = ctx.batch(b)
    u1 = layernorm_apply(p.lnm_0, mlp_apply(p.mlp_0, u0))
    e1 = layernorm_apply(p.lnm_1, mlp_apply(p.mlp_1, e0))
    return gnn_stack(HiddenGraph(u1, e1, ops), p.gnn_stack)


def encode_nodes(u0, ctx: CoderContext, p: EncoderParams, batch: int = 1) -> Tensor:
    """Node features ``(B*N, N_u)`` to latent features ``(B*|X2|, N_z)``."""
    g2 = _embed(ctx, batch, u0, p)
    u3 = layernorm_apply(p.lnm_2, mlp_apply(p.mlp_2, g2.nodes))
    return ad.spmm(ctx.batch(batch)[2], u3)


def decode_nodes(z, ctx: CoderContext, p: DecoderParams, batch: int = 1) -> Tensor:
    """Latent features ``(B*|X2|, N_z)`` to node features ``(B*N, N_u)``."""
    u0 = ad.spmm(ctx.batch(batch)[3], z)
    g2 = _embed(ctx, batch, u0, p)
    return mlp_apply(p.mlp_2, g2.nodes)


# --- public snapshot-level API --------------------------------------------------


def encode(g: MeshGraph, s: FieldSnapshot, p: EncoderParams) -> LatentState:
    s.check_against(g)
    if s.n_fields != p.mlp_0.n_in:
        raise ValidationError(f"encoder expects {p.mlp_0.n_in} fields, snapshot has {s.n_fields}")
    ctx = coder_context(g, p.latent_coords, p.k_interp)
    z = encode_nodes(Tensor(s.values.T), ctx, p)
    return LatentState(z.data.T, p.latent_coords, s.time, s.param)


def decode(z: LatentState, g: MeshGraph, p: DecoderParams, field_names=None) -> FieldSnapshot:
    if not z.coords.same_as(p.latent_coords):
        raise ValidationError("latent state coordinates differ from the decoder's latent point set")
    if z.values.shape[0] != p.mlp_0.n_in:
        raise ValidationError(f"decoder expects {p.mlp_0.n_in} latent channels, got {z.values.shape[0]}")
    ctx = coder_context(g, p.latent_coords, p.k_interp)
    u = decode_nodes(Tensor(z.values.T), ctx, p)
    names = field_names or (("scalar", "u", "v") if p.n_fields == 3 else tuple(f"f{k}" for k in range(p.n_fields)))
    return FieldSnapshot(u.data.T, names, z.time, z.param)
