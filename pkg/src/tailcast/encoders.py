"""The two stream encoders.

Traffic side: a stack of transformer-style graph convolution layers whose
attention keys/values are augmented with projected edge features, followed
by attention pooling into a single embedding. Resource side: a stack of
gated-MLP blocks whose spatial gate mixes information across service
positions, followed by mean pooling. Both emit a ``d_emb`` vector per
snapshot and operate on batches of disjoint graph copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import LayerNorm, Linear, Module, parameter
from .statgraph import Snapshot, Topology
from .tensor import Tensor


@dataclass(frozen=True)
class TrafficEncoderConfig:
    num_layers: int = 4
    d_node: int = 3
    d_edge: int = 3
    d_emb: int = 16
    num_heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.d_emb % self.num_heads != 0:
            raise ValueError(f"d_emb={self.d_emb} not divisible by num_heads={self.num_heads}")


@dataclass(frozen=True)
class ResourceEncoderConfig:
    num_blocks: int = 4
    d_resource: int = 5
    d_emb: int = 16
    expansion: int = 4
    num_positions: int = 1  # number of service positions |V|; part of the data contract
    dropout: float = 0.1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.num_positions < 1:
            raise ValueError("num_positions must be >= 1")


@dataclass
class SnapshotBatch:
    """A batch of snapshots collated as one disjoint union of graphs."""

    node_features: Tensor        # (B*|V|, d_n)
    edge_features: Tensor        # (B*|E|, d_e)
    edge_src: np.ndarray         # message source node ids (offset per graph)
    edge_dst: np.ndarray         # message destination node ids
    self_loop_nodes: np.ndarray  # nodes with no incoming messages
    node_graph: np.ndarray       # graph id per node
    num_graphs: int
    num_nodes: int
    resources: Tensor            # (B, |V|, d_r)
    window_starts: np.ndarray
    labels: np.ndarray | None    # (B,) seconds, or None for pure inference


def collate_snapshots(
    snapshots: list[Snapshot],
    topology: Topology,
    reverse_messages: bool = False,
) -> SnapshotBatch:
    """Stack snapshots into one batch over disjoint topology copies.

    Message direction follows call direction by default (caller -> callee);
    ``reverse_messages`` flips it so that callee state propagates upstream.
    Results are identical to per-snapshot evaluation because graphs stay
    disconnected.
    """
    if not snapshots:
        raise ValueError("cannot collate an empty snapshot list")
    b = len(snapshots)
    v = topology.num_services
    if topology.edges:
        src = np.asarray([e[0] for e in topology.edges], dtype=np.intp)
        dst = np.asarray([e[1] for e in topology.edges], dtype=np.intp)
    else:
        src = np.zeros(0, dtype=np.intp)
        dst = np.zeros(0, dtype=np.intp)
    if reverse_messages:
        src, dst = dst, src
    in_degree = np.zeros(v, dtype=np.intp)
    np.add.at(in_degree, dst, 1)
    iso = np.flatnonzero(in_degree == 0)

    offsets = np.repeat(np.arange(b, dtype=np.intp) * v, len(src))
    edge_src = np.tile(src, b) + offsets
    edge_dst = np.tile(dst, b) + offsets
    iso_offsets = np.repeat(np.arange(b, dtype=np.intp) * v, len(iso))
    self_loop_nodes = np.tile(iso, b) + iso_offsets

    labels = None
    if all(s.label is not None for s in snapshots):
        labels = np.asarray([s.label for s in snapshots], dtype=np.float64)

    return SnapshotBatch(
        node_features=Tensor(np.concatenate([s.node_features for s in snapshots], axis=0)),
        edge_features=Tensor(np.concatenate([s.edge_features for s in snapshots], axis=0)),
        edge_src=edge_src,
        edge_dst=edge_dst,
        self_loop_nodes=self_loop_nodes,
        node_graph=np.repeat(np.arange(b, dtype=np.intp), v),
        num_graphs=b,
        num_nodes=b * v,
        resources=Tensor(np.stack([s.resource_features for s in snapshots], axis=0)),
        window_starts=np.asarray([s.window_start for s in snapshots]),
        labels=labels,
    )


def segment_softmax(scores: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id (per trailing column).

    Max-subtraction uses the detached per-segment maximum; softmax is
    shift-invariant, so the gradient is unaffected.
    """
    m = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(m, segment_ids, scores.data)
    m[np.isneginf(m)] = 0.0  # empty segments are never gathered
    z = T.texp(T.sub(scores, Tensor(m[segment_ids])))
    denom = T.scatter_add(z, segment_ids, num_segments)
    return T.div(z, T.gather_rows(denom, segment_ids))


class GraphTransformerLayer(Module):
    """Multi-head attention over in-neighbors with additive edge features.

    Per head: alpha_ij = softmax_j <W_q h_i, W_k h_j + W_e e_ji> / sqrt(d_head)
    over incoming messages j -> i, output sum_j alpha_ij (W_v h_j + W_e' e_ji);
    heads are concatenated, then residual + layer norm. Nodes with no
    incoming messages attend to themselves through a learned virtual edge
    feature so every node receives an update.
    """

    def __init__(self, d_emb: int, d_edge: int, num_heads: int, drop_p: float, rng: np.random.Generator):
        super().__init__()
        self.num_heads = num_heads
        self.d_head = d_emb // num_heads
        self.d_emb = d_emb
        self.drop_p = drop_p
        self.wq = Linear(d_emb, d_emb, rng)
        self.wk = Linear(d_emb, d_emb, rng)
        self.wv = Linear(d_emb, d_emb, rng)
        self.we_key = Linear(d_edge, d_emb, rng)
        self.we_val = Linear(d_edge, d_emb, rng)
        self.self_edge = parameter(rng.normal(0.0, 0.1, size=(1, d_edge)))
        self.norm = LayerNorm(d_emb)

    def __call__(
        self,
        h: Tensor,
        edge_features: Tensor,
        edge_src: np.ndarray,
        edge_dst: np.ndarray,
        self_loop_nodes: np.ndarray,
        num_nodes: int,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        if h.shape[1] != self.d_emb:
            raise ShapeError(f"node embedding width {h.shape[1]} != layer width {self.d_emb}")
        keys_e = self.we_key(edge_features)
        vals_e = self.we_val(edge_features)
        src, dst = edge_src, edge_dst
        if len(self_loop_nodes):
            rep = np.zeros(len(self_loop_nodes), dtype=np.intp)
            keys_e = T.concat([keys_e, T.gather_rows(self.we_key(self.self_edge), rep)], axis=0)
            vals_e = T.concat([vals_e, T.gather_rows(self.we_val(self.self_edge), rep)], axis=0)
            src = np.concatenate([src, self_loop_nodes])
            dst = np.concatenate([dst, self_loop_nodes])

        q = self.wq(h)
        k = self.wk(h)
        v = self.wv(h)
        m = len(src)
        key = T.add(T.gather_rows(k, src), keys_e)
        val = T.add(T.gather_rows(v, src), vals_e)
        q_dst = T.gather_rows(q, dst)

        shape3 = (m, self.num_heads, self.d_head)
        scores = T.tsum(T.mul(T.reshape(q_dst, shape3), T.reshape(key, shape3)), axis=2)
        scores = T.scale(scores, 1.0 / math.sqrt(self.d_head))
        alpha = segment_softmax(scores, dst, num_nodes)  # (m, heads)

        weighted = T.mul(T.reshape(alpha, (m, self.num_heads, 1)), T.reshape(val, shape3))
        attn = T.scatter_add(T.reshape(weighted, (m, self.d_emb)), dst, num_nodes)
        attn = T.dropout(attn, self.drop_p, self.training, rng)
        return self.norm(T.add(h, attn))


class AttentionPool(Module):
    """Score-weighted graph readout: a = softmax(w2 . tanh(W1 h_i))."""

    def __init__(self, d_emb: int, rng: np.random.Generator):
        super().__init__()
        self.w1 = Linear(d_emb, d_emb, rng)
        self.w2 = Linear(d_emb, 1, rng, bias=False)

    def __call__(self, h: Tensor, node_graph: np.ndarray, num_graphs: int) -> Tensor:
        scores = self.w2(T.tanh(self.w1(h)))           # (N, 1)
        alpha = segment_softmax(scores, node_graph, num_graphs)
        return T.scatter_add(T.mul(h, alpha), node_graph, num_graphs)

    def weights(self, h: Tensor, node_graph: np.ndarray, num_graphs: int) -> Tensor:
        scores = self.w2(T.tanh(self.w1(h)))
        return segment_softmax(scores, node_graph, num_graphs)


class TrafficEncoder(Module):
    """Input projection, stacked graph attention layers, attention pooling."""

    def __init__(self, config: TrafficEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.input_proj = Linear(config.d_node, config.d_emb, rng)
        self.layers = [
            GraphTransformerLayer(config.d_emb, config.d_edge, config.num_heads, config.dropout, rng)
            for _ in range(config.num_layers)
        ]
        self.pool = AttentionPool(config.d_emb, rng)

    def __call__(self, batch: SnapshotBatch, rng: np.random.Generator | None = None,
                 node_features: Tensor | None = None,
                 edge_features: Tensor | None = None) -> Tensor:
        h = self.input_proj(batch.node_features if node_features is None else node_features)
        edges = batch.edge_features if edge_features is None else edge_features
        for layer in self.layers:
            h = layer(h, edges, batch.edge_src, batch.edge_dst,
                      batch.self_loop_nodes, batch.num_nodes, rng)
        return self.pool(h, batch.node_graph, batch.num_graphs)


class GmlpBlock(Module):
    """Gated MLP block with a spatial gating unit across service positions.

    The channel projection is split in half; the second half is normalized
    and mixed across positions by a learned (|V| x |V|) map initialized near
    zero with unit bias, so a fresh block starts as a plain residual MLP.
    """

    def __init__(self, d_model: int, d_ffn: int, num_positions: int, drop_p: float,
                 rng: np.random.Generator):
        super().__init__()
        if d_ffn % 2 != 0:
            raise ValueError(f"d_ffn must be even, got {d_ffn}")
        self.half = d_ffn // 2
        self.d_ffn = d_ffn
        self.drop_p = drop_p
        self.norm_in = LayerNorm(d_model)
        self.proj_in = Linear(d_model, d_ffn, rng)
        self.gate_norm = LayerNorm(self.half)
        self.w_spatial = parameter(np.zeros((num_positions, num_positions)))
        self.b_spatial = parameter(np.ones(num_positions))
        self.proj_out = Linear(self.half, d_model, rng)

    def __call__(self, z: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        u = T.gelu(self.proj_in(self.norm_in(z)))      # (B, V, d_ffn)
        u1 = T.slice_axis(u, 2, 0, self.half)
        u2 = T.slice_axis(u, 2, self.half, self.d_ffn)
        gate = self.gate_norm(u2)
        gate = T.transpose(gate, (0, 2, 1))            # (B, half, V)
        gate = T.add(T.matmul(gate, self.w_spatial), self.b_spatial)
        gate = T.transpose(gate, (0, 2, 1))            # back to (B, V, half)
        out = self.proj_out(T.mul(u1, gate))
        out = T.dropout(out, self.drop_p, self.training, rng)
        return T.add(z, out)


class ResourceEncoder(Module):
    """Position-sensitive encoder of per-service resource state.

    Deliberately not graph-aware: any cross-service coupling is learned by
    the spatial gates, not imposed by the call topology. Output is the mean
    over service positions projected to the embedding width.
    """

    def __init__(self, config: ResourceEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d_model = config.d_emb
        self.input_proj = Linear(config.d_resource, d_model, rng)
        self.blocks = [
            GmlpBlock(d_model, config.expansion * d_model, config.num_positions,
                      config.dropout, rng)
            for _ in range(config.num_blocks)
        ]
        self.output_proj = Linear(d_model, config.d_emb, rng)

    def __call__(self, resources: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if resources.shape[1] != self.config.num_positions:
            raise ShapeError(
                f"got {resources.shape[1]} service positions, encoder expects {self.config.num_positions}")
        z = self.input_proj(resources)
        for block in self.blocks:
            z = block(z, rng)
        return self.output_proj(T.tmean(z, axis=1))
