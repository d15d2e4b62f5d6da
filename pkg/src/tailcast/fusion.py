"""Embedding fusion and the end-to-end latency predictor.

The two stream embeddings are first enhanced with cross-attention context
from each other (with residual connections preserving the pure signals),
then projected into a shared rank-k space and combined multiplicatively.
Demand/capacity interactions are multiplicative, not additive: when
capacity is scarce, small demand increases blow up latency, and the
element-wise product lets the head see exactly that interaction.

Also hosts the ablation variants: single-stream routings, additive fusion,
and a graph-encoded resource stream.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .encoders import (
    ResourceEncoder,
    ResourceEncoderConfig,
    SnapshotBatch,
    TrafficEncoder,
    TrafficEncoderConfig,
    collate_snapshots,
)
from .errors import CheckpointError, SchemaError
from .nn import MLP, Linear, Module
from .statgraph import NormStats, Snapshot, Topology
from .tensor import Tensor, load_checkpoint, load_params_into, save_checkpoint

VARIANTS = ("full", "traffic_only", "resource_only", "simple_fused", "gnn_fused", "single_stream")


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture hyperparameter of the predictor, in one place."""

    variant: str = "full"
    d_node: int = 3
    d_edge: int = 3
    d_resource: int = 5
    d_emb: int = 16
    traffic_layers: int = 4
    num_heads: int = 4
    resource_blocks: int = 4
    gmlp_expansion: int = 4
    fusion_rank: int = 4
    fusion_tokens: int = 4
    fused_width: int = 16
    head_hidden: int = 16
    dropout_traffic: float = 0.1
    dropout_resource: float = 0.1
    reverse_messages: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_emb % self.fusion_tokens != 0:
            raise ValueError(f"fusion_tokens={self.fusion_tokens} must divide d_emb={self.d_emb}")
        if self.fusion_rank < 1:
            raise ValueError("fusion_rank must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"bad model config: {exc}") from exc


@dataclass
class SystemEmbedding:
    """Fused system state plus the stream embeddings it came from."""

    window_start: float
    fused: np.ndarray
    demand: np.ndarray | None = None
    capacity: np.ndarray | None = None
    demand_enhanced: np.ndarray | None = None
    capacity_enhanced: np.ndarray | None = None


class CrossTokenAttention(Module):
    """Scaled dot-product attention between two tokenized embeddings.

    A pooled vector is reshaped into ``num_tokens`` tokens so the attention
    pattern is non-degenerate; with one token this collapses to returning
    the value projection of the context (kept reachable on purpose). The
    residual connection is the caller's responsibility.
    """

    def __init__(self, d_emb: int, num_tokens: int, rng: np.random.Generator):
        super().__init__()
        self.num_tokens = num_tokens
        self.d_token = d_emb // num_tokens
        self.d_emb = d_emb
        self.wq = Linear(self.d_token, self.d_token, rng)
        self.wk = Linear(self.d_token, self.d_token, rng)
        self.wv = Linear(self.d_token, self.d_token, rng)

    def __call__(self, q_emb: Tensor, kv_emb: Tensor) -> Tensor:
        b = q_emb.shape[0]
        shape = (b, self.num_tokens, self.d_token)
        q = self.wq(T.reshape(q_emb, shape))
        k = self.wk(T.reshape(kv_emb, shape))
        v = self.wv(T.reshape(kv_emb, shape))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_token))
        attn = T.softmax(scores, axis=-1)
        return T.reshape(T.matmul(attn, v), (b, self.d_emb))

    def attention_matrix(self, q_emb: Tensor, kv_emb: Tensor) -> Tensor:
        b = q_emb.shape[0]
        shape = (b, self.num_tokens, self.d_token)
        q = self.wq(T.reshape(q_emb, shape))
        k = self.wk(T.reshape(kv_emb, shape))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.d_token))
        return T.softmax(scores, axis=-1)


class DemandCapacityFusion(Module):
    """Cross-attention enhancement followed by rank-k multiplicative fusion."""

    def __init__(self, d_emb: int, num_tokens: int, rank: int, fused_width: int,
                 rng: np.random.Generator):
        super().__init__()
        self.attend_demand = CrossTokenAttention(d_emb, num_tokens, rng)
        self.attend_capacity = CrossTokenAttention(d_emb, num_tokens, rng)
        self.project_demand = MLP([d_emb, d_emb, rank], rng)
        self.project_capacity = MLP([d_emb, d_emb, rank], rng)
        self.mix = MLP([rank, fused_width, fused_width], rng)

    def enhance(self, z_t: Tensor, z_r: Tensor) -> tuple[Tensor, Tensor]:
        zt_e = T.add(z_t, self.attend_demand(z_t, z_r))
        zr_e = T.add(z_r, self.attend_capacity(z_r, z_t))
        return zt_e, zr_e

    def factors(self, zt_e: Tensor, zr_e: Tensor) -> tuple[Tensor, Tensor]:
        return self.project_demand(zt_e), self.project_capacity(zr_e)

    def __call__(self, z_t: Tensor, z_r: Tensor) -> Tensor:
        zt_e, zr_e = self.enhance(z_t, z_r)
        f_t, f_r = self.factors(zt_e, zr_e)
        return self.mix(T.mul(f_t, f_r))


class LatencyModel(Module):
    """End-to-end window-level P95 predictor over one topology.

    The head output passes through softplus, so predictions are strictly
    positive seconds and relative errors stay well-defined.
    """

    def __init__(self, config: ModelConfig, topology: Topology, seed=0):
        super().__init__()
        self.config = config
        self.topology = topology
        entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        streams = entropy.spawn(2)
        rng = np.random.default_rng(streams[0])
        self._dropout_rng = np.random.default_rng(streams[1])

        variant = config.variant
        d_node = config.d_node + (config.d_resource if variant == "single_stream" else 0)
        self.traffic = None
        self.resource = None
        self.resource_graph = None
        self.fusion = None

        if variant in ("full", "traffic_only", "simple_fused", "gnn_fused", "single_stream"):
            self.traffic = TrafficEncoder(TrafficEncoderConfig(
                num_layers=config.traffic_layers,
                d_node=d_node,
                d_edge=config.d_edge,
                d_emb=config.d_emb,
                num_heads=config.num_heads,
                dropout=config.dropout_traffic,
            ), rng)
        if variant in ("full", "resource_only", "simple_fused"):
            self.resource = ResourceEncoder(ResourceEncoderConfig(
                num_blocks=config.resource_blocks,
                d_resource=config.d_resource,
                d_emb=config.d_emb,
                expansion=config.gmlp_expansion,
                num_positions=topology.num_services,
                dropout=config.dropout_resource,
            ), rng)
        if variant == "gnn_fused":
            # the ablation that imposes the call graph on resource state
            self.resource_graph = TrafficEncoder(TrafficEncoderConfig(
                num_layers=config.traffic_layers,
                d_node=config.d_resource,
                d_edge=config.d_edge,
                d_emb=config.d_emb,
                num_heads=config.num_heads,
                dropout=config.dropout_resource,
            ), rng)
        if variant in ("full", "gnn_fused"):
            self.fusion = DemandCapacityFusion(
                config.d_emb, config.fusion_tokens, config.fusion_rank,
                config.fused_width, rng)
            head_in = config.fused_width
        else:
            head_in = config.d_emb
        self.head = MLP([head_in, config.head_hidden, 1], rng)

    # -- forward -----------------------------------------------------------

    def _streams(self, batch: SnapshotBatch) -> dict[str, Tensor | None]:
        rng = self._dropout_rng if self.training else None
        variant = self.config.variant
        z_t = None
        z_r = None
        if variant == "single_stream":
            b, v, d_r = batch.resources.shape
            flat_r = T.reshape(batch.resources, (b * v, d_r))
            merged = T.concat([batch.node_features, flat_r], axis=1)
            z_t = self.traffic(batch, rng, node_features=merged)
        elif self.traffic is not None:
            z_t = self.traffic(batch, rng)
        if self.resource is not None:
            z_r = self.resource(batch.resources, rng)
        if self.resource_graph is not None:
            b, v, d_r = batch.resources.shape
            flat_r = T.reshape(batch.resources, (b * v, d_r))
            zero_edges = Tensor(np.zeros_like(batch.edge_features.data))
            z_r = self.resource_graph(batch, rng, node_features=flat_r, edge_features=zero_edges)
        return {"demand": z_t, "capacity": z_r}

    def embed(self, batch: SnapshotBatch) -> dict[str, Tensor | None]:
        """All intermediate embeddings plus the head input ("embedding")."""
        parts = self._streams(batch)
        z_t, z_r = parts["demand"], parts["capacity"]
        variant = self.config.variant
        if variant in ("full", "gnn_fused"):
            zt_e, zr_e = self.fusion.enhance(z_t, z_r)
            f_t, f_r = self.fusion.factors(zt_e, zr_e)
            parts["demand_enhanced"] = zt_e
            parts["capacity_enhanced"] = zr_e
            parts["embedding"] = self.fusion.mix(T.mul(f_t, f_r))
        elif variant in ("traffic_only", "single_stream"):
            parts["embedding"] = z_t
        elif variant == "resource_only":
            parts["embedding"] = z_r
        elif variant == "simple_fused":
            parts["embedding"] = T.add(z_t, z_r)
        return parts

    def forward(self, batch: SnapshotBatch) -> Tensor:
        """Predicted P95 latency in seconds, shape (B, 1)."""
        return T.softplus(self.head(self.embed(batch)["embedding"]))

    def forward_snapshots(self, snapshots: list[Snapshot]) -> Tensor:
        return self.forward(self.collate(snapshots))

    def collate(self, snapshots: list[Snapshot]) -> SnapshotBatch:
        return collate_snapshots(snapshots, self.topology, self.config.reverse_messages)

    def predict(self, snapshots: list[Snapshot], batch_size: int = 256) -> np.ndarray:
        """Inference over many snapshots; dropout off, parameters untouched."""
        was_training = self.training
        self.eval()
        try:
            preds = []
            for i in range(0, len(snapshots), batch_size):
                out = self.forward_snapshots(snapshots[i:i + batch_size])
                preds.append(out.data.reshape(-1))
            return np.concatenate(preds) if preds else np.zeros(0)
        finally:
            self.train(was_training)


def build_variant(kind: str, config: ModelConfig, topology: Topology, seed=0) -> LatencyModel:
    """Construct one of the model variants over a fixed topology."""
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    return LatencyModel(replace(config, variant=kind), topology, seed=seed)


def predict_latency(snapshot: Snapshot, model: LatencyModel) -> float:
    """Single-snapshot convenience wrapper; returns seconds (> 0)."""
    return float(model.predict([snapshot])[0])


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: LatencyModel, norm_stats: NormStats) -> None:
    """Persist parameters plus everything needed to rebuild the model:
    architecture config, topology, and the feature normalization stats."""
    meta = {
        "model_config": model.config.to_dict(),
        "topology": model.topology.to_dict(),
        "normalization": norm_stats.to_dict(),
    }
    save_checkpoint(path, model.parameters(), meta)


def load_model(path) -> tuple[LatencyModel, NormStats]:
    arrays, meta = load_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        topology = Topology.from_dict(meta["topology"])
        stats = NormStats.from_dict(meta["normalization"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint meta missing {exc}") from exc
    model = LatencyModel(config, topology)
    load_params_into(model.parameters(), arrays)
    model.eval()
    return model, stats


# ---------------------------------------------------------------------------
# embedding export
# ---------------------------------------------------------------------------


def export_embeddings(snapshots: list[Snapshot], model: LatencyModel,
                      batch_size: int = 256) -> list[SystemEmbedding]:
    was_training = model.training
    model.eval()
    try:
        out: list[SystemEmbedding] = []
        for i in range(0, len(snapshots), batch_size):
            chunk = snapshots[i:i + batch_size]
            parts = model.embed(model.collate(chunk))

            def row(name: str, j: int) -> np.ndarray | None:
                t = parts.get(name)
                return None if t is None else t.data[j].copy()

            for j, snap in enumerate(chunk):
                out.append(SystemEmbedding(
                    window_start=snap.window_start,
                    fused=parts["embedding"].data[j].copy(),
                    demand=row("demand", j),
                    capacity=row("capacity", j),
                    demand_enhanced=row("demand_enhanced", j),
                    capacity_enhanced=row("capacity_enhanced", j),
                ))
        return out
    finally:
        model.train(was_training)


def write_embeddings_csv(path, embeddings: list[SystemEmbedding]) -> None:
    """CSV export: window_start plus the fused embedding components."""
    if not embeddings:
        raise ValueError("nothing to export")
    width = len(embeddings[0].fused)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start"] + [f"z_f_{i:02d}" for i in range(width)])
        for emb in embeddings:
            writer.writerow([repr(float(emb.window_start))] + [repr(float(x)) for x in emb.fused])


def read_embeddings_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_embeddings_csv`: (window_starts, matrix)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "window_start":
            raise SchemaError("not an embedding export file")
        starts, rows = [], []
        for row in reader:
            starts.append(float(row[0]))
            rows.append([float(x) for x in row[1:]])
    return np.asarray(starts), np.asarray(rows)
