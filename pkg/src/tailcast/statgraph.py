"""Service topology, per-window snapshots, datasets, and their file format.

A dataset is a static service-dependency graph plus a time-ordered sequence
of observation windows. Each window carries three feature blocks (per-node
traffic, per-edge traffic, per-node resources) and the window's ground-truth
P95 latency in seconds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError, SchemaError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "tailcast-dataset"
DATASET_VERSION = 1

# Feature schema defaults: 3 traffic features per node, 3 per edge, 5
# resource features per node.
DEFAULT_NODE_DIM = 3
DEFAULT_EDGE_DIM = 3
DEFAULT_RESOURCE_DIM = 5

NODE_FEATURE_NAMES = ("request_rate", "request_bytes_rate", "response_bytes_rate")
EDGE_FEATURE_NAMES = ("request_rate", "request_bytes_rate", "response_bytes_rate")
RESOURCE_FEATURE_NAMES = (
    "cpu_rate",
    "memory_bytes",
    "cpu_period",
    "net_receive_rate",
    "net_transmit_rate",
)


@dataclass(frozen=True)
class Topology:
    """Static service-dependency graph with a frozen canonical ordering.

    ``services`` is the canonical node order (index = node id); ``edges`` are
    ``(source_index, destination_index)`` caller->callee pairs. The ordering
    is part of the dataset contract: position-dependent model weights (the
    resource encoder's spatial gating) rely on it, so it must never change
    once a dataset references the topology. Self-loops are rejected by
    :meth:`create`; constructing directly is the explicit opt-in.
    """

    services: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.services)) != len(self.services):
            raise SchemaError("duplicate service names in topology")
        n = len(self.services)
        seen = set()
        for src, dst in self.edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise SchemaError(f"edge ({src}, {dst}) out of range for {n} services")
            if (src, dst) in seen:
                raise SchemaError(f"duplicate edge ({src}, {dst})")
            seen.add((src, dst))

    @classmethod
    def create(cls, services, edges_by_name) -> "Topology":
        """Build a topology from names; services are sorted alphabetically.

        ``edges_by_name`` is an iterable of (source_name, destination_name).
        Edge order is preserved as given (it defines the edge-feature row
        order). Self-loops are rejected here.
        """
        ordered = tuple(sorted(services))
        index = {name: i for i, name in enumerate(ordered)}
        edges = []
        for src, dst in edges_by_name:
            if src not in index or dst not in index:
                raise SchemaError(f"edge ({src!r}, {dst!r}) references unknown service")
            if src == dst:
                raise SchemaError(f"self-loop on {src!r} not allowed")
            edges.append((index[src], index[dst]))
        return cls(services=ordered, edges=tuple(edges))

    @property
    def num_services(self) -> int:
        return len(self.services)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def index_of(self, service: str) -> int:
        try:
            return self.services.index(service)
        except ValueError:
            raise SchemaError(f"unknown service {service!r}") from None

    def edge_index(self) -> dict[tuple[int, int], int]:
        return {edge: i for i, edge in enumerate(self.edges)}

    def to_dict(self) -> dict:
        return {"services": list(self.services), "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        try:
            services = tuple(str(s) for s in d["services"])
            edges = tuple((int(a), int(b)) for a, b in d["edges"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed topology: {exc}") from exc
        return cls(services=services, edges=edges)


@dataclass
class Snapshot:
    """One observation window: features plus an optional P95 latency label."""

    window_start: float
    node_features: np.ndarray      # |V| x d_n
    edge_features: np.ndarray      # |E| x d_e
    resource_features: np.ndarray  # |V| x d_r
    label: float | None = None     # P95 latency, seconds; None for inference


@dataclass
class NormStats:
    """Per-column z-score statistics, fit on the training split only."""

    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    resource_mean: np.ndarray
    resource_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "node_mean": self.node_mean.tolist(),
            "node_std": self.node_std.tolist(),
            "edge_mean": self.edge_mean.tolist(),
            "edge_std": self.edge_std.tolist(),
            "resource_mean": self.resource_mean.tolist(),
            "resource_std": self.resource_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        try:
            return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in (
                "node_mean", "node_std", "edge_mean", "edge_std",
                "resource_mean", "resource_std")})
        except KeyError as exc:
            raise SchemaError(f"normalization stats missing field {exc}") from exc


@dataclass
class Dataset:
    """A topology plus strictly time-ordered snapshots.

    ``norm_stats`` is set once features have been standardized (normalization
    is one-shot; applying stats twice is not the identity).
    """

    topology: Topology
    snapshots: tuple[Snapshot, ...]
    node_dim: int = DEFAULT_NODE_DIM
    edge_dim: int = DEFAULT_EDGE_DIM
    resource_dim: int = DEFAULT_RESOURCE_DIM
    norm_stats: NormStats | None = None

    def __len__(self) -> int:
        return len(self.snapshots)

    def validate(self) -> None:
        v, e = self.topology.num_services, self.topology.num_edges
        prev = -np.inf
        for i, snap in enumerate(self.snapshots):
            if snap.window_start <= prev:
                raise SchemaError(f"snapshot {i} out of chronological order")
            prev = snap.window_start
            if snap.node_features.shape != (v, self.node_dim):
                raise SchemaError(
                    f"snapshot {i}: node features {snap.node_features.shape}, expected {(v, self.node_dim)}")
            if snap.edge_features.shape != (e, self.edge_dim):
                raise SchemaError(
                    f"snapshot {i}: edge features {snap.edge_features.shape}, expected {(e, self.edge_dim)}")
            if snap.resource_features.shape != (v, self.resource_dim):
                raise SchemaError(
                    f"snapshot {i}: resource features {snap.resource_features.shape}, "
                    f"expected {(v, self.resource_dim)}")
            blocks = (snap.node_features, snap.edge_features, snap.resource_features)
            if not all(np.all(np.isfinite(b)) for b in blocks):
                raise SchemaError(f"snapshot {i}: non-finite feature values")
            if self.norm_stats is None and not all(np.all(b >= 0) for b in blocks):
                raise SchemaError(f"snapshot {i}: negative raw feature values")
            if snap.label is not None and not (np.isfinite(snap.label) and snap.label > 0):
                raise SchemaError(f"snapshot {i}: label must be finite and > 0, got {snap.label}")

    def labels(self) -> np.ndarray:
        return np.asarray([s.label for s in self.snapshots], dtype=np.float64)


# ---------------------------------------------------------------------------
# chronological splitting
# ---------------------------------------------------------------------------


def chronological_split(
    dataset: Dataset, fractions: tuple[float, float, float] = (0.70, 0.10, 0.20)
) -> tuple[Dataset, Dataset, Dataset]:
    """Split into contiguous (train, val, test) partitions, oldest first.

    Sizes are floor(fraction * T) for train and val; the remainder goes to
    test, so the unseen-future side never shrinks from rounding.
    """
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    t = len(dataset.snapshots)
    if t < 10:
        raise ValueError(f"need at least 10 snapshots to split, got {t}")
    n_train = int(np.floor(fractions[0] * t))
    n_val = int(np.floor(fractions[1] * t))
    parts = (
        dataset.snapshots[:n_train],
        dataset.snapshots[n_train:n_train + n_val],
        dataset.snapshots[n_train + n_val:],
    )
    return tuple(replace(dataset, snapshots=part, norm_stats=dataset.norm_stats) for part in parts)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-8


def _column_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)  # population std
    return mean, np.maximum(std, STD_FLOOR)


def fit_normalizer(train: Dataset) -> NormStats:
    """Per-column mean/std over every training snapshot; std floored at 1e-8.

    Labels are never touched: the training loss is scale-relative already,
    and label statistics must not leak through preprocessing.
    """
    if not train.snapshots:
        raise ValueError("cannot fit a normalizer on an empty split")
    node = np.concatenate([s.node_features for s in train.snapshots], axis=0)
    edge_rows = [s.edge_features for s in train.snapshots if s.edge_features.size]
    resource = np.concatenate([s.resource_features for s in train.snapshots], axis=0)
    node_mean, node_std = _column_stats(node)
    if edge_rows:
        edge_mean, edge_std = _column_stats(np.concatenate(edge_rows, axis=0))
    else:
        edge_mean = np.zeros(train.edge_dim)
        edge_std = np.ones(train.edge_dim)
    res_mean, res_std = _column_stats(resource)
    return NormStats(node_mean, node_std, edge_mean, edge_std, res_mean, res_std)


def apply_normalizer(snapshot: Snapshot, stats: NormStats) -> Snapshot:
    """Z-score one snapshot's features (one-shot; labels pass through)."""
    return Snapshot(
        window_start=snapshot.window_start,
        node_features=(snapshot.node_features - stats.node_mean) / stats.node_std,
        edge_features=(snapshot.edge_features - stats.edge_mean) / stats.edge_std,
        resource_features=(snapshot.resource_features - stats.resource_mean) / stats.resource_std,
        label=snapshot.label,
    )


def normalize_dataset(dataset: Dataset, stats: NormStats) -> Dataset:
    if dataset.norm_stats is not None:
        raise ValueError("dataset is already normalized; normalization is one-shot")
    snaps = tuple(apply_normalizer(s, stats) for s in dataset.snapshots)
    return replace(dataset, snapshots=snaps, norm_stats=stats)


# ---------------------------------------------------------------------------
# serialization: one JSON header line, then one JSON line per snapshot
# ---------------------------------------------------------------------------

_HEADER_FIELDS = {"format", "version", "topology", "dims", "normalization"}
_SNAPSHOT_FIELDS = {"window_start", "X", "E", "R", "y"}


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "topology": dataset.topology.to_dict(),
        "dims": {
            "node": dataset.node_dim,
            "edge": dataset.edge_dim,
            "resource": dataset.resource_dim,
        },
        "normalization": dataset.norm_stats.to_dict() if dataset.norm_stats else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for snap in dataset.snapshots:
            row = {
                "window_start": snap.window_start,
                "X": snap.node_features.tolist(),
                "E": snap.edge_features.tolist(),
                "R": snap.resource_features.tolist(),
                "y": snap.label,
            }
            fh.write(json.dumps(row) + "\n")


def _check_unknown(fields: set[str], allowed: set[str], line_no: int, strict: bool) -> None:
    unknown = fields - allowed
    if unknown:
        if strict:
            raise SchemaError(f"line {line_no}: unknown fields {sorted(unknown)}")
        logger.warning("line %d: ignoring unknown fields %s", line_no, sorted(unknown))


def load_dataset(path, strict: bool = True) -> Dataset:
    """Load a dataset file; raises :class:`ParseError` with the line number
    on malformed JSON and :class:`SchemaError` on structural problems."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty dataset file", line_number=1)

    def parse_json(line_no: int) -> dict:
        try:
            obj = json.loads(lines[line_no - 1])
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line_number=line_no, line=lines[line_no - 1][:80]) from exc
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", line_number=line_no)
        return obj

    header = parse_json(1)
    _check_unknown(set(header), _HEADER_FIELDS, 1, strict)
    if header.get("format") != DATASET_FORMAT:
        raise SchemaError(f"unexpected dataset format {header.get('format')!r}")
    if header.get("version") != DATASET_VERSION:
        raise SchemaError(f"unsupported dataset version {header.get('version')!r}")
    topology = Topology.from_dict(header.get("topology", {}))
    dims = header.get("dims", {})
    try:
        node_dim = int(dims["node"])
        edge_dim = int(dims["edge"])
        resource_dim = int(dims["resource"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed dims in header: {exc}") from exc
    norm = header.get("normalization")
    norm_stats = NormStats.from_dict(norm) if norm else None

    snapshots = []
    for line_no in range(2, len(lines) + 1):
        if not lines[line_no - 1].strip():
            continue
        row = parse_json(line_no)
        _check_unknown(set(row), _SNAPSHOT_FIELDS, line_no, strict)
        try:
            snap = Snapshot(
                window_start=float(row["window_start"]),
                node_features=np.asarray(row["X"], dtype=np.float64),
                edge_features=np.asarray(row["E"], dtype=np.float64).reshape(
                    -1, edge_dim),
                resource_features=np.asarray(row["R"], dtype=np.float64),
                label=None if row.get("y") is None else float(row["y"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed snapshot: {exc}", line_number=line_no) from exc
        snapshots.append(snap)

    dataset = Dataset(
        topology=topology,
        snapshots=tuple(snapshots),
        node_dim=node_dim,
        edge_dim=edge_dim,
        resource_dim=resource_dim,
        norm_stats=norm_stats,
    )
    dataset.validate()
    return dataset
