"""Asymmetric percentage loss, metrics, the training loop, and flat baselines.

The loss operates on the relative error e_p = (pred - truth) / (truth + eps)
and is piecewise: linear with slope alpha_L * theta_L left of -theta_L,
quadratic in between, linear with slope alpha_R * theta_R right of theta_R.
With alpha_L > alpha_R under-prediction costs more than over-prediction,
which is the right asymmetry when a missed latency spike means a missed
scaling action. The printed piecewise form is implemented verbatim, jumps
at the region boundaries included; a continuity-corrected variant exists
behind a flag and is never the default.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import SchemaError, TrainingError
from .fusion import LatencyModel, ModelConfig, build_variant
from .nn import MLP, Module
from .statgraph import (
    Dataset,
    NormStats,
    Snapshot,
    chronological_split,
    fit_normalizer,
    normalize_dataset,
)
from .tensor import Adam, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossParams:
    theta_left: float = 0.2
    theta_right: float = 0.2
    alpha_left: float = 8.0
    alpha_right: float = 4.0
    eps: float = 1e-8
    continuous: bool = False  # continuity-corrected linear branches (non-default)

    def __post_init__(self):
        if self.theta_left <= 0 or self.theta_right <= 0:
            raise ValueError("thresholds must be > 0")
        if not (self.alpha_left > self.alpha_right >= 1.0):
            raise ValueError(
                f"need alpha_left > alpha_right >= 1, got {self.alpha_left}, {self.alpha_right}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def percentage_error(pred: float, truth: float, eps: float = 1e-8) -> float:
    """Relative error e_p = (pred - truth) / (truth + eps)."""
    if truth < 0:
        raise ValueError(f"truth must be >= 0, got {truth}")
    return (pred - truth) / (truth + eps)


def aph_loss(e_p: float, params: LossParams = LossParams()) -> float:
    """Scalar asymmetric percentage Huber loss (reference implementation)."""
    tl, tr = params.theta_left, params.theta_right
    al, ar = params.alpha_left, params.alpha_right
    if e_p < -tl:
        if params.continuous:
            return -tl * al * (e_p + tl) + tl * tl
        return -tl * (al * e_p + tl)
    if e_p < tr:
        return e_p * e_p
    if params.continuous:
        return tr * ar * (e_p - tr) + tr * tr
    return tr * (ar * e_p - tr)


def aph_loss_tensor(e: Tensor, params: LossParams = LossParams()) -> Tensor:
    """Elementwise loss as a differentiable tensor op.

    Branch membership is decided on values (constants), so the gradient is
    the active branch's derivative; the two boundary points take the
    subgradient of whichever branch the comparison assigns them to.
    """
    tl, tr = params.theta_left, params.theta_right
    al, ar = params.alpha_left, params.alpha_right
    d = e.data
    mask_left = Tensor(d < -tl)
    mask_quad = Tensor((d >= -tl) & (d < tr))
    mask_right = Tensor(d >= tr)
    if params.continuous:
        left = T.add(T.scale(e, -tl * al), Tensor(-tl * al * tl + tl * tl))
        right = T.add(T.scale(e, tr * ar), Tensor(tr * tr - ar * tr * tr))
    else:
        left = T.add(T.scale(e, -tl * al), Tensor(-tl * tl))
        right = T.add(T.scale(e, tr * ar), Tensor(-tr * tr))
    quad = T.square(e)
    return T.add(T.add(T.mul(mask_left, left), T.mul(mask_quad, quad)), T.mul(mask_right, right))


def batch_loss(pred: Tensor, labels: np.ndarray, params: LossParams) -> Tensor:
    """Mean loss of a (B, 1) prediction tensor against (B,) labels."""
    y = labels.reshape(-1, 1)
    e = T.mul(T.sub(pred, Tensor(y)), Tensor(1.0 / (y + params.eps)))
    return T.tmean(aph_loss_tensor(e, params))


@dataclass(frozen=True)
class Metrics:
    mae: float    # seconds
    rmse: float   # seconds
    mape: float   # percent

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(preds, labels) -> Metrics:
    """MAE / RMSE (seconds) and MAPE (%); labels must be strictly positive."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError(f"need equal nonempty shapes, got {preds.shape} vs {labels.shape}")
    if np.any(labels <= 0):
        raise ValueError("labels must be > 0 for MAPE")
    err = labels - preds
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    mape = float(100.0 * np.mean(np.abs(err) / labels))
    return Metrics(mae=mae, rmse=rmse, mape=mape)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0     # write an extra checkpoint every N epochs (0 = off)
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainReport:
    variant: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    test_mae: float | None = None
    test_rmse: float | None = None
    test_mape: float | None = None
    train_snapshots: int = 0
    val_snapshots: int = 0
    test_snapshots: int = 0
    wall_clock_s: float | None = None
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        # wall clock is reported on stdout only: fixed-seed reruns must
        # produce byte-identical report files
        return {
            "variant": self.variant,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "test_mae": self.test_mae,
            "test_rmse": self.test_rmse,
            "test_mape": self.test_mape,
            "train_snapshots": self.train_snapshots,
            "val_snapshots": self.val_snapshots,
            "test_snapshots": self.test_snapshots,
            "checkpoint_path": self.checkpoint_path,
            "epochs": [asdict(e) for e in self.epochs],
        }


class _Trainable(Module):
    """Anything with forward_snapshots(), parameters(), train()/eval()."""

    def forward_snapshots(self, snapshots: list[Snapshot]) -> Tensor:  # pragma: no cover
        raise NotImplementedError


def _param_norms(model) -> str:
    norms = {name: float(np.sqrt((p.data ** 2).sum())) for name, p in model.parameters().items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:3]
    return ", ".join(f"{k}={v:.3g}" for k, v in worst)


def _split_loss(model, snapshots, params: LossParams, batch_size: int = 256) -> float:
    total = 0.0
    for i in range(0, len(snapshots), batch_size):
        chunk = snapshots[i:i + batch_size]
        pred = model.forward_snapshots(chunk)
        labels = np.asarray([s.label for s in chunk])
        total += batch_loss(pred, labels, params).item() * len(chunk)
    return total / len(snapshots)


def _predict(model, snapshots, batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(snapshots), batch_size):
        out = model.forward_snapshots(snapshots[i:i + batch_size])
        preds.append(out.data.reshape(-1))
    return np.concatenate(preds)


def run_training(
    model,
    train_snaps: list[Snapshot],
    val_snaps: list[Snapshot],
    test_snaps: list[Snapshot],
    config: TrainConfig,
    loss_params: LossParams,
    shuffle_rng: np.random.Generator,
    variant: str,
    checkpoint_writer=None,
) -> TrainReport:
    """Mini-batch Adam over shuffled training windows with best-val selection.

    Snapshots are independent supervised examples, so shuffling is valid.
    The test list is only touched once, after the best-validation parameters
    have been restored.
    """
    start = time.monotonic()
    report = TrainReport(
        variant=variant,
        train_snapshots=len(train_snaps),
        val_snapshots=len(val_snaps),
        test_snapshots=len(test_snaps),
    )
    optimizer = Adam(model.parameters(), learning_rate=config.learning_rate,
                     clip_norm=config.clip_norm)
    best_val = math.inf
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(1, config.epochs + 1):
        model.train(True)
        order = shuffle_rng.permutation(len(train_snaps))
        epoch_loss = 0.0
        for b_start in range(0, len(order), config.batch_size):
            idx = order[b_start:b_start + config.batch_size]
            chunk = [train_snaps[i] for i in idx]
            pred = model.forward_snapshots(chunk)
            labels = np.asarray([s.label for s in chunk])
            loss = batch_loss(pred, labels, loss_params)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // config.batch_size}; "
                    f"largest parameter norms: {_param_norms(model)}")
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            epoch_loss += loss_val * len(chunk)
        model.eval()
        train_loss = epoch_loss / len(train_snaps)
        val_loss = _split_loss(model, val_snaps, loss_params)
        report.epochs.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = {name: p.data.copy() for name, p in model.parameters().items()}
            report.best_epoch = epoch
        if checkpoint_writer and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint_writer(model, epoch)

    if best_params is not None:
        for name, p in model.parameters().items():
            p.data = best_params[name].copy()
    report.best_val_loss = best_val

    model.eval()
    preds = _predict(model, test_snaps)
    labels = np.asarray([s.label for s in test_snaps])
    m = metrics(preds, labels)
    report.test_mae, report.test_rmse, report.test_mape = m.mae, m.rmse, m.mape
    report.wall_clock_s = time.monotonic() - start
    return report


def center_output_bias(model, train_snaps: list[Snapshot]) -> None:
    """Start the head at the train-split mean label (softplus-inverse bias).

    The first prediction then equals the mean predictor, which removes the
    long initial climb from softplus(~0) toward the label scale. Uses the
    training split only.
    """
    mean_label = float(np.mean([s.label for s in train_snaps]))
    # inverse of softplus: log(exp(y) - 1), stable form
    inv = mean_label + math.log1p(-math.exp(-mean_label))
    final = model.head.layers[-1]
    final.b.data[:] = inv


@dataclass
class TrainedModel:
    model: LatencyModel
    norm_stats: NormStats
    config: ModelConfig


def _prepare_splits(dataset: Dataset):
    if len(dataset) < 10:
        raise ValueError(f"need at least 10 snapshots to train, got {len(dataset)}")
    if any(s.label is None for s in dataset.snapshots):
        raise SchemaError("training requires labels on every snapshot")
    train_ds, val_ds, test_ds = chronological_split(dataset)
    stats = fit_normalizer(train_ds)
    return (
        list(normalize_dataset(train_ds, stats).snapshots),
        list(normalize_dataset(val_ds, stats).snapshots),
        list(normalize_dataset(test_ds, stats).snapshots),
        stats,
    )


def train(
    dataset: Dataset,
    variant: str = "full",
    config: TrainConfig = TrainConfig(),
    loss_params: LossParams = LossParams(),
    model_config: ModelConfig | None = None,
    checkpoint_writer=None,
) -> tuple[TrainReport, TrainedModel]:
    """Split chronologically, standardize on the training split, fit, report.

    Fully seed-deterministic: parameter init, batch shuffling, and dropout
    all derive from ``config.seed``.
    """
    train_snaps, val_snaps, test_snaps, stats = _prepare_splits(dataset)
    base = model_config if model_config is not None else ModelConfig()
    base = replace(base, variant=variant)
    seed_model, seed_shuffle = np.random.SeedSequence(config.seed).spawn(2)
    model = LatencyModel(base, dataset.topology, seed=seed_model)
    center_output_bias(model, train_snaps)
    report = run_training(
        model, train_snaps, val_snaps, test_snaps, config, loss_params,
        shuffle_rng=np.random.default_rng(seed_shuffle), variant=variant,
        checkpoint_writer=checkpoint_writer,
    )
    return report, TrainedModel(model=model, norm_stats=stats, config=base)


# ---------------------------------------------------------------------------
# flat baselines
# ---------------------------------------------------------------------------


def flat_features(snapshot: Snapshot) -> np.ndarray:
    """X, E, R flattened into one vector (length |V|d_n + |E|d_e + |V|d_r)."""
    return np.concatenate([
        snapshot.node_features.reshape(-1),
        snapshot.edge_features.reshape(-1),
        snapshot.resource_features.reshape(-1),
    ])


def linear_regression(dataset: Dataset, damping: float = 1e-8) -> tuple[TrainReport, np.ndarray]:
    """Least-squares on flat features via damped normal equations.

    The ridge damping is always applied; a warning is logged when the normal
    matrix is ill-conditioned enough for the damping to matter.
    """
    train_snaps, val_snaps, test_snaps, _ = _prepare_splits(dataset)

    def design(snaps):
        rows = np.stack([flat_features(s) for s in snaps])
        return np.hstack([rows, np.ones((len(snaps), 1))])

    a = design(train_snaps)
    y = np.asarray([s.label for s in train_snaps])
    gram = a.T @ a
    cond = np.linalg.cond(gram)
    if cond > 1e12:
        logger.warning("normal matrix is near-singular (cond=%.3g); ridge damping %.1g applied",
                       cond, damping)
    weights = np.linalg.solve(gram + damping * np.eye(gram.shape[0]), a.T @ y)

    preds = design(test_snaps) @ weights
    labels = np.asarray([s.label for s in test_snaps])
    m = metrics(preds, labels)
    report = TrainReport(
        variant="linear",
        train_snapshots=len(train_snaps),
        val_snapshots=len(val_snaps),
        test_snapshots=len(test_snaps),
        test_mae=m.mae, test_rmse=m.rmse, test_mape=m.mape,
    )
    return report, weights


class FlatRegressor(_Trainable):
    """Two-hidden-layer MLP on flattened features with a softplus output."""

    def __init__(self, num_features: int, hidden: int, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.head = MLP([num_features, hidden, hidden, 1], rng)

    def forward_snapshots(self, snapshots: list[Snapshot]) -> Tensor:
        rows = np.stack([flat_features(s) for s in snapshots])
        return T.softplus(self.head(Tensor(rows)))


def mlp_baseline(
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    loss_params: LossParams = LossParams(),
    hidden: int = 64,
) -> tuple[TrainReport, FlatRegressor]:
    """Flat-vector MLP trained with the same loss and optimizer as the model."""
    train_snaps, val_snaps, test_snaps, _ = _prepare_splits(dataset)
    seed_model, seed_shuffle = np.random.SeedSequence(config.seed).spawn(2)
    model = FlatRegressor(len(flat_features(train_snaps[0])), hidden, seed=seed_model)
    center_output_bias(model, train_snaps)
    report = run_training(
        model, train_snaps, val_snaps, test_snaps, config, loss_params,
        shuffle_rng=np.random.default_rng(seed_shuffle), variant="mlp",
    )
    return report, model
