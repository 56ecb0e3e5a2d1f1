"""Group-DRO weights, the weighted group loss and accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GroupKey
from .regularizer import AlignmentReport


@dataclass(frozen=True)
class RobustState:
    """Simplex weights ``q`` over the ``(m, k)`` groups and the EG step size ``eta``."""

    q: np.ndarray
    eta: float = 0.01

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 2:
            raise ValueError(f"q must be an (m, k) table, got shape {q.shape}")
        if np.any(q <= 0) or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError("q must be strictly positive and sum to 1")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        object.__setattr__(self, "q", q)

    @classmethod
    def uniform(cls, num_classes: int, num_domains: int, eta: float = 0.01) -> "RobustState":
        return cls(np.full((num_classes, num_domains), 1.0 / (num_classes * num_domains)), eta)


@dataclass(frozen=True)
class GroupLossTable:
    losses: np.ndarray
    counts: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0


def group_loss_table(losses, labels, domains, num_classes: int, num_domains: int) -> GroupLossTable:
    """Mean per-sample loss per group; groups without samples get loss 0 and count 0."""
    losses = np.asarray(losses, dtype=np.float64)
    flat = np.asarray(labels) * num_domains + np.asarray(domains)
    size = num_classes * num_domains
    counts = np.bincount(flat, minlength=size)
    sums = np.bincount(flat, weights=losses, minlength=size)
    means = np.divide(sums, counts, out=np.zeros(size), where=counts > 0)
    return GroupLossTable(means.reshape(num_classes, num_domains), counts.reshape(num_classes, num_domains))


def eg_update(state: RobustState, table: GroupLossTable) -> RobustState:
    """Exponentiated-gradient step ``q_g <- q_g exp(eta * L_g)``, then renormalize.

    Absent groups are left alone before renormalization. The largest exponent is
    subtracted first to avoid overflow, and weights are floored at the smallest
    normal float so an extreme loss gap cannot push q off the open simplex.
    """
    present = table.present
    if not present.any():
        return state
    expo = np.where(present, state.eta * table.losses, 0.0)
    expo -= expo[present].max()
    q = np.maximum(state.q * np.exp(expo), np.finfo(np.float64).tiny)
    return RobustState(q / q.sum(), state.eta)


def weighted_group_loss(state: RobustState, table: GroupLossTable) -> float:
    return float(np.sum(np.where(table.present, state.q * table.losses, 0.0)))


def total_loss(l_wge: float, report: AlignmentReport) -> float:
    return l_wge + report.loss_embedding


@dataclass
class Metrics:
    avg_acc: float
    worst_acc: float
    per_group_acc: dict[GroupKey, float]
    per_group_count: dict[GroupKey, int]

    def as_row(self, prefix: str = "") -> dict:
        row = {f"{prefix}avg_acc": self.avg_acc, f"{prefix}worst_acc": self.worst_acc}
        for key, acc in sorted(self.per_group_acc.items()):
            row[f"{prefix}acc_y{key[0]}_d{key[1]}"] = acc
        return row


def compute_metrics(predictions, labels, domains) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if len(labels) == 0:
        raise ValueError("compute_metrics needs at least one sample")
    if not len(predictions) == len(labels) == len(domains):
        raise ValueError("predictions, labels and domains must have equal length")
    correct = predictions == labels
    per_group, counts = {}, {}
    for y, d in sorted(set(zip(labels.tolist(), domains.tolist()))):
        mask = (labels == y) & (domains == d)
        per_group[GroupKey(y, d)] = float(correct[mask].mean())
        counts[GroupKey(y, d)] = int(mask.sum())
    return Metrics(float(correct.mean()), min(per_group.values()), per_group, counts)
