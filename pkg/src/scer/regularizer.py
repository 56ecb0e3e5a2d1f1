"""Embedding-level regularizer: group means, spurious/core directions, alignments.

The spurious direction averages mean-embedding differences across domains
within a class; the core direction averages differences across classes within
a domain. Both are linear (``signed``) or piecewise linear
(``elementwise_abs``) in the group means, so each builder also returns the
per-group coefficients needed to backpropagate into embeddings.

Covariance and its norms are constants of a step: gradients flow through the
classifier columns and the group means only.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import GroupKey
from .model import SoftmaxHead
from .numerics import sigma_norm

DIRECTION_MODES = ("signed", "elementwise_abs")
NORM_MODES = ("sigma", "euclidean")


class MissingPairsError(ValueError):
    """No class (or domain) has two groups present, so the direction is undefined."""


class ZeroDirectionError(ValueError):
    """A direction or classifier column has zero norm."""


@dataclass
class GroupMeans:
    means: dict[GroupKey, np.ndarray]
    counts: dict[GroupKey, int]

    def keys(self) -> list[GroupKey]:
        return sorted(self.means)


def _split_keys(keys):
    arr = np.asarray(keys, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"keys must be (class, domain) pairs, got shape {arr.shape}")
    return arr[:, 0], arr[:, 1]


def group_means(embeddings, keys) -> GroupMeans:
    """Per-group arithmetic means. ``keys`` is a sequence of ``(class, domain)`` pairs."""
    h = np.asarray(embeddings, dtype=np.float64)
    if h.ndim != 2 or len(h) == 0:
        raise ValueError("group_means needs a non-empty (n, p) batch")
    labels, domains = _split_keys(keys)
    if len(labels) != len(h):
        raise ValueError("embeddings and keys must have equal length")
    means, counts = {}, {}
    for y, d in sorted(set(zip(labels.tolist(), domains.tolist()))):
        mask = (labels == y) & (domains == d)
        key = GroupKey(y, d)
        means[key] = h[mask].mean(axis=0)
        counts[key] = int(mask.sum())
    return GroupMeans(means, counts)


@dataclass
class Direction:
    """A direction vector plus ``d(vector)/d(mean_g)`` as an elementwise coefficient per group."""

    vector: np.ndarray
    jacobian: dict[GroupKey, np.ndarray] = field(default_factory=dict)


def _pair_average(gm: GroupMeans, outer_axis: int, mode: str) -> Direction:
    if mode not in DIRECTION_MODES:
        raise ValueError(f"direction mode must be one of {DIRECTION_MODES}, got {mode!r}")
    buckets: dict[int, list[GroupKey]] = {}
    for key in gm.keys():
        buckets.setdefault(key[outer_axis], []).append(key)
    usable = {o: ks for o, ks in buckets.items() if len(ks) >= 2}
    if not usable:
        axis = "class" if outer_axis == 0 else "domain"
        raise MissingPairsError(f"no {axis} has two groups present in the batch")
    p = next(iter(gm.means.values())).shape[0]
    total = np.zeros(p)
    jac: dict[GroupKey, np.ndarray] = {}
    outer_w = 1.0 / len(usable)
    for o in sorted(usable):
        pairs = list(itertools.combinations(usable[o], 2))
        w = outer_w / len(pairs)
        for a, b in pairs:
            diff = gm.means[a] - gm.means[b]
            if mode == "signed":
                total += w * diff
                coef = np.full(p, w)
            else:
                total += w * np.abs(diff)
                coef = w * np.sign(diff)
            jac[a] = jac.get(a, 0.0) + coef
            jac[b] = jac.get(b, 0.0) - coef
    return Direction(total, jac)


def spurious_direction(gm: GroupMeans, mode: str = "signed") -> np.ndarray:
    """Average over classes of the mean pairwise domain difference ``mu[y, d_i] - mu[y, d_j]`` (i < j)."""
    return _pair_average(gm, 0, mode).vector


def core_direction(gm: GroupMeans, mode: str = "signed") -> np.ndarray:
    """Average over domains of the mean pairwise class difference ``mu[y_i, d] - mu[y_j, d]`` (i < j)."""
    return _pair_average(gm, 1, mode).vector


def _norm(v: np.ndarray, sigma: np.ndarray, norm_mode: str) -> float:
    if norm_mode == "sigma":
        return sigma_norm(v, sigma)
    if norm_mode == "euclidean":
        return float(np.linalg.norm(v))
    raise ValueError(f"norm mode must be one of {NORM_MODES}, got {norm_mode!r}")


def _metric(sigma: np.ndarray, p: int, norm_mode: str) -> np.ndarray:
    return np.asarray(sigma, dtype=np.float64) if norm_mode == "sigma" else np.eye(p)


def weight_alignment(head: SoftmaxHead, delta, sigma, norm_mode: str = "sigma") -> float:
    """Class-averaged alignment of the classifier columns with ``delta``.

    Euclidean inner product over the product of the two norms, as written; the
    value is not clamped and can exceed 1 in magnitude when the norm is not
    Euclidean.
    """
    delta = np.asarray(delta, dtype=np.float64)
    dnorm = _norm(delta, sigma, norm_mode)
    if dnorm == 0.0:
        raise ZeroDirectionError("direction has zero norm")
    total = 0.0
    for j in range(head.num_classes):
        col = head.beta[:, j]
        cnorm = _norm(col, sigma, norm_mode)
        if cnorm == 0.0:
            raise ZeroDirectionError(f"classifier column {j} has zero norm")
        total += float(col @ delta) / (cnorm * dnorm)
    return total / head.num_classes


@dataclass
class DirectionSet:
    delta_spur: np.ndarray | None
    delta_core: np.ndarray | None
    mag_spur: float
    mag_core: float
    direction_mode: str = "signed"
    norm_mode: str = "sigma"
    spur_jacobian: dict = field(default_factory=dict, repr=False)
    core_jacobian: dict = field(default_factory=dict, repr=False)


def build_directions(gm: GroupMeans, sigma, direction_mode: str = "signed",
                     norm_mode: str = "sigma") -> DirectionSet:
    """Both directions and their magnitudes. A direction whose pairs are all missing is ``None``."""
    out = {}
    for name, axis in (("spur", 0), ("core", 1)):
        try:
            out[name] = _pair_average(gm, axis, direction_mode)
        except MissingPairsError:
            out[name] = None

    def mag(d):
        return 0.0 if d is None else _norm(d.vector, sigma, norm_mode)

    return DirectionSet(
        delta_spur=None if out["spur"] is None else out["spur"].vector,
        delta_core=None if out["core"] is None else out["core"].vector,
        mag_spur=mag(out["spur"]),
        mag_core=mag(out["core"]),
        direction_mode=direction_mode,
        norm_mode=norm_mode,
        spur_jacobian={} if out["spur"] is None else out["spur"].jacobian,
        core_jacobian={} if out["core"] is None else out["core"].jacobian,
    )


@dataclass
class AlignmentReport:
    cor_spur: float
    cor_core: float
    mag_spur: float
    mag_core: float
    loss_spur: float
    loss_core: float
    loss_embedding: float


def _term(head, delta, mag, sigma, norm_mode, lam) -> tuple[float, float]:
    if lam == 0.0 or delta is None:
        return 0.0, 0.0
    cor = weight_alignment(head, delta, sigma, norm_mode)
    return cor, cor * mag


def embedding_loss(head: SoftmaxHead, dirs: DirectionSet, sigma,
                   lambda_spur: float = 1.0, lambda_core: float = 1.0) -> AlignmentReport:
    """``lambda_spur * L_spur - lambda_core * L_core`` with ``L = cor * magnitude``.

    A term with zero weight, or whose direction is unavailable, is exactly 0.
    """
    if lambda_spur < 0 or lambda_core < 0:
        raise ValueError("lambdas must be nonnegative")
    cor_s, loss_s = _term(head, dirs.delta_spur, dirs.mag_spur, sigma, dirs.norm_mode, lambda_spur)
    cor_c, loss_c = _term(head, dirs.delta_core, dirs.mag_core, sigma, dirs.norm_mode, lambda_core)
    return AlignmentReport(
        cor_spur=cor_s,
        cor_core=cor_c,
        mag_spur=dirs.mag_spur,
        mag_core=dirs.mag_core,
        loss_spur=loss_s,
        loss_core=loss_c,
        loss_embedding=lambda_spur * loss_s - lambda_core * loss_c,
    )


def alignment_snapshot(head: SoftmaxHead, dirs: DirectionSet, sigma) -> AlignmentReport:
    """Unweighted alignment metrics, computed even when the matching lambda is 0."""
    return embedding_loss(head, dirs, sigma, 1.0 if dirs.delta_spur is not None else 0.0,
                          1.0 if dirs.delta_core is not None else 0.0)


@dataclass
class EmbeddingGrads:
    beta: np.ndarray
    means: dict[GroupKey, np.ndarray]

    def per_sample(self, keys, counts: dict[GroupKey, int], p: int) -> np.ndarray:
        """Spread mean gradients back to rows: ``dL/dh_i = dL/dmu_g / n_g``."""
        labels, domains = _split_keys(keys)
        out = np.zeros((len(labels), p))
        for key, g in self.means.items():
            mask = (labels == key[0]) & (domains == key[1])
            out[mask] = g / counts[key]
        return out


def embedding_loss_grads(head: SoftmaxHead, dirs: DirectionSet, sigma,
                         lambda_spur: float = 1.0, lambda_core: float = 1.0) -> EmbeddingGrads:
    """Exact gradients of :func:`embedding_loss` w.r.t. ``beta`` and each group mean.

    ``cor * |delta|`` reduces to ``(1/m) sum_j beta_j^T delta / |beta_j|``, so the
    direction gradient is ``(1/m) sum_j beta_j / |beta_j|`` and the column
    gradient is ``(delta - (beta_j^T delta) S beta_j / |beta_j|^2) / (m |beta_j|)``
    with ``S`` the norm's metric.
    """
    m = head.num_classes
    p = head.dim
    metric = _metric(sigma, p, dirs.norm_mode)
    g_beta = np.zeros_like(head.beta)
    g_means: dict[GroupKey, np.ndarray] = {}
    terms = ((lambda_spur, dirs.delta_spur, dirs.spur_jacobian), (-lambda_core, dirs.delta_core, dirs.core_jacobian))
    for weight, delta, jac in terms:
        if weight == 0.0 or delta is None:
            continue
        if _norm(delta, sigma, dirs.norm_mode) == 0.0:
            raise ZeroDirectionError("direction has zero norm")
        g_delta = np.zeros(p)
        for j in range(m):
            col = head.beta[:, j]
            s_col = metric @ col
            cn = float(np.sqrt(max(col @ s_col, 0.0)))
            if cn == 0.0:
                raise ZeroDirectionError(f"classifier column {j} has zero norm")
            g_beta[:, j] += weight * (delta / cn - (col @ delta) * s_col / cn**3) / m
            g_delta += weight * col / (cn * m)
        for key, coef in jac.items():
            g_means[key] = g_means.get(key, 0.0) + coef * g_delta
    return EmbeddingGrads(g_beta, g_means)
