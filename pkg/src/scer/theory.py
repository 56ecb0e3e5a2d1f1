"""Closed-form worst-group error for Gaussian group models, and a Monte Carlo check.

Binary conventions (class index 1 is the positive label, domain index 0 is
the first domain)::

    delta_core = mu[1, d] - mu[0, d]      (same for every d)
    delta_spur = mu[y, 0] - mu[y, 1]      (same for every y)
    mu[y, d]   = offset + s(y) delta_core / 2 + s(d) delta_spur / 2
    s(1) = +1, s(0) = -1 for classes;  s(0) = +1, s(1) = -1 for domains

Under extreme spurious correlation only groups (1, 0) and (0, 1) are observed.
Their mean difference is ``delta_core + delta_spur``, and the intercept is
``-beta^T E[x]`` with ``E[x]`` the midpoint of the observed means.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .data import GroupGaussianSpec, GroupKey, sample_group
from .model import SoftmaxHead, predict, softmax_xent
from .numerics import as_square, sigma_norm, solve_spd, std_normal_cdf

OBSERVED_EXTREME = (GroupKey(1, 0), GroupKey(0, 1))


@dataclass(frozen=True)
class BinaryTheoryInstance:
    delta_core: np.ndarray
    delta_spur: np.ndarray
    sigma: np.ndarray
    offset: np.ndarray | None = None

    def __post_init__(self):
        dc = np.asarray(self.delta_core, dtype=np.float64)
        ds = np.asarray(self.delta_spur, dtype=np.float64)
        sigma = as_square(self.sigma)
        if dc.shape != ds.shape or sigma.shape != (dc.shape[0], dc.shape[0]):
            raise ValueError("delta_core, delta_spur and sigma dimensions disagree")
        offset = np.zeros_like(dc) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        object.__setattr__(self, "delta_core", dc)
        object.__setattr__(self, "delta_spur", ds)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "offset", offset)

    @property
    def delta_tilde(self) -> np.ndarray:
        return self.delta_core + self.delta_spur

    def group_mean(self, y: int, d: int) -> np.ndarray:
        sy = 1.0 if y == 1 else -1.0
        sd = 1.0 if d == 0 else -1.0
        return self.offset + 0.5 * sy * self.delta_core + 0.5 * sd * self.delta_spur

    def observed_midpoint(self) -> np.ndarray:
        return 0.5 * sum(self.group_mean(*k) for k in OBSERVED_EXTREME)

    def to_group_spec(self, extreme: bool = True) -> GroupGaussianSpec:
        means = np.array([[self.group_mean(y, d) for d in (0, 1)] for y in (0, 1)])
        probs = np.zeros((2, 2))
        if extreme:
            for key in OBSERVED_EXTREME:
                probs[key] = 0.5
        else:
            probs[:] = 0.25
        return GroupGaussianSpec(means, self.sigma, probs)

    def to_dict(self) -> dict:
        return {
            "delta_core": self.delta_core.tolist(),
            "delta_spur": self.delta_spur.tolist(),
            "sigma": self.sigma.tolist(),
            "offset": self.offset.tolist(),
        }


def erm_direction(inst: BinaryTheoryInstance) -> np.ndarray:
    """Population cross-entropy direction ``Sigma^{-1} (delta_core + delta_spur)``, unnormalized."""
    dt = inst.delta_tilde
    if not np.any(dt):
        raise ValueError("delta_core + delta_spur is zero; the ERM direction is undefined")
    return solve_spd(inst.sigma, dt)


def fit_softmax_head(x, labels, num_classes: int, tol: float = 1e-10, max_iter: int = 1000) -> SoftmaxHead:
    """Unregularized maximum-likelihood softmax head, fitted with L-BFGS from zero."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n, p = x.shape
    size = p * num_classes

    def objective(theta):
        beta = theta[:size].reshape(p, num_classes)
        losses, probs = softmax_xent(x @ beta + theta[size:], labels)
        g = probs
        g[np.arange(n), labels] -= 1.0
        g /= n
        return float(losses.mean()), np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])

    res = minimize(objective, np.zeros(size + num_classes), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0})
    return SoftmaxHead(res.x[:size].reshape(p, num_classes).copy(), res.x[size:].copy())


def angle_degrees(u, v, sign_free: bool = True) -> float:
    """Angle between two vectors; ``sign_free`` aligns signs first (result in [0, 90])."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    if sign_free:
        c = abs(c)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def midpoint_intercept(beta, inst: BinaryTheoryInstance) -> float:
    return -float(np.asarray(beta) @ inst.observed_midpoint())


def subgroup_error(beta, beta0: float, mu, sigma, y: int) -> float:
    """Misclassification probability of ``sign(beta^T x + beta0)`` on ``N(mu, sigma)`` with label ``y = +-1``."""
    if y not in (1, -1):
        raise ValueError(f"y must be +1 or -1, got {y}")
    beta = np.asarray(beta, dtype=np.float64)
    scale = sigma_norm(beta, sigma)
    if scale == 0.0:
        raise ValueError("beta must be nonzero")
    return std_normal_cdf(-y * (float(beta @ np.asarray(mu)) + beta0) / scale)


def subgroup_errors(beta, inst: BinaryTheoryInstance, beta0: float | None = None) -> dict[GroupKey, float]:
    """Closed-form error of every ``(y, d)`` cell, observed or not."""
    if beta0 is None:
        beta0 = midpoint_intercept(beta, inst)
    return {
        GroupKey(y, d): subgroup_error(beta, beta0, inst.group_mean(y, d), inst.sigma, 1 if y == 1 else -1)
        for y in (0, 1)
        for d in (0, 1)
    }


def single_cor(v, u, sigma) -> float:
    """One-column alignment ``v^T u / (|v|_S |u|_S)``."""
    nv = sigma_norm(v, sigma)
    nu = sigma_norm(u, sigma)
    if nv == 0.0 or nu == 0.0:
        raise ValueError("alignment of a zero vector is undefined")
    return float(np.asarray(v) @ np.asarray(u)) / (nv * nu)


def orient(beta, inst: BinaryTheoryInstance) -> np.ndarray:
    """``beta`` or ``-beta``, whichever scores the observed groups on the right side (``beta^T delta_tilde >= 0``).

    Both signs describe the same boundary; this picks the labelling.
    """
    beta = np.asarray(beta, dtype=np.float64)
    return -beta if float(beta @ inst.delta_tilde) < 0 else beta


def wge_decomposition(beta, inst: BinaryTheoryInstance, core_weight: float = 0.5) -> float:
    """``Phi(|cor_spur| |delta_spur| / 2 - core_weight * cor_core |delta_core|)``.

    With the midpoint intercept this is the exact worst-group error when
    ``core_weight=0.5``: observed cells err with ``Phi(-(a + b) / 2)`` and the
    two unseen cells with ``Phi((b - a) / 2)``, where ``a``/``b`` are the core
    and spurious projections. The absolute value picks the less favorable sign.
    Other weights are kept for comparison against looser formulas. ``beta`` is
    oriented first, see :func:`orient`.
    """
    beta = orient(beta, inst)
    if not np.any(beta):
        raise ValueError("beta must be nonzero")
    s = inst.sigma
    spur = 0.0
    if np.any(inst.delta_spur):
        spur = single_cor(beta, inst.delta_spur, s) * sigma_norm(inst.delta_spur, s)
    core = 0.0
    if np.any(inst.delta_core):
        core = single_cor(beta, inst.delta_core, s) * sigma_norm(inst.delta_core, s)
    return std_normal_cdf(0.5 * abs(spur) - core_weight * core)


def wge_binary(beta, inst: BinaryTheoryInstance, observed_only: bool = False) -> float:
    """Worst-group error of ``sign(beta^T x + beta0)`` with the midpoint intercept.

    Defaults to the worst over all four cells, including the unseen ones.
    ``beta`` is oriented first, so the result depends only on the boundary.
    """
    errs = subgroup_errors(orient(beta, inst), inst)
    if observed_only:
        return max(errs[k] for k in OBSERVED_EXTREME)
    return max(errs.values())


def multiclass_erm_pair_direction(core_ij, spur_pq, sigma) -> np.ndarray:
    """``Sigma^{-1} (core_ij + spur_pq)``, proportional to ``beta_i - beta_j`` at the ERM optimum."""
    total = np.asarray(core_ij, dtype=np.float64) + np.asarray(spur_pq, dtype=np.float64)
    if not np.any(total):
        raise ValueError("core_ij + spur_pq is zero")
    return solve_spd(sigma, total)


MarginTable = dict  # (i, j) -> standardized margin of class i over class j


def margin_table(head: SoftmaxHead, mu, sigma) -> MarginTable:
    """Standardized pairwise margins ``m_{i->j}`` on a subgroup with mean ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    table = {}
    m = head.num_classes
    for i, j in itertools.permutations(range(m), 2):
        diff = head.beta[:, i] - head.beta[:, j]
        scale = sigma_norm(diff, sigma)
        if scale == 0.0:
            raise ValueError(f"classes {i} and {j} have identical weight columns")
        table[(i, j)] = (float(diff @ mu) + float(head.beta0[i] - head.beta0[j])) / scale
    return table


def subgroup_error_bounds(margins: MarginTable, true_class: int) -> tuple[float, float]:
    """Max single-pair error below, union bound (capped at 1) above."""
    terms = [std_normal_cdf(-v) for (i, _), v in sorted(margins.items()) if i == true_class]
    if not terms:
        raise ValueError(f"no margins for class {true_class}")
    return max(terms), min(1.0, sum(terms))


def conservative_core_spur_margin(pair_dir, core_ij, spur_set, sigma) -> float:
    """Core term minus the largest absolute spurious term over domain pairs."""
    pair_dir = np.asarray(pair_dir, dtype=np.float64)
    core_ij = np.asarray(core_ij, dtype=np.float64)
    if not np.any(pair_dir) or not np.any(core_ij):
        raise ValueError("pair_dir and core_ij must be nonzero")
    value = single_cor(pair_dir, core_ij, sigma) * sigma_norm(core_ij, sigma)
    spur_terms = [
        abs(single_cor(pair_dir, s, sigma)) * sigma_norm(s, sigma) for s in spur_set if np.any(s)
    ]
    if spur_terms:
        value -= max(spur_terms)
    return value


@dataclass
class LinearRule:
    """Binary rule: class 1 when ``beta^T x + beta0 > 0``."""

    beta: np.ndarray
    beta0: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x) @ self.beta + self.beta0 > 0).astype(np.int64)


@dataclass
class SoftmaxRule:
    head: SoftmaxHead

    def __call__(self, x) -> np.ndarray:
        return np.atleast_1d(predict(self.head, x))


@dataclass
class BayesClassifier:
    """Shared-covariance discriminant ``x^T S^-1 mu_i - mu_i^T S^-1 mu_i / 2 + log pi_i``."""

    means: np.ndarray
    sigma: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        self._w = solve_spd(self.sigma, self.means.T)  # (p, m)
        with np.errstate(divide="ignore"):
            self._c = -0.5 * np.einsum("ip,pi->i", self.means, self._w) + np.log(self.priors)

    def discriminants(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self._w + self._c

    def __call__(self, x) -> np.ndarray:
        return np.atleast_1d(np.argmax(self.discriminants(np.atleast_2d(x)), axis=-1))


def bayes_predict(means, sigma, priors) -> BayesClassifier:
    means = np.asarray(means, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (means.shape[0],):
        raise ValueError(f"need one prior per class ({means.shape[0]}), got shape {priors.shape}")
    if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-12:
        raise ValueError("priors must lie on the probability simplex")
    return BayesClassifier(means, as_square(sigma), priors)


@dataclass
class MCEstimate:
    rate: float
    se: float
    n: int


def monte_carlo_group_errors(spec: GroupGaussianSpec, classifier, n_per_group: int, seed: int,
                             include_unobserved: bool = True) -> dict[GroupKey, MCEstimate]:
    """Empirical misclassification rate per group from fresh draws.

    Each group gets its own child stream of ``SeedSequence(seed)`` so results do
    not depend on which other groups are evaluated.
    """
    if n_per_group < 1000:
        raise ValueError("n_per_group must be at least 1000")
    m, k = spec.num_classes, spec.num_domains
    children = np.random.SeedSequence(seed).spawn(m * k)
    out = {}
    for idx, (y, d) in enumerate(itertools.product(range(m), range(k))):
        if not include_unobserved and spec.group_probs[y, d] == 0:
            continue
        rng = np.random.default_rng(children[idx])
        x = sample_group(spec, GroupKey(y, d), n_per_group, rng)
        rate = float(np.mean(classifier(x) != y))
        se = math.sqrt(max(rate * (1 - rate), 1.0 / n_per_group) / n_per_group)
        out[GroupKey(y, d)] = MCEstimate(rate, se, n_per_group)
    return out
