"""Closed form versus Monte Carlo checks for the Gaussian theory.

Each check returns a JSON-ready dict with the compared quantities, the
tolerance and a ``pass`` flag. Seeds are derived per check from
``SeedSequence([seed, index])`` so adding a check never changes another one.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .data import GroupGaussianSpec, sample_group_gaussian
from .model import SoftmaxHead
from .numerics import condition_number, default_ridge, sigma_norm, solve_spd
from .theory import (
    BinaryTheoryInstance,
    LinearRule,
    SoftmaxRule,
    angle_degrees,
    erm_direction,
    fit_softmax_head,
    margin_table,
    midpoint_intercept,
    monte_carlo_group_errors,
    orient,
    subgroup_error,
    subgroup_error_bounds,
    subgroup_errors,
    wge_binary,
    wge_decomposition,
)

log = logging.getLogger(__name__)


def child_seed(seed: int, index: int) -> list[int]:
    """Entropy for ``SeedSequence``; accepted anywhere a seed is."""
    return [seed, index]


def random_spd_matrix(rng: np.random.Generator, p: int, max_cond: float) -> np.ndarray:
    """Random rotation of a spectrum spanning ``[1, max_cond]`` log-uniformly."""
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eig = np.exp(rng.uniform(0.0, math.log(max_cond), size=p))
    eig[0] = 1.0
    if p > 1:
        eig[-1] = max_cond
    s = (q * eig) @ q.T
    return 0.5 * (s + s.T)


def random_binary_instance(rng, p_min=2, p_max=8, max_cond=100.0, norm_min=0.2, norm_max=3.0) -> BinaryTheoryInstance:
    p = int(rng.integers(p_min, p_max + 1))
    sigma = random_spd_matrix(rng, p, float(rng.uniform(1.0, max_cond)))

    def direction():
        v = rng.standard_normal(p)
        return v * rng.uniform(norm_min, norm_max) / sigma_norm(v, sigma)

    return BinaryTheoryInstance(direction(), direction(), sigma)


def tame_sigma(sigma: np.ndarray, max_condition: float) -> tuple[np.ndarray, float]:
    """Add a ridge when the covariance is too ill-conditioned to trust; returns ``(sigma, ridge)``."""
    cond = condition_number(sigma)
    if cond <= max_condition:
        return sigma, 0.0
    ridge = default_ridge(sigma)
    log.warning("covariance condition number %.3g exceeds %.3g; adding ridge %.3g", cond, max_condition, ridge)
    return sigma + ridge * np.eye(len(sigma)), ridge


def check_binary(inst: BinaryTheoryInstance, n_per_group: int, seed, beta=None,
                 se_mult: float = 4.0, abs_tol: float = 1e-3) -> dict:
    """Closed-form worst-group error against the worst Monte Carlo cell."""
    beta = erm_direction(inst) if beta is None else np.asarray(beta, dtype=np.float64)
    beta = orient(beta, inst)
    beta0 = midpoint_intercept(beta, inst)
    closed = wge_binary(beta, inst)
    cells = subgroup_errors(beta, inst, beta0)
    mc = monte_carlo_group_errors(inst.to_group_spec(), LinearRule(beta, beta0), n_per_group, seed)
    worst_key = max(sorted(mc), key=lambda k: mc[k].rate)
    worst = mc[worst_key]
    tol = se_mult * worst.se + abs_tol
    dc, ds = inst.delta_core, inst.delta_spur
    alt = {}
    if np.any(dc):
        alt["formula_core_weight_1"] = wge_decomposition(beta, inst, core_weight=1.0)
    z = 0.5 * float(beta @ inst.delta_tilde) / sigma_norm(beta, inst.sigma)
    alt["formula_max_phi_z"] = max(0.5 * math.erfc(-z / math.sqrt(2)), 0.5 * math.erfc(z / math.sqrt(2)))
    decomposition = wge_decomposition(beta, inst)
    return {
        "kind": "binary_worst_group",
        "dim": len(dc),
        "sigma_condition": condition_number(inst.sigma),
        "delta_core_norm": sigma_norm(dc, inst.sigma),
        "delta_spur_norm": sigma_norm(ds, inst.sigma),
        "closed_form": closed,
        "decomposition": decomposition,
        "decomposition_agrees": abs(decomposition - closed) <= 1e-12,
        "comparison_formulas": alt,
        "cell_errors": {f"y{k[0]}_d{k[1]}": v for k, v in sorted(cells.items())},
        "mc_cells": {f"y{k[0]}_d{k[1]}": {"rate": e.rate, "se": e.se} for k, e in sorted(mc.items())},
        "mc_worst": worst.rate,
        "mc_worst_se": worst.se,
        "mc_worst_cell": f"y{worst_key[0]}_d{worst_key[1]}",
        "n_per_group": n_per_group,
        "tolerance": tol,
        "abs_error": abs(closed - worst.rate),
        "pass": abs(closed - worst.rate) <= tol,
    }


def check_erm_direction(inst: BinaryTheoryInstance, n: int, seed, max_angle: float = 3.0) -> dict:
    """Fit a two-class softmax head on the observed extreme-shift groups; compare ``beta_1 - beta_0``."""
    ds = sample_group_gaussian(inst.to_group_spec(extreme=True), n, seed)
    head = fit_softmax_head(ds.features, ds.labels, 2)
    fitted = head.beta[:, 1] - head.beta[:, 0]
    target = erm_direction(inst)
    angle = angle_degrees(fitted, target)
    return {
        "kind": "erm_direction",
        "dim": len(target),
        "n": n,
        "fitted": fitted.tolist(),
        "target": target.tolist(),
        "angle_degrees": angle,
        "tolerance_degrees": max_angle,
        "pass": angle <= max_angle,
    }


def lda_head(means: np.ndarray, sigma: np.ndarray, priors: np.ndarray) -> SoftmaxHead:
    """Softmax head holding the shared-covariance discriminants of the class means."""
    w = solve_spd(sigma, means.T)
    with np.errstate(divide="ignore"):
        b = -0.5 * np.einsum("ip,pi->i", means, w) + np.log(priors)
    return SoftmaxHead(w, b)


def random_multiclass_instance(rng, m: int = 3, k_max: int = 3, p: int = 3, max_cond: float = 10.0):
    k = int(rng.integers(1, k_max + 1))
    sigma = random_spd_matrix(rng, p, max_cond)
    means = 1.5 * rng.standard_normal((m, k, p))
    probs = rng.dirichlet(np.ones(m * k)).reshape(m, k)
    spec = GroupGaussianSpec(means, sigma, probs)
    # pooled class means under the group table: the head an ERM fit would approach
    class_means = np.einsum("yk,ykp->yp", probs, means) / probs.sum(axis=1, keepdims=True)
    head = lda_head(class_means, sigma, probs.sum(axis=1))
    return spec, head


def check_multiclass(spec: GroupGaussianSpec, head: SoftmaxHead, n_per_group: int, seed,
                     se_mult: float = 3.0) -> dict:
    mc = monte_carlo_group_errors(spec, SoftmaxRule(head), n_per_group, seed)
    cells = {}
    ok = True
    for (y, d), est in sorted(mc.items()):
        lo, hi = subgroup_error_bounds(margin_table(head, spec.means[y, d], spec.covariance), y)
        inside = lo - se_mult * est.se <= est.rate <= hi + se_mult * est.se
        ok = ok and inside
        cells[f"y{y}_d{d}"] = {"lower": lo, "upper": hi, "mc": est.rate, "se": est.se, "inside": inside}
    return {
        "kind": "multiclass_bounds",
        "num_classes": spec.num_classes,
        "num_domains": spec.num_domains,
        "n_per_group": n_per_group,
        "cells": cells,
        "pass": ok,
    }


def check_binary_bounds_coincide(rng, trials: int = 20) -> dict:
    """With two classes the two bounds are equal and reproduce the single-rule error."""
    worst = 0.0
    for _ in range(trials):
        p = int(rng.integers(2, 6))
        sigma = random_spd_matrix(rng, p, 50.0)
        beta, b0, mu = rng.standard_normal(p), float(rng.standard_normal()), rng.standard_normal(p)
        head = SoftmaxHead(np.column_stack([-beta / 2, beta / 2]), np.array([-b0 / 2, b0 / 2]))
        for cls, y in ((1, 1), (0, -1)):
            lo, hi = subgroup_error_bounds(margin_table(head, mu, sigma), cls)
            worst = max(worst, abs(hi - lo), abs(lo - subgroup_error(beta, b0, mu, sigma, y)))
    return {"kind": "binary_bounds_coincide", "trials": trials, "max_abs_diff": worst, "pass": worst <= 1e-12}


def run_theory_suite(doc: dict, seed: int) -> list[dict]:
    """All checks requested by a theory config, in a fixed order."""
    n_mc = int(doc.get("n_per_group", 500_000))
    max_condition = float(doc.get("max_condition", 1e6))
    results = []
    index = 0

    def next_seed():
        nonlocal index
        index += 1
        return child_seed(seed, index)

    for i, spec in enumerate(doc.get("instances", [])):
        sigma, ridge = tame_sigma(np.asarray(spec["sigma"], dtype=np.float64), max_condition)
        inst = BinaryTheoryInstance(spec["delta_core"], spec["delta_spur"], sigma)
        if not np.any(inst.delta_tilde):
            raise ValueError(f"instances[{i}]: delta_core + delta_spur is zero")
        r = check_binary(inst, n_mc, next_seed(), spec.get("beta"))
        r.update(name=spec.get("name", f"instance_{i}"), ridge=ridge)
        results.append(r)

    rb = doc.get("random_binary")
    if rb:
        rng = np.random.default_rng(child_seed(seed, 1000))
        bounds = {k: rb[k] for k in ("p_min", "p_max", "max_cond", "norm_min", "norm_max") if k in rb}
        for i in range(int(rb.get("count", 20))):
            inst = random_binary_instance(rng, **bounds)
            r = check_binary(inst, n_mc, next_seed())
            r["name"] = f"random_binary_{i}"
            results.append(r)

    p1 = doc.get("erm_direction")
    if p1:
        rng = np.random.default_rng(child_seed(seed, 2000))
        for i in range(int(p1.get("count", 3))):
            inst = random_binary_instance(rng, p_max=int(p1.get("p_max", 6)))
            r = check_erm_direction(inst, int(p1.get("n", 200_000)), next_seed(), float(p1.get("max_angle", 3.0)))
            r["name"] = f"erm_direction_{i}"
            results.append(r)

    mcfg = doc.get("multiclass")
    if mcfg:
        rng = np.random.default_rng(child_seed(seed, 3000))
        n_multi = int(mcfg.get("n_per_group", n_mc))
        for i in range(int(mcfg.get("count", 10))):
            spec, head = random_multiclass_instance(rng, int(mcfg.get("m", 3)), int(mcfg.get("k_max", 3)))
            r = check_multiclass(spec, head, n_multi, next_seed())
            r["name"] = f"multiclass_{i}"
            results.append(r)
        r = check_binary_bounds_coincide(rng)
        r["name"] = "binary_bounds_coincide"
        results.append(r)
    return results
