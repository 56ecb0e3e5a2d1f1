"""Seeded generators for group-structured datasets.

Two families are provided:

* :func:`sample_group_gaussian` draws from a mixture of group-conditional
  Gaussians ``x | (y, d) ~ N(mu[y, d], Sigma)`` with a shared covariance.
* :func:`make_color_surrogate` produces a featurized stand-in for ColorMNIST:
  one coordinate carries the clean label, one carries the color, the rest are
  noise. Train and test use opposite color/label agreement rates.

All generators are pure functions of ``(spec, seed)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numerics import cholesky

DATASET_SCHEMA = "scer.dataset/1"


class GroupKey(NamedTuple):
    class_index: int
    domain_index: int


def digest_of(obj) -> str:
    """sha256 of the canonical JSON encoding of ``obj``."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GroupGaussianSpec:
    """Group-conditional Gaussian model.

    ``means`` has shape ``(m, k, p)``, ``group_probs`` shape ``(m, k)``.
    """

    means: np.ndarray
    covariance: np.ndarray
    group_probs: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        probs = np.asarray(self.group_probs, dtype=np.float64)
        if means.ndim != 3:
            raise ValueError(f"means must have shape (m, k, p), got {means.shape}")
        m, k, p = means.shape
        if cov.shape != (p, p):
            raise ValueError(f"covariance must be ({p}, {p}), got {cov.shape}")
        if probs.shape != (m, k):
            raise ValueError(f"group_probs must be ({m}, {k}), got {probs.shape}")
        if np.any(probs < 0):
            raise ValueError("group_probs must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"group_probs must sum to 1, got {probs.sum()!r}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "group_probs", probs)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def num_domains(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def mean(self, key: GroupKey) -> np.ndarray:
        return self.means[key[0], key[1]]

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "covariance": self.covariance.tolist(),
            "group_probs": self.group_probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroupGaussianSpec":
        return cls(
            means=np.asarray(d["means"], dtype=np.float64),
            covariance=np.asarray(d["covariance"], dtype=np.float64),
            group_probs=np.asarray(d["group_probs"], dtype=np.float64),
        )


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    num_domains: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.features)
        if len(self.labels) != n or len(self.domains) != n:
            raise ValueError("features, labels and domains must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if n and (self.domains.min() < 0 or self.domains.max() >= self.num_domains):
            raise ValueError("domain out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def group_ids(self) -> np.ndarray:
        """Flat group index ``y * k + d`` per sample."""
        return self.labels * self.num_domains + self.domains

    def group_counts(self) -> np.ndarray:
        counts = np.bincount(self.group_ids, minlength=self.num_classes * self.num_domains)
        return counts.reshape(self.num_classes, self.num_domains)


def sample_group_gaussian(spec: GroupGaussianSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. samples: a group from ``group_probs``, then ``mu + L z``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    factor = cholesky(spec.covariance)
    rng = np.random.default_rng(seed)
    m, k = spec.num_classes, spec.num_domains
    groups = rng.choice(m * k, size=n, p=spec.group_probs.ravel())
    z = rng.standard_normal((n, spec.dim))
    labels, domains = np.divmod(groups, k)
    x = spec.means[labels, domains] + z @ factor.T
    return Dataset(
        features=x,
        labels=labels.astype(np.int64),
        domains=domains.astype(np.int64),
        num_classes=m,
        num_domains=k,
        provenance={"kind": "group_gaussian", "seed": seed, "spec_digest": digest_of(spec.to_dict())},
    )


def sample_group(spec: GroupGaussianSpec, key: GroupKey, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from a single group, including zero-probability ones."""
    factor = cholesky(spec.covariance)
    z = rng.standard_normal((n, spec.dim))
    return spec.mean(key) + z @ factor.T


def make_omitted_group_probs(weights) -> np.ndarray:
    """Normalize four weights into a 2x2 ``(y, d)`` table, row-major."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (4,):
        raise ValueError(f"expected four weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must have a positive sum")
    return (w / total).reshape(2, 2)


@dataclass(frozen=True)
class ColorSurrogateSpec:
    """Featurized ColorMNIST.

    ``rho_*`` is the probability that color agrees with the observed label.
    When ``train_group_probs`` is set (four weights, ``(y, d)`` row-major), the
    training split samples groups from that table instead of from ``rho_train``.
    """

    rho_train: float = 0.9
    rho_test: float = 0.1
    rho_val: float = 0.5
    label_noise: float = 0.25
    core_scale: float = 2.0
    spur_scale: float = 2.0
    noise_dims: int = 8
    n_train: int = 30000
    n_val: int = 10000
    n_test: int = 20000
    train_group_probs: tuple | None = None

    def __post_init__(self):
        for name in ("rho_train", "rho_test", "rho_val", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("core_scale", "spur_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_dims < 0:
            raise ValueError("noise_dims must be >= 0")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.train_group_probs is not None:
            object.__setattr__(self, "train_group_probs", tuple(float(w) for w in self.train_group_probs))
            make_omitted_group_probs(self.train_group_probs)

    @property
    def dim(self) -> int:
        return 2 + self.noise_dims

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["train_group_probs"] is not None:
            d["train_group_probs"] = list(d["train_group_probs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColorSurrogateSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown surrogate fields: {sorted(unknown)}")
        return cls(**d)


def _signed(a: np.ndarray) -> np.ndarray:
    return 2.0 * a - 1.0


def _color_split(spec: ColorSurrogateSpec, n: int, rho: float, rng, group_probs=None):
    if group_probs is None:
        clean = rng.integers(0, 2, size=n)
        labels = np.where(rng.random(n) < spec.label_noise, 1 - clean, clean)
        domains = np.where(rng.random(n) < rho, labels, 1 - labels)
    else:
        # Given y, the clean label is y flipped with prob label_noise, which matches
        # the uniform-clean-label construction above.
        groups = rng.choice(4, size=n, p=np.asarray(group_probs).ravel())
        labels, domains = np.divmod(groups, 2)
        clean = np.where(rng.random(n) < spec.label_noise, 1 - labels, labels)
    core = spec.core_scale * _signed(clean) + rng.standard_normal(n)
    spur = spec.spur_scale * _signed(domains) + rng.standard_normal(n)
    noise = rng.standard_normal((n, spec.noise_dims))
    x = np.column_stack([core, spur, noise])
    return x, labels.astype(np.int64), domains.astype(np.int64), clean.astype(np.int64)


def make_color_surrogate(spec: ColorSurrogateSpec, seed: int, return_clean: bool = False):
    """Build ``(train, val, test)`` splits of the color surrogate.

    Each split draws from its own child of ``SeedSequence(seed)``. With
    ``return_clean=True`` a fourth element holds the clean labels per split.
    """
    children = np.random.SeedSequence(seed).spawn(3)
    spec_digest = digest_of(spec.to_dict())
    train_probs = (
        make_omitted_group_probs(spec.train_group_probs) if spec.train_group_probs is not None else None
    )
    plan = [
        ("train", spec.n_train, spec.rho_train, train_probs),
        ("val", spec.n_val, spec.rho_val, None),
        ("test", spec.n_test, spec.rho_test, None),
    ]
    splits, cleans = [], []
    for child, (name, n, rho, probs) in zip(children, plan):
        rng = np.random.default_rng(child)
        x, y, d, c = _color_split(spec, n, rho, rng, probs)
        splits.append(
            Dataset(
                features=x,
                labels=y,
                domains=d,
                num_classes=2,
                num_domains=2,
                provenance={"kind": "color_surrogate", "split": name, "seed": seed, "spec_digest": spec_digest},
            )
        )
        cleans.append(c)
    if return_clean:
        return splits[0], splits[1], splits[2], tuple(cleans)
    return tuple(splits)


def _fmt(v: float) -> str:
    return repr(float(v))


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {DATASET_SCHEMA}\n")
    header = ["y", "d"] + [f"f{i}" for i in range(ds.dim)]
    buf.write(",".join(header) + "\n")
    for y, d, row in zip(ds.labels, ds.domains, ds.features):
        buf.write(f"{int(y)},{int(d)}," + ",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def write_dataset(ds: Dataset, csv_path, manifest_path, spec: dict | None = None) -> None:
    """Write the CSV and its JSON manifest. Output is byte-stable."""
    csv_text = dataset_to_csv(ds)
    Path(csv_path).write_text(csv_text, encoding="utf-8", newline="\n")
    manifest = {
        "schema": DATASET_SCHEMA,
        "provenance": ds.provenance,
        "spec": spec,
        "num_classes": ds.num_classes,
        "num_domains": ds.num_domains,
        "n": len(ds),
        "dim": ds.dim,
        "group_counts": ds.group_counts().tolist(),
        "csv_sha256": hashlib.sha256(csv_text.encode("utf-8")).hexdigest(),
    }
    Path(manifest_path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_dataset_csv(path, num_classes: int | None = None, num_domains: int | None = None) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != f"# schema: {DATASET_SCHEMA}":
        raise ValueError(f"{path}: missing or mismatched schema line (want {DATASET_SCHEMA})")
    header = lines[1].split(",")
    if header[:2] != ["y", "d"]:
        raise ValueError(f"{path}: header must start with y,d")
    rows = np.array([[float(t) for t in line.split(",")] for line in lines[2:] if line], dtype=np.float64)
    rows = rows.reshape(-1, len(header))
    labels = rows[:, 0].astype(np.int64)
    domains = rows[:, 1].astype(np.int64)
    return Dataset(
        features=rows[:, 2:],
        labels=labels,
        domains=domains,
        num_classes=num_classes if num_classes is not None else int(labels.max()) + 1,
        num_domains=num_domains if num_domains is not None else int(domains.max()) + 1,
        provenance={"kind": "csv", "path": str(path)},
    )
