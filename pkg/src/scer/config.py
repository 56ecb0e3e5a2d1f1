"""JSON run configs: one document per run, discriminated by ``command``.

Every section is validated separately so errors carry a field path such as
``train.lambda_spur``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import ColorSurrogateSpec, GroupGaussianSpec
from .trainer import TrainConfig

COMMANDS = ("generate", "train", "theory", "sweep", "report")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"config error at {path}: {message}" if path else f"config error: {message}")


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON in {path}: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "top level must be an object")
    cmd = doc.get("command")
    if cmd not in COMMANDS:
        raise ConfigError("command", f"must be one of {COMMANDS}, got {cmd!r}")
    return doc


def section(doc: dict, key: str, path: str = "", default=None, kind=dict):
    full = f"{path}.{key}" if path else key
    if key not in doc:
        if default is None:
            raise ConfigError(full, "missing")
        return default
    val = doc[key]
    if not isinstance(val, kind):
        raise ConfigError(full, f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def check_keys(doc: dict, allowed, path: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(path, f"unknown fields {unknown}")


def seed_list(doc: dict, override: int | None) -> list[int]:
    if override is not None:
        return [override]
    seeds = doc.get("seeds", [doc.get("seed", 0)])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seeds")
    return seeds


def parse_train(d: dict, path: str = "train") -> TrainConfig:
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


DATASET_KINDS = ("color_surrogate", "group_gaussian")


def parse_dataset(d: dict, path: str = "dataset"):
    """Returns ``(kind, spec, extras)``; extras carry sample sizes for group_gaussian."""
    kind = d.get("kind", "color_surrogate")
    body = {k: v for k, v in d.items() if k != "kind"}
    try:
        if kind == "color_surrogate":
            if "train_group_probs" in body and body["train_group_probs"] is not None:
                body["train_group_probs"] = tuple(body["train_group_probs"])
            return kind, ColorSurrogateSpec.from_dict(body), {}
        if kind == "group_gaussian":
            check_keys(body, ("means", "covariance", "group_probs", "n", "n_test", "test_group_probs"), path)
            extras = {"n": int(body.pop("n", 10000)), "n_test": int(body.pop("n_test", 0))}
            test_probs = body.pop("test_group_probs", None)
            spec = GroupGaussianSpec.from_dict(body)
            extras["test_group_probs"] = (
                np.full(spec.group_probs.shape, 1.0 / spec.group_probs.size) if test_probs is None
                else np.asarray(test_probs, dtype=np.float64)
            )
            if extras["n"] < 1 or extras["n_test"] < 0:
                raise ValueError("n must be positive and n_test nonnegative")
            return kind, spec, extras
    except (TypeError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.kind", f"must be one of {DATASET_KINDS}, got {kind!r}")
