"""Feature map ``f_w`` and softmax head ``f_beta`` with analytic gradients.

Batches are row-major: ``x`` has shape ``(n, d_in)``, embeddings ``(n, p)``,
logits ``(n, m)``. Single-sample helpers accept 1-d inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_SCHEMA = "scer.params/1"


@dataclass
class FeatureMap:
    """``identity`` or ``affine_tanh`` (``tanh(W x + b)``)."""

    kind: str
    input_dim: int
    W: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "identity":
            self.W = None
            self.b = None
        elif self.kind == "affine_tanh":
            self.W = np.asarray(self.W, dtype=np.float64)
            self.b = np.asarray(self.b, dtype=np.float64)
            if self.W.ndim != 2 or self.W.shape[1] != self.input_dim:
                raise ValueError(f"W must be (hidden, {self.input_dim}), got {self.W.shape}")
            if self.b.shape != (self.W.shape[0],):
                raise ValueError(f"b must have shape ({self.W.shape[0]},), got {self.b.shape}")
        else:
            raise ValueError(f"unknown feature map kind {self.kind!r}")

    @property
    def output_dim(self) -> int:
        return self.input_dim if self.kind == "identity" else self.W.shape[0]

    @property
    def trainable(self) -> bool:
        return self.kind != "identity"


@dataclass
class SoftmaxHead:
    """Weights ``beta`` of shape ``(p, m)`` (one column per class) and biases ``(m,)``."""

    beta: np.ndarray
    beta0: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.beta0 = np.asarray(self.beta0, dtype=np.float64)
        if self.beta.ndim != 2:
            raise ValueError(f"beta must be (p, m), got {self.beta.shape}")
        if self.beta0.shape != (self.beta.shape[1],):
            raise ValueError(f"beta0 must have shape ({self.beta.shape[1]},), got {self.beta0.shape}")

    @property
    def num_classes(self) -> int:
        return self.beta.shape[1]

    @property
    def dim(self) -> int:
        return self.beta.shape[0]


@dataclass
class Params:
    fmap: FeatureMap
    head: SoftmaxHead

    def copy(self) -> "Params":
        fm = self.fmap
        return Params(
            FeatureMap(fm.kind, fm.input_dim, None if fm.W is None else fm.W.copy(), None if fm.b is None else fm.b.copy()),
            SoftmaxHead(self.head.beta.copy(), self.head.beta0.copy()),
        )

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: ``[W, b,] beta, beta0``."""
        out = [self.fmap.W, self.fmap.b] if self.fmap.trainable else []
        return out + [self.head.beta, self.head.beta0]


@dataclass
class ParamGradients:
    """Gradients congruent with :class:`Params`; ``W``/``b`` are ``None`` for identity maps."""

    beta: np.ndarray
    beta0: np.ndarray
    W: np.ndarray | None = None
    b: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = [self.W, self.b] if self.W is not None else []
        return out + [self.beta, self.beta0]

    def __add__(self, other: "ParamGradients") -> "ParamGradients":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return ParamGradients(self.beta + other.beta, self.beta0 + other.beta0, add(self.W, other.W), add(self.b, other.b))


def init_params(input_dim: int, num_classes: int, rng: np.random.Generator,
                kind: str = "identity", hidden: int = 16, head_scale: float = 0.01) -> Params:
    if kind == "identity":
        fmap = FeatureMap("identity", input_dim)
    else:
        W = rng.standard_normal((hidden, input_dim)) / np.sqrt(input_dim)
        fmap = FeatureMap("affine_tanh", input_dim, W, np.zeros(hidden))
    p = fmap.output_dim
    head = SoftmaxHead(head_scale * rng.standard_normal((p, num_classes)), np.zeros(num_classes))
    return Params(fmap, head)


def embed(fmap: FeatureMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != fmap.input_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, feature map expects {fmap.input_dim}")
    if fmap.kind == "identity":
        return x
    return np.tanh(x @ fmap.W.T + fmap.b)


def logits(head: SoftmaxHead, x_emb) -> np.ndarray:
    return np.asarray(x_emb, dtype=np.float64) @ head.beta + head.beta0


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and probabilities from logits ``z`` of shape ``(n, m)``."""
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[np.arange(len(y)), y]
    probs = np.exp(shifted - lse[:, None])
    return loss, probs


def forward_xent(head: SoftmaxHead, x_emb, y: int) -> tuple[float, np.ndarray]:
    if not 0 <= y < head.num_classes:
        raise ValueError(f"class index {y} out of range for {head.num_classes} classes")
    z = logits(head, np.atleast_2d(x_emb))
    loss, probs = softmax_xent(z, np.array([y]))
    return float(loss[0]), probs[0]


def backprop(params: Params, x: np.ndarray, h: np.ndarray, dlogits: np.ndarray,
             dh_extra: np.ndarray | None = None) -> ParamGradients:
    """Push ``dL/dlogits`` (and any direct ``dL/dh``) back to every parameter.

    ``x`` are the raw inputs and ``h = embed(fmap, x)`` the cached embeddings.
    """
    head = params.head
    g_beta = h.T @ dlogits
    g_beta0 = dlogits.sum(axis=0)
    fmap = params.fmap
    if not fmap.trainable:
        return ParamGradients(g_beta, g_beta0)
    dh = dlogits @ head.beta.T
    if dh_extra is not None:
        dh = dh + dh_extra
    dpre = dh * (1.0 - h * h)
    return ParamGradients(g_beta, g_beta0, dpre.T @ x, dpre.sum(axis=0))


def backward(fmap: FeatureMap, head: SoftmaxHead, x, y: int) -> ParamGradients:
    """Exact gradient of the single-sample cross-entropy."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = embed(fmap, x2)
    _, probs = forward_xent(head, h[0], y)
    dlogits = probs.copy()
    dlogits[y] -= 1.0
    return backprop(Params(fmap, head), x2, h, dlogits[None, :])


def predict(head: SoftmaxHead, x_emb) -> np.ndarray | int:
    """Argmax of the logits; ``np.argmax`` already breaks ties toward the smaller index."""
    z = logits(head, x_emb)
    out = np.argmax(z, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def params_to_dict(params: Params) -> dict:
    fm = params.fmap
    d = {
        "schema": CHECKPOINT_SCHEMA,
        "feature_map": {"kind": fm.kind, "input_dim": fm.input_dim},
        "head": {
            "beta": {"shape": list(params.head.beta.shape), "values": params.head.beta.ravel().tolist()},
            "beta0": {"shape": list(params.head.beta0.shape), "values": params.head.beta0.tolist()},
        },
    }
    if fm.trainable:
        d["feature_map"]["W"] = {"shape": list(fm.W.shape), "values": fm.W.ravel().tolist()}
        d["feature_map"]["b"] = {"shape": list(fm.b.shape), "values": fm.b.tolist()}
    return d


def params_from_dict(d: dict) -> Params:
    if d.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"checkpoint schema {d.get('schema')!r} != {CHECKPOINT_SCHEMA}")

    def arr(entry):
        return np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])

    fm = d["feature_map"]
    if fm["kind"] == "identity":
        fmap = FeatureMap("identity", fm["input_dim"])
    else:
        fmap = FeatureMap(fm["kind"], fm["input_dim"], arr(fm["W"]), arr(fm["b"]))
    return Params(fmap, SoftmaxHead(arr(d["head"]["beta"]), arr(d["head"]["beta0"])))


def save_params(params: Params, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_params(path) -> Params:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
