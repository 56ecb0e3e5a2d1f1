"""Training loop: group-DRO classification loss plus the embedding regularizer.

Per step: embed a uniformly sampled batch, compute per-group losses, update
the group weights, recompute the batch covariance, group means and
directions, then take an SGD-with-momentum step on the total loss.

Random numbers are consumed in a fixed order from ``default_rng(seed)``:
parameter initialization first, then one ``integers(0, n, batch_size)`` draw
per step.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, GroupKey, digest_of
from .model import Params, backprop, embed, init_params, params_to_dict, predict, softmax_xent
from .numerics import condition_number, pooled_covariance
from .regularizer import (
    DIRECTION_MODES,
    NORM_MODES,
    AlignmentReport,
    GroupMeans,
    alignment_snapshot,
    build_directions,
    embedding_loss,
    embedding_loss_grads,
    group_means,
)
from .robust import Metrics, RobustState, compute_metrics, eg_update, group_loss_table, weighted_group_loss

log = logging.getLogger(__name__)

HISTORY_SCHEMA = "scer.history/1"
OBJECTIVES = ("groupdro", "erm")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 5000
    batch_size: int = 128
    learning_rate: float = 1e-3
    momentum: float = 0.9
    eta: float = 0.01
    lambda_spur: float = 1.0
    lambda_core: float = 1.0
    norm_mode: str = "sigma"
    direction_mode: str = "signed"
    objective: str = "groupdro"
    feature_map: str = "identity"
    hidden: int = 16
    head_init_scale: float = 0.01
    eval_every: int = 500
    covariance: str = "batch"  # or "identity"
    ridge: float | None = None
    ema_decay: float | None = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2 or self.eval_every < 1:
            raise ValueError("steps >= 1, batch_size >= 2 and eval_every >= 1 are required")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be positive and momentum in [0, 1)")
        if self.eta < 0 or self.lambda_spur < 0 or self.lambda_core < 0:
            raise ValueError("eta and lambdas must be nonnegative")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.direction_mode not in DIRECTION_MODES:
            raise ValueError(f"direction_mode must be one of {DIRECTION_MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.feature_map not in ("identity", "affine_tanh"):
            raise ValueError("feature_map must be 'identity' or 'affine_tanh'")
        if self.covariance not in ("batch", "identity"):
            raise ValueError("covariance must be 'batch' or 'identity'")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepResult:
    l_wge: float
    report: AlignmentReport
    l_total: float
    grads: list[np.ndarray]
    sigma: np.ndarray
    directions_missing: bool


def batch_covariance(h: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.covariance == "identity":
        return np.eye(h.shape[1])
    return pooled_covariance(h, config.ridge)


def loss_and_grads(params: Params, x: np.ndarray, labels: np.ndarray, domains: np.ndarray,
                   state: RobustState, config: TrainConfig, sigma: np.ndarray | None = None,
                   means_override: GroupMeans | None = None, mean_scale: dict | None = None) -> StepResult:
    """Total loss and its gradient for a batch, with ``q`` and the covariance held fixed.

    ``state`` must already include this batch's EG update. ``sigma=None``
    recomputes the covariance from the batch embeddings.
    """
    m, k = state.q.shape
    h = embed(params.fmap, x)
    z = h @ params.head.beta + params.head.beta0
    losses, probs = softmax_xent(z, labels)
    n = len(labels)
    onehot_diff = probs.copy()
    onehot_diff[np.arange(n), labels] -= 1.0
    if config.objective == "erm":
        l_wge = float(losses.mean())
        dlogits = onehot_diff / n
    else:
        table = group_loss_table(losses, labels, domains, m, k)
        l_wge = weighted_group_loss(state, table)
        flat = labels * k + domains
        w = state.q.ravel()[flat] / table.counts.ravel()[flat]
        dlogits = onehot_diff * w[:, None]

    if sigma is None:
        sigma = batch_covariance(h, config)
    keys = np.column_stack([labels, domains])
    gm = means_override if means_override is not None else group_means(h, keys)
    dirs = build_directions(gm, sigma, config.direction_mode, config.norm_mode)
    missing = (config.lambda_spur > 0 and dirs.delta_spur is None) or (
        config.lambda_core > 0 and dirs.delta_core is None
    )
    weighted = embedding_loss(params.head, dirs, sigma, config.lambda_spur, config.lambda_core)
    snap = alignment_snapshot(params.head, dirs, sigma)
    report = dataclasses.replace(snap, loss_embedding=weighted.loss_embedding)
    eg = embedding_loss_grads(params.head, dirs, sigma, config.lambda_spur, config.lambda_core)

    dh_extra = None
    if params.fmap.trainable and eg.means:
        batch_counts = {}
        for key in eg.means:
            batch_counts[key] = int(np.sum((labels == key[0]) & (domains == key[1])))
        present = {key: g for key, g in eg.means.items() if batch_counts[key] > 0}
        if mean_scale:
            present = {key: g * mean_scale.get(key, 1.0) for key, g in present.items()}
        eg.means = present
        dh_extra = eg.per_sample(keys, batch_counts, h.shape[1])
    grads = backprop(params, x, h, dlogits, dh_extra)
    grads.beta = grads.beta + eg.beta
    return StepResult(l_wge, report, l_wge + report.loss_embedding, grads.arrays(), sigma, missing)


def evaluate(params: Params, dataset: Dataset) -> Metrics:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(params.head, embed(params.fmap, dataset.features))
    return compute_metrics(np.atleast_1d(preds), dataset.labels, dataset.domains)


ALIGNMENT_FIELDS = ("cor_spur", "cor_core", "mag_spur", "mag_core", "loss_spur", "loss_core")


def evaluate_alignment(params: Params, dataset: Dataset, config: TrainConfig) -> dict:
    """Unweighted alignment metrics on a whole split (its own covariance and group means).

    Less noisy than the per-batch values and defined whenever the split has the
    needed pairs; missing directions report 0.
    """
    h = embed(params.fmap, dataset.features)
    sigma = batch_covariance(h, config)
    gm = group_means(h, np.column_stack([dataset.labels, dataset.domains]))
    dirs = build_directions(gm, sigma, config.direction_mode, config.norm_mode)
    snap = alignment_snapshot(params.head, dirs, sigma)
    return {f: getattr(snap, f) for f in ALIGNMENT_FIELDS}


@dataclass
class RunHistory:
    config: TrainConfig
    step_rows: list[dict] = field(default_factory=list)
    eval_rows: list[dict] = field(default_factory=list)
    params: Params | None = None
    skipped_steps: int = 0

    def final_metrics(self, split: str = "test") -> dict:
        for row in reversed(self.eval_rows):
            if row["split"] == split:
                return row
        raise KeyError(split)


class _EmaMeans:
    def __init__(self, decay: float):
        self.decay = decay
        self.means: dict[GroupKey, np.ndarray] = {}
        self.sigma: np.ndarray | None = None

    def update(self, gm: GroupMeans, sigma: np.ndarray) -> tuple[GroupMeans, dict, np.ndarray]:
        scale = {}
        new = dict(self.means)
        for key, mu in gm.means.items():
            if key in self.means:
                new[key] = self.decay * self.means[key] + (1 - self.decay) * mu
                scale[key] = 1 - self.decay
            else:
                new[key] = mu
                scale[key] = 1.0
        self.sigma = sigma if self.sigma is None else self.decay * self.sigma + (1 - self.decay) * sigma
        return GroupMeans(new, dict(gm.counts)), scale, self.sigma

    def commit(self, gm: GroupMeans) -> None:
        self.means = {key: mu.copy() for key, mu in gm.means.items()}


def train(config: TrainConfig, train_set: Dataset, eval_sets: dict[str, Dataset] | None = None) -> RunHistory:
    """Run the full loop; deterministic given ``config.seed``."""
    eval_sets = eval_sets or {}
    rng = np.random.default_rng(config.seed)
    m, k = train_set.num_classes, train_set.num_domains
    params = init_params(train_set.dim, m, rng, config.feature_map, config.hidden, config.head_init_scale)
    state = RobustState.uniform(m, k, config.eta if config.objective == "groupdro" else 0.0)
    velocity = [np.zeros_like(a) for a in params.arrays()]
    history = RunHistory(config)
    ema = _EmaMeans(config.ema_decay) if config.ema_decay else None
    n = len(train_set)

    for step in range(1, config.steps + 1):
        idx = rng.integers(0, n, config.batch_size)
        x = train_set.features[idx]
        y = train_set.labels[idx]
        d = train_set.domains[idx]

        h = embed(params.fmap, x)
        if config.objective == "groupdro":
            losses, _ = softmax_xent(h @ params.head.beta + params.head.beta0, y)
            state = eg_update(state, group_loss_table(losses, y, d, m, k))

        sigma = batch_covariance(h, config)
        gm_override, scale = None, None
        if ema is not None:
            gm_batch = group_means(h, np.column_stack([y, d]))
            gm_override, scale, sigma = ema.update(gm_batch, sigma)
        res = loss_and_grads(params, x, y, d, state, config, sigma, gm_override, scale)
        if ema is not None:
            ema.commit(gm_override)
        if res.directions_missing:
            history.skipped_steps += 1
        if not np.isfinite(res.l_total):
            raise DivergenceError(step, "loss")

        for arr, vel, g in zip(params.arrays(), velocity, res.grads):
            vel *= config.momentum
            vel += g
            arr -= config.learning_rate * vel
            if not np.all(np.isfinite(arr)):
                raise DivergenceError(step, "parameters")

        rep = res.report
        row = {
            "step": step,
            "l_wge": res.l_wge,
            "loss_embedding": rep.loss_embedding,
            "l_total": res.l_total,
            "cor_spur": rep.cor_spur,
            "cor_core": rep.cor_core,
            "mag_spur": rep.mag_spur,
            "mag_core": rep.mag_core,
            "loss_spur": rep.loss_spur,
            "loss_core": rep.loss_core,
            "sigma_cond": condition_number(res.sigma),
            "directions_missing": int(res.directions_missing),
        }
        for (gy, gd), qv in np.ndenumerate(state.q):
            row[f"q_y{gy}_d{gd}"] = float(qv)
        history.step_rows.append(row)

        if step % config.eval_every == 0 or step == config.steps:
            for name, ds in sorted(eval_sets.items()):
                metrics = evaluate(params, ds)
                align = evaluate_alignment(params, ds, config)
                history.eval_rows.append({"step": step, "split": name, **metrics.as_row(), **align})

    if history.skipped_steps:
        log.info("embedding loss skipped on %d steps (missing group pairs)", history.skipped_steps)
    history.params = params
    return history


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def rows_to_csv(rows: list[dict], schema: str, columns: list[str] | None = None) -> str:
    if columns is None:
        columns = []
        for row in rows:
            for c in row:
                if c not in columns:
                    columns.append(c)
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join("" if row.get(c) is None else _fmt(row[c]) for c in columns) + "\n")
    return buf.getvalue()


def write_history(history: RunHistory, out_dir) -> None:
    """``history.csv`` (per-step alignment + q, eval metrics merged by step) and ``final.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evals: dict[int, dict] = {}
    for row in history.eval_rows:
        merged = evals.setdefault(row["step"], {})
        for key, val in row.items():
            if key not in ("step", "split"):
                merged[f"{row['split']}_{key}"] = val
    rows = [{**r, **evals.get(r["step"], {})} for r in history.step_rows]
    (out / "history.csv").write_text(rows_to_csv(rows, HISTORY_SCHEMA), encoding="utf-8")
    final = {
        "schema": "scer.final/1",
        "config": history.config.to_dict(),
        "config_digest": digest_of(history.config.to_dict()),
        "params": params_to_dict(history.params),
        "final_step": history.step_rows[-1],
        "final_eval": [r for r in history.eval_rows if r["step"] == history.step_rows[-1]["step"]],
        "skipped_steps": history.skipped_steps,
    }
    (out / "final.json").write_text(json.dumps(final, sort_keys=True, indent=2) + "\n", encoding="utf-8")
