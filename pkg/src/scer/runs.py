"""What each CLI command does, callable without the argument parser.

Every function writes only under its ``out`` directory and produces the same
bytes for the same config and seed.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .checks import run_theory_suite
from .config import ConfigError, check_keys, parse_dataset, parse_train, section, seed_list
from .data import (
    ColorSurrogateSpec,
    Dataset,
    GroupGaussianSpec,
    digest_of,
    make_color_surrogate,
    read_dataset_csv,
    sample_group_gaussian,
    write_dataset,
)
from .trainer import ALIGNMENT_FIELDS, HISTORY_SCHEMA, DivergenceError, TrainConfig, rows_to_csv, train, write_history

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "scer.sweep/1"
AGGREGATE_SCHEMA = "scer.aggregate/1"
SCATTER_SCHEMA = "scer.scatter/1"
THEORY_SCHEMA = "scer.theory/1"


class SchemaError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    """One or more runs diverged; their rows are still written."""


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def write_manifest(out: Path, command: str, config_path, doc: dict, seed_override) -> None:
    """Inputs digest: the canonical config plus any seed override."""
    inputs = {"config": doc, "seed_override": seed_override}
    _dump_json(
        {
            "command": command,
            "config_path": str(config_path),
            "input_digest": digest_of(inputs),
            "version": __version__,
        },
        out / "manifest.json",
    )


# --------------------------------------------------------------------------- data


def build_splits(dataset_doc: dict, seed: int, path: str = "dataset") -> dict[str, Dataset]:
    """Train plus evaluation splits for one seed."""
    if dataset_doc.get("kind") == "csv":
        check_keys(dataset_doc, ("kind", "train", "val", "test", "num_classes", "num_domains"), path)
        m, k = dataset_doc.get("num_classes"), dataset_doc.get("num_domains")
        splits = {}
        for name in ("train", "val", "test"):
            if name in dataset_doc:
                try:
                    splits[name] = read_dataset_csv(dataset_doc[name], m, k)
                except (OSError, ValueError) as exc:
                    raise ConfigError(f"{path}.{name}", str(exc)) from None
        if "train" not in splits:
            raise ConfigError(f"{path}.train", "missing")
        return splits
    kind, spec, extras = parse_dataset(dataset_doc, path)
    if kind == "color_surrogate":
        tr, va, te = make_color_surrogate(spec, seed)
        return {"train": tr, "val": va, "test": te}
    children = np.random.SeedSequence(seed).spawn(2)
    splits = {"train": sample_group_gaussian(spec, extras["n"], int(children[0].generate_state(1)[0]))}
    if extras["n_test"]:
        test_spec = GroupGaussianSpec(spec.means, spec.covariance, extras["test_group_probs"])
        splits["test"] = sample_group_gaussian(test_spec, extras["n_test"], int(children[1].generate_state(1)[0]))
    return splits


def cmd_generate(doc: dict, out: Path, seed_override=None) -> dict:
    check_keys(doc, ("command", "dataset", "seed"), "")
    seed = seed_list({"seed": doc.get("seed", 0)}, seed_override)[0]
    dataset_doc = section(doc, "dataset")
    splits = build_splits(dataset_doc, seed)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, ds in splits.items():
        write_dataset(ds, out / f"{name}.csv", out / f"{name}.json", spec={**dataset_doc, "seed": seed})
        written[name] = len(ds)
    return written


# -------------------------------------------------------------------------- train


def _run_one(dataset_doc: dict, train_doc: dict, seed: int, out_dir: str) -> dict:
    """Train one seed and write its history; returns the summary row (never raises on divergence)."""
    cfg = TrainConfig.from_dict({**train_doc, "seed": seed})
    splits = build_splits(dataset_doc, seed)
    evals = {k: v for k, v in splits.items() if k != "train"}
    row = {"seed": seed, "status": "ok", "error": ""}
    try:
        hist = train(cfg, splits["train"], evals)
    except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        row.update(status="numerical_failure", error=str(exc))
        return row
    write_history(hist, out_dir)
    final_step = hist.step_rows[-1]["step"]
    for r in hist.eval_rows:
        if r["step"] != final_step:
            continue
        split = r["split"]
        row[f"{split}_avg_acc"] = r["avg_acc"]
        row[f"{split}_worst_acc"] = r["worst_acc"]
        if split == "val" or "val" not in evals:
            for f in ALIGNMENT_FIELDS:
                row[f] = r[f]
    row["skipped_steps"] = hist.skipped_steps
    return row


def _pool_map(tasks: list[tuple], jobs: int) -> list[dict]:
    """Run ``_run_one`` over tasks, in order; a bounded process pool when ``jobs > 1``."""
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_run_one, *zip(*tasks)))


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


def _pct(mean: float, sd: float) -> str:
    return f"{100 * mean:.1f} ± {100 * sd:.1f}"


def aggregate(rows: list[dict], keys: list[str]) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    agg = {k: rows[0][k] for k in keys}
    agg["n_runs"] = len(rows)
    agg["n_ok"] = len(ok)
    for metric in ("test_worst_acc", "test_avg_acc", "loss_spur", "loss_core"):
        vals = [r[metric] for r in ok if metric in r]
        if vals:
            mean, sd = _mean_sd(vals)
            agg[f"{metric}_mean"] = mean
            agg[f"{metric}_sd"] = sd
    if "test_worst_acc_mean" in agg:
        agg["worst_acc_pct"] = _pct(agg["test_worst_acc_mean"], agg["test_worst_acc_sd"])
        agg["avg_acc_pct"] = _pct(agg["test_avg_acc_mean"], agg["test_avg_acc_sd"])
    return agg


def _columns(rows: list[dict], leading: list[str]) -> list[str]:
    cols = list(leading)
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    return cols


def cmd_train(doc: dict, out: Path, seed_override=None, jobs: int = 1) -> list[dict]:
    check_keys(doc, ("command", "dataset", "train", "seed", "seeds"), "")
    dataset_doc = section(doc, "dataset")
    train_doc = dict(section(doc, "train", default={}))
    train_doc.pop("seed", None)
    parse_train(train_doc)
    seeds = seed_list(doc, seed_override)
    build_splits(dataset_doc, seeds[0])  # validate before spawning work
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(dataset_doc, train_doc, s, str(out / f"seed_{s}")) for s in seeds]
    rows = _pool_map(tasks, jobs)
    table = rows + [{"seed": "all", **aggregate(rows, [])}]
    (out / "summary.csv").write_text(rows_to_csv(table, RESULTS_SCHEMA, _columns(table, ["seed", "status"])),
                                     encoding="utf-8")
    if any(r["status"] != "ok" for r in rows):
        raise NumericalFailure(f"{sum(r['status'] != 'ok' for r in rows)} of {len(rows)} runs failed")
    return rows


# -------------------------------------------------------------------------- sweep

DATASET_FIELDS = {f for f in ColorSurrogateSpec.__dataclass_fields__}
TRAIN_FIELDS = set(TrainConfig.__dataclass_fields__) - {"seed"}


def grid_points(grid: dict) -> list[dict]:
    for key, values in grid.items():
        if key not in DATASET_FIELDS and key not in TRAIN_FIELDS:
            raise ConfigError(f"grid.{key}", "not a dataset or train field")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key}", "must be a nonempty list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_sweep(doc: dict, out: Path, seed_override=None, jobs: int = 1) -> tuple[list[dict], list[dict]]:
    check_keys(doc, ("command", "dataset", "train", "grid", "seed", "seeds"), "")
    base_data = section(doc, "dataset", default={"kind": "color_surrogate"})
    base_train = dict(section(doc, "train", default={}))
    base_train.pop("seed", None)
    points = grid_points(section(doc, "grid"))
    seeds = seed_list(doc, seed_override)
    tasks, meta = [], []
    for i, point in enumerate(points):
        data_doc = {**base_data, **{k: v for k, v in point.items() if k in DATASET_FIELDS}}
        train_doc = {**base_train, **{k: v for k, v in point.items() if k in TRAIN_FIELDS}}
        parse_train(train_doc, f"grid[{i}]")
        parse_dataset(data_doc, f"grid[{i}]")
        for s in seeds:
            run_dir = out / "runs" / f"p{i:03d}_s{s}"
            tasks.append((data_doc, train_doc, s, str(run_dir)))
            meta.append({"point": i, **point})
    out.mkdir(parents=True, exist_ok=True)
    rows = [{**m, **r} for m, r in zip(meta, _pool_map(tasks, jobs))]
    keys = ["point"] + list(points[0])
    cols = _columns(rows, keys + ["seed", "status"])
    (out / "results.csv").write_text(rows_to_csv(rows, RESULTS_SCHEMA, cols), encoding="utf-8")
    aggs = [aggregate([r for r in rows if r["point"] == i], keys) for i in range(len(points))]
    (out / "aggregate.csv").write_text(rows_to_csv(aggs, AGGREGATE_SCHEMA, _columns(aggs, keys)), encoding="utf-8")
    if any(r["status"] != "ok" for r in rows):
        raise NumericalFailure(f"{sum(r['status'] != 'ok' for r in rows)} of {len(rows)} runs failed")
    return rows, aggs


# ------------------------------------------------------------------------- theory


def cmd_theory(doc: dict, out: Path, seed_override=None) -> dict:
    check_keys(doc, ("command", "seed", "n_per_group", "max_condition", "instances", "random_binary",
                     "erm_direction", "multiclass"), "")
    seed = seed_list({"seed": doc.get("seed", 0)}, seed_override)[0]
    try:
        checks = run_theory_suite(doc, seed)
    except np.linalg.LinAlgError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("instances", str(exc)) from None
    report = {
        "schema": THEORY_SCHEMA,
        "seed": seed,
        "config_digest": digest_of(doc),
        "checks": checks,
        "n_checks": len(checks),
        "n_failed": sum(not c["pass"] for c in checks),
        "all_pass": all(c["pass"] for c in checks),
    }
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out / "theory.json")
    return report


# ------------------------------------------------------------------------- report


def read_versioned_csv(path: Path, schema: str) -> list[dict]:
    lines = path.read_text(encoding="utf-8").splitlines()
    want = f"# schema: {schema}"
    if not lines or lines[0].strip() != want:
        got = lines[0].strip() if lines else "<empty file>"
        raise SchemaError(f"{path}: expected '{want}', found '{got}'")
    return list(csv.DictReader(lines[1:]))


def _spearman(x: list[float], y: list[float]):
    if len(x) < 3 or len(set(x)) < 2 or len(set(y)) < 2:
        return None
    rho = spearmanr(x, y).statistic
    return None if not math.isfinite(rho) else float(rho)


def collect_points(results_dir: Path, accuracy_split: str = "test", alignment_split: str = "val") -> list[dict]:
    histories = sorted(results_dir.rglob("history.csv"))
    if not histories:
        raise SchemaError(f"no history.csv found under {results_dir}")
    needed = {"worst_acc": f"{accuracy_split}_worst_acc", "avg_acc": f"{accuracy_split}_avg_acc"}
    for f in ALIGNMENT_FIELDS:
        needed[f] = f"{alignment_split}_{f}" if alignment_split != "batch" else f
    points = []
    for path in histories:
        rows = read_versioned_csv(path, HISTORY_SCHEMA)
        if not rows:
            raise SchemaError(f"{path}: no data rows")
        last = rows[-1]
        missing = [c for c in needed.values() if c not in last or last[c] in ("", None)]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        point = {"run": path.parent.relative_to(results_dir).as_posix() or "."}
        point["step"] = int(last["step"])
        for key, col in needed.items():
            point[key] = float(last[col])
        points.append(point)
    return points


def cmd_report(doc: dict, out: Path, seed_override=None) -> dict:
    check_keys(doc, ("command", "results", "accuracy_split", "alignment_split", "plot"), "")
    results = Path(section(doc, "results", kind=str))
    if not results.is_dir():
        raise ConfigError("results", f"{results} is not a directory")
    points = collect_points(results, doc.get("accuracy_split", "test"), doc.get("alignment_split", "val"))
    worst = [p["worst_acc"] for p in points]
    spearman = {key: _spearman([p[key] for p in points], worst) for key in ("loss_spur", "loss_core")}
    spearman.update({f"cor_{k}": _spearman([p[f"cor_{k}"] for p in points], worst) for k in ("spur", "core")})
    out.mkdir(parents=True, exist_ok=True)
    cols = ["run", "step", "worst_acc", "avg_acc", *ALIGNMENT_FIELDS]
    (out / "scatter.csv").write_text(rows_to_csv(points, SCATTER_SCHEMA, cols), encoding="utf-8")
    summary = {"schema": "scer.report/1", "n_runs": len(points), "spearman_vs_worst_acc": spearman}
    _dump_json(summary, out / "spearman.json")
    (out / "summary.md").write_text(_summary_markdown(points, spearman), encoding="utf-8")
    if doc.get("plot", True):
        from .plotting import scatter_panels

        scatter_panels(points, spearman, out / "scatter.png")
    return summary


def _fmt_rho(v) -> str:
    return "n/a" if v is None else f"{v:+.3f}"


def _summary_markdown(points: list[dict], spearman: dict) -> str:
    lines = [
        "# Worst-group accuracy vs alignment",
        "",
        f"Runs: {len(points)}",
        "",
        "| metric | Spearman vs worst-group acc |",
        "|---|---|",
    ]
    for key in ("loss_spur", "loss_core", "cor_spur", "cor_core"):
        lines.append(f"| {key} | {_fmt_rho(spearman.get(key))} |")
    lines += ["", "| run | worst acc | loss_spur | loss_core |", "|---|---|---|---|"]
    for p in points:
        lines.append(f"| {p['run']} | {p['worst_acc']:.4f} | {p['loss_spur']:.4f} | {p['loss_core']:.4f} |")
    return "\n".join(lines) + "\n"


def resolve_jobs(cli_jobs: int | None) -> int:
    env = os.environ.get("SCER_JOBS")
    if env is not None:
        try:
            jobs = int(env)
        except ValueError:
            raise ConfigError("SCER_JOBS", f"must be an integer, got {env!r}") from None
    else:
        jobs = cli_jobs if cli_jobs is not None else 1
    if jobs < 1:
        raise ConfigError("jobs", "must be >= 1")
    return jobs
