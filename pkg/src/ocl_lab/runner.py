"""Experiment orchestration: the (method, seed) grid and result files.

Each run gets its own RNG stream derived from (label, seed) so adding or
removing a method section never perturbs the others; the data pipeline
(synthetic draw, train/test split, class shuffle) depends on the seed alone
so every method at one seed sees the same task stream. Runs may execute in
parallel (bounded by OCL_LAB_THREADS); results are written by a single
aggregator in a deterministic order, so repeated invocations produce
byte-identical results.csv files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, MethodSpec, write_config
from .data import (
    LabeledDataset,
    load_csv,
    load_idx,
    split_tasks,
    synth_gaussian,
    train_test_split,
)
from .errors import ConfigError, OclLabError
from .evaluation import decomposed_inner_product, final_forgetting
from .nn_core import FeatureExtractor, LinearClassifier, ModelBundle
from .trainer import ExperimentResult, run_experiment

# Student-t 97.5% quantiles for small df; beyond the table the normal value.
_T_975 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
    8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160,
    14: 2.145, 15: 2.131, 20: 2.086, 25: 2.060, 30: 2.042,
}


def _t_critical(df: int) -> float:
    if df <= 0:
        return 0.0
    if df in _T_975:
        return _T_975[df]
    keys = sorted(_T_975)
    for k in keys:
        if df < k:
            return _T_975[k]
    return 1.96


def mean_ci95(values) -> tuple[float, float]:
    """Mean and 95% confidence half-width (Student-t) across runs."""
    arr = np.asarray(list(values), dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    half = _t_critical(arr.size - 1) * float(arr.std(ddof=1)) / float(np.sqrt(arr.size))
    return mean, half


def derive_run_seed(label: str, seed: int) -> int:
    """Stable per-run seed from (label, seed); independent of other labels."""
    digest = hashlib.sha256(f"{label}|{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _derive_split_seed(seed: int) -> int:
    digest = hashlib.sha256(f"split|{seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _with_class_count(dataset: LabeledDataset, class_count: int) -> LabeledDataset:
    if dataset.class_count == class_count:
        return dataset
    return LabeledDataset(dataset.samples, dataset.labels, class_count)


def build_task_data(config: ExperimentConfig, seed: int):
    """Train task sequence plus aligned per-task test sets for one seed."""
    ds = config.dataset
    if ds.kind == "synth":
        full = synth_gaussian(ds.classes, ds.input_dim, ds.per_class, ds.separation, seed=seed)
        train, test = train_test_split(full, ds.test_fraction, seed=_derive_split_seed(seed))
    elif ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels)
    else:
        train = load_csv(ds.train_path)
        if ds.test_path:
            test = load_csv(ds.test_path)
        else:
            train, test = train_test_split(train, ds.test_fraction, seed=_derive_split_seed(seed))
    classes = max(train.class_count, test.class_count)
    train = _with_class_count(train, classes)
    test = _with_class_count(test, classes)
    train_seq = split_tasks(train, config.task_count, shuffle_seed=seed)
    test_seq = split_tasks(test, config.task_count, shuffle_seed=seed)
    return train_seq, test_seq.tasks


@dataclass
class RunOutcome:
    """One completed (or failed) run of the grid."""

    label: str
    method: str
    ablation: str
    seed: int
    wall_seconds: float
    error: str | None = None
    result: ExperimentResult | None = None
    final_accuracy: float | None = None
    forgetting: float | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RunReport:
    """All outcomes plus per-label aggregate statistics."""

    outcomes: list[RunOutcome]
    aggregates: dict[str, dict[str, float]]

    @property
    def failed(self) -> list[RunOutcome]:
        return [o for o in self.outcomes if not o.ok]


def _execute_run(config: ExperimentConfig, spec: MethodSpec, seed: int) -> RunOutcome:
    started = time.perf_counter()
    try:
        train_seq, test_sets = build_task_data(config, seed)
        train_config = spec.train_config(
            derive_run_seed(spec.label, seed), config.hidden_dims, config.feature_dim
        )
        result = run_experiment(train_config, train_seq, test_sets)
        forgetting = (
            final_forgetting(result.matrix) if result.matrix.task_count >= 2 else None
        )
        return RunOutcome(
            label=spec.label,
            method=spec.method,
            ablation=spec.ablation,
            seed=seed,
            wall_seconds=time.perf_counter() - started,
            result=result,
            final_accuracy=result.final_accuracy,
            forgetting=forgetting,
        )
    except OclLabError as exc:
        return RunOutcome(
            label=spec.label,
            method=spec.method,
            ablation=spec.ablation,
            seed=seed,
            wall_seconds=time.perf_counter() - started,
            error=f"{type(exc).__name__}: {exc}",
        )


def _thread_budget(config: ExperimentConfig) -> int:
    budget = config.threads
    env = os.environ.get("OCL_LAB_THREADS", "").strip()
    if env:
        try:
            budget = min(budget, max(1, int(env)))
        except ValueError:
            raise ConfigError(f"OCL_LAB_THREADS={env!r} is not an integer") from None
    return max(1, budget)


def run(config: ExperimentConfig, out_dir=None, seed_override: int | None = None) -> RunReport:
    """Execute the method x seed grid and write every result artifact."""
    if seed_override is not None:
        config = dataclasses.replace(config, seeds=(int(seed_override),))
    out = Path(out_dir) if out_dir is not None else Path(config.output)
    config = dataclasses.replace(config, output=str(out))
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "effective_config.ini")

    jobs = [(spec, seed) for spec in config.methods for seed in config.seeds]
    workers = _thread_budget(config)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda job: _execute_run(config, *job), jobs))
    else:
        outcomes = [_execute_run(config, spec, seed) for spec, seed in jobs]

    by_label: dict[str, list[RunOutcome]] = {}
    for outcome in outcomes:
        by_label.setdefault(outcome.label, []).append(outcome)

    aggregates = {}
    for spec in config.methods:
        done = [o for o in by_label.get(spec.label, []) if o.ok]
        if not done:
            continue
        mean_at, ci_at = mean_ci95([o.final_accuracy for o in done])
        entry = {"mean_AT": mean_at, "ci95_AT": ci_at}
        forgets = [o.forgetting for o in done if o.forgetting is not None]
        if forgets:
            mean_ft, ci_ft = mean_ci95(forgets)
            entry.update(mean_FT=mean_ft, ci95_FT=ci_ft)
        aggregates[spec.label] = entry

    _write_results_csv(config, by_label, out / "results.csv")
    _write_summary(aggregates, out / "summary.json")
    _write_runs_json(outcomes, out / "runs.json")
    for outcome in outcomes:
        if not outcome.ok:
            continue
        _write_step_log(outcome, out / f"steps_{outcome.label}_{outcome.seed}.jsonl")
        if config.save_snapshots:
            save_snapshot(outcome, out / f"snapshot_{outcome.label}_{outcome.seed}.npz")
        if config.save_profiles:
            profile_path = out / f"profile_{outcome.label}_{outcome.seed}.csv"
            _write_profile_for_outcome(outcome, profile_path)
    return RunReport(outcomes=outcomes, aggregates=aggregates)


def _fmt(value: float) -> str:
    return format(float(value), ".12g")


def _write_results_csv(config: ExperimentConfig, by_label, path) -> None:
    t = config.task_count
    header = ["method", "seed", "task_index", "A_i"] + [f"a_{j}" for j in range(1, t + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for spec in config.methods:
            outcomes = [o for o in by_label.get(spec.label, []) if o.ok]
            for outcome in sorted(outcomes, key=lambda o: config.seeds.index(o.seed)):
                matrix = outcome.result.matrix
                for i in range(1, t + 1):
                    row = matrix.row(i)
                    padded = [_fmt(v) for v in row] + [""] * (t - i)
                    writer.writerow(
                        [spec.label, outcome.seed, i, _fmt(float(row.mean()))] + padded
                    )
            if outcomes:
                finals = np.stack([o.result.matrix.row(t) for o in outcomes])
                mean_final = finals.mean(axis=0)
                writer.writerow(
                    [spec.label, "mean", t, _fmt(float(mean_final.mean()))]
                    + [_fmt(v) for v in mean_final]
                )


def _write_summary(aggregates, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(aggregates, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_runs_json(outcomes, path) -> None:
    payload = []
    for o in outcomes:
        entry = {
            "label": o.label,
            "method": o.method,
            "ablation": o.ablation,
            "seed": o.seed,
            "wall_seconds": round(o.wall_seconds, 6),
            "final_accuracy": o.final_accuracy,
            "forgetting": o.forgetting,
            "error": o.error,
        }
        if o.ok:
            t = o.result.matrix.task_count
            entry["average_accuracy_per_task"] = o.result.per_task_average
            entry["final_task_accuracies"] = list(o.result.matrix.row(t))
        payload.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _write_step_log(outcome: RunOutcome, path) -> None:
    state = outcome.result.state
    with open(path, "w", encoding="utf-8") as fh:
        for mask in state.masks:
            fh.write(
                json.dumps(
                    {
                        "event": "subspace",
                        "task": mask.task_id,
                        "size": mask.size,
                        "bits": mask.to_bitstring(),
                    }
                )
                + "\n"
            )
        for record in state.records:
            fh.write(
                json.dumps(
                    {
                        "step": record.step,
                        "task": record.task_id,
                        "loss_current": record.loss_current,
                        "loss_replay": record.loss_replay,
                        "loss_total": record.loss_total,
                        "buffer_fill": record.buffer_fill,
                        "mask_id": record.mask_id,
                    }
                )
                + "\n"
            )


def save_snapshot(outcome: RunOutcome, path) -> None:
    """Freeze one finished run: parameters, masks, classes, buffer contents."""
    result = outcome.result
    state = result.state
    buffer_x, buffer_y = state.buffer.contents()
    tasks = result.matrix.task_count
    seen_per_task = np.asarray(state.seen_classes, dtype=np.int64)
    per_task = len(seen_per_task) // tasks if tasks else 0
    old = seen_per_task[: per_task * (tasks - 1)] if tasks > 1 else np.zeros(0, np.int64)
    new = seen_per_task[per_task * (tasks - 1) :]
    arrays = {
        "classifier": state.model.classifier.weights,
        "accumulated": np.asarray(state.accumulated.bits),
        "seen_classes": seen_per_task,
        "old_classes": old,
        "new_classes": new,
        "buffer_samples": buffer_x,
        "buffer_labels": buffer_y,
        "meta": np.array(
            json.dumps(
                {
                    "label": outcome.label,
                    "method": outcome.method,
                    "ablation": outcome.ablation,
                    "seed": outcome.seed,
                    "layers": len(state.model.extractor.weights),
                    "masks": [m.to_bitstring() for m in state.masks],
                }
            )
        ),
    }
    for i, (w, b) in enumerate(zip(state.model.extractor.weights, state.model.extractor.biases)):
        arrays[f"weights_{i}"] = w
        arrays[f"biases_{i}"] = b
    np.savez(path, **arrays)


def load_snapshot(path):
    """Rebuild (model, payload dict) from a saved run snapshot."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        layers = int(meta["layers"])
        weights = [data[f"weights_{i}"] for i in range(layers)]
        biases = [data[f"biases_{i}"] for i in range(layers)]
        model = ModelBundle(
            FeatureExtractor(weights, biases), LinearClassifier(data["classifier"])
        )
        payload = {
            "meta": meta,
            "accumulated": data["accumulated"],
            "seen_classes": data["seen_classes"],
            "old_classes": data["old_classes"],
            "new_classes": data["new_classes"],
            "buffer_samples": data["buffer_samples"],
            "buffer_labels": data["buffer_labels"],
        }
    return model, payload


def write_profile_csv(profile, path) -> None:
    """Emit one inner-product profile as (dim, group, mean_value) rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "group", "mean_value"])
        for group, values in (("old", profile.old_profile), ("new", profile.new_profile)):
            for dim, value in enumerate(values):
                writer.writerow([dim, group, _fmt(value)])


def _write_profile_for_outcome(outcome: RunOutcome, path) -> None:
    state = outcome.result.state
    buffer_x, _ = state.buffer.contents()
    tasks = outcome.result.matrix.task_count
    if tasks < 2 or buffer_x.shape[0] == 0:
        return
    seen = list(state.seen_classes)
    per_task = len(seen) // tasks
    profile = decomposed_inner_product(
        state.model,
        buffer_x,
        state.accumulated,
        seen[: per_task * (tasks - 1)],
        seen[per_task * (tasks - 1) :],
    )
    write_profile_csv(profile, path)


def compute_profile(model: ModelBundle, payload):
    """Inner-product profile of a snapshot's buffered samples."""
    if payload["buffer_samples"].shape[0] == 0:
        raise ConfigError("snapshot holds no buffered samples to profile")
    if payload["old_classes"].size == 0:
        raise ConfigError("snapshot has a single task; no old/new class split")
    return decomposed_inner_product(
        model,
        payload["buffer_samples"],
        payload["accumulated"],
        payload["old_classes"],
        payload["new_classes"],
    )
