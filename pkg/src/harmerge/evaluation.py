"""Leave-one-domain-out evaluation, conflict diagnostics, the ablation table,
and sensitivity sweeps.

Every (held-out domain, seed) cell trains the remaining domains from one
shared initialization, applies the requested merge strategies, and scores the
held-out domain plus the pooled training-domain validation split.  Cells are
independent, so they can run in parallel; aggregation is order-independent.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, generate, split_train_val
from .errors import ConfigError
from .merge import MergeInput, merge_models
from .model import CosineClassifier, init_prototypes
from .params import ParamSet, sign_conflict_rate  # noqa: F401  (re-export)
from .train import HarmonyConfig, TrainResult, train_all

ABLATION_ROWS = (
    "zs",
    "erm",
    "best_source",
    "avg",
    "avg_opa",
    "layer_trim_opa",
    "rhm",
    "rhm_opa",
    "rhm_opa_no_sae",
)


def accuracy(clf: CosineClassifier, params: ParamSet, ds: Dataset) -> float:
    """Fraction of correct argmax predictions."""
    if len(ds) == 0:
        raise ValueError("accuracy over an empty dataset")
    pred = clf.predict(params, ds.x)
    return float(np.mean(pred == ds.y))


def generate_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    return generate(d.n_classes, d.input_dim, d.n_per_domain, d.domains, d.seed)


def build_classifier(cfg: RunConfig) -> tuple[CosineClassifier, ParamSet]:
    """Shared frozen prototypes and shared initialization for every run of a
    config; the zero-shot row therefore never varies across seeds."""
    proto = init_prototypes(cfg.data.n_classes, cfg.model.embed_dim, cfg.model.proto_seed)
    clf = CosineClassifier(cfg.model.encoder_config(cfg.data.input_dim), proto)
    theta0 = clf.init_params(cfg.model.init_seed)
    return clf, theta0


def _prepare_cell(
    dataset: Dataset, held_out: int, seed: int
) -> tuple[Dataset, list[Dataset], Dataset]:
    domains = dataset.domains()
    if held_out not in domains:
        raise ConfigError(f"held-out domain {held_out} not present in dataset")
    training = [d for d in domains if d != held_out]
    if len(training) < 1:
        raise ConfigError("need at least one training domain")
    train_ds = dataset.restrict(training)
    split = split_train_val(train_ds, seed)
    per_source = [split.train.restrict([d]) for d in training]
    return dataset.restrict([held_out]), per_source, split.val


def _train_cell(
    dataset: Dataset,
    cfg: RunConfig,
    held_out: int,
    seed: int,
    train_cfg: HarmonyConfig,
) -> tuple[CosineClassifier, ParamSet, TrainResult, Dataset, Dataset]:
    held_ds, per_source, val_ds = _prepare_cell(dataset, held_out, seed)
    clf, theta0 = build_classifier(cfg)
    result = train_all(
        per_source, clf, theta0, replace(train_cfg, seed=seed), val_view=val_ds
    )
    return clf, theta0, result, held_ds, val_ds


def _merge_for_strategy(
    strategy: str,
    theta0: ParamSet,
    result: TrainResult,
    r: float,
):
    if strategy == "best_model":
        sources = result.best_params or result.ma_params
        accs = result.best_val_acc or [0.0] * len(sources)
        merge_input = MergeInput(
            theta0, list(sources), trim_ratio=r, strategy="best_model",
            val_accuracies=list(accs),
        )
    else:
        merge_input = MergeInput(
            theta0, list(result.ma_params), trim_ratio=r, strategy=strategy
        )
    return merge_models(merge_input)


def _diagnostic_series(log: list[dict]) -> list[dict]:
    """Per-step conflict diagnostics: means over sources plus the per-source
    loss curves."""
    by_step: dict[int, list[dict]] = {}
    for rec in log:
        by_step.setdefault(rec["step"], []).append(rec)
    series = []
    for step in sorted(by_step):
        recs = sorted(by_step[step], key=lambda r: r["source"])
        series.append(
            {
                "step": step,
                "ce_loss": float(np.mean([r["ce_loss"] for r in recs])),
                "ce_loss_per_source": [r["ce_loss"] for r in recs],
                "sign_loss": float(np.mean([r["sign_loss"] for r in recs])),
                "sign_conflict_rate": float(
                    np.mean([r["sign_conflict_rate"] for r in recs])
                ),
                "admitted": int(sum(r["admitted"] for r in recs)),
                "admitted_corrupted": int(
                    sum(r["admitted_corrupted"] for r in recs)
                ),
            }
        )
    return series


def run_protocol_cell(
    dataset: Dataset,
    cfg: RunConfig,
    held_out: int,
    seed: int,
    strategies: Sequence[str],
    keep_diagnostics: bool = True,
) -> dict:
    """One (held-out domain, seed) cell: train the source models once, apply
    every merge strategy, and score everything."""
    clf, theta0, result, held_ds, val_ds = _train_cell(
        dataset, cfg, held_out, seed, cfg.train
    )
    cell: dict = {
        "held_out": held_out,
        "seed": seed,
        "zs_accuracy": accuracy(clf, theta0, held_ds),
        "strategies": {},
        "source_val_accuracy": [
            accuracy(clf, p, val_ds) for p in result.ma_params
        ],
        "source_held_out_accuracy": [
            accuracy(clf, p, held_ds) for p in result.ma_params
        ],
    }
    for strategy in strategies:
        merged, report = _merge_for_strategy(strategy, theta0, result, cfg.merge.r)
        cell["strategies"][strategy] = {
            "held_out_accuracy": accuracy(clf, merged, held_ds),
            "val_accuracy": accuracy(clf, merged, val_ds),
            "merge_report": report.to_dict(),
        }
    if keep_diagnostics:
        cell["diagnostics"] = _diagnostic_series(result.log)
    return cell


def _cell_worker(args) -> dict:
    dataset, cfg, held_out, seed, strategies, keep_diagnostics = args
    return run_protocol_cell(dataset, cfg, held_out, seed, strategies, keep_diagnostics)


def _run_cells(tasks: list[tuple], jobs: int) -> list[dict]:
    if jobs <= 1:
        return [_cell_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell_worker, tasks))


def _aggregate(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def leave_one_out_run(
    dataset: Dataset,
    cfg: RunConfig,
    strategies: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
    jobs: int = 1,
    keep_diagnostics: bool = True,
) -> dict:
    """Full leave-one-domain-out protocol over every domain and seed.

    The report carries per-cell accuracies (zero-shot row included), per-
    strategy aggregates, merge reports, and conflict diagnostics, plus the
    resolved config for provenance.
    """
    strategies = list(strategies if strategies is not None else cfg.eval.strategies)
    seeds = list(seeds if seeds is not None else cfg.eval.seeds)
    domains = dataset.domains()
    if len(domains) < 3:
        raise ConfigError("leave-one-domain-out needs at least 3 domains")

    tasks = [
        (dataset, cfg, held_out, seed, strategies, keep_diagnostics)
        for held_out in domains
        for seed in seeds
    ]
    cells = _run_cells(tasks, jobs)

    aggregates = {
        "zs": _aggregate([c["zs_accuracy"] for c in cells]),
    }
    for strategy in strategies:
        accs = [c["strategies"][strategy]["held_out_accuracy"] for c in cells]
        aggregates[strategy] = _aggregate(accs)

    per_domain: dict[str, dict] = {}
    for held_out in domains:
        sub = [c for c in cells if c["held_out"] == held_out]
        per_domain[str(held_out)] = {
            "zs": _aggregate([c["zs_accuracy"] for c in sub]),
            **{
                s: _aggregate(
                    [c["strategies"][s]["held_out_accuracy"] for c in sub]
                )
                for s in strategies
            },
        }

    clf, _ = build_classifier(cfg)
    return {
        "protocol": "leave_one_domain_out",
        "config": cfg.to_dict(),
        "seeds": seeds,
        "strategies": strategies,
        "domains": domains,
        "prototype_min_pairwise_angle": clf.prototypes.min_pairwise_angle(),
        "cells": cells,
        "aggregates": aggregates,
        "per_domain": per_domain,
    }


# -- ablation table -------------------------------------------------------------


def _ablation_cell(args) -> dict:
    dataset, cfg, held_out, seed = args
    held_ds, per_source, val_ds = _prepare_cell(dataset, held_out, seed)
    clf, theta0 = build_classifier(cfg)
    r = cfg.merge.r

    def train_with(**overrides) -> TrainResult:
        tc = replace(cfg.train, seed=seed, **overrides)
        return train_all(per_source, clf, theta0, tc, val_view=val_ds)

    row_acc: dict[str, float] = {"zs": accuracy(clf, theta0, held_ds)}
    diagnostics: dict[str, dict] = {}

    # ERM baseline: one model on the union of sources, same optimizer budget.
    pooled = Dataset(
        np.concatenate([v.x for v in per_source]),
        np.concatenate([v.y for v in per_source]),
        np.concatenate([v.domain_id for v in per_source]),
        np.concatenate([v.corrupted for v in per_source]),
        dataset.n_classes,
    )
    erm_cfg = replace(cfg.train, seed=seed, lam=0.0, sae=False)
    erm = train_all([pooled], clf, theta0, erm_cfg, val_view=val_ds)
    row_acc["erm"] = accuracy(clf, erm.final_params[0], held_ds)

    # Plain per-source training (no sign loss), SAE on.
    res_plain = train_with(lam=0.0)
    merged, _ = _merge_for_strategy("avg", theta0, res_plain, r)
    row_acc["avg"] = accuracy(clf, merged, held_ds)
    merged, _ = _merge_for_strategy("rhm", theta0, res_plain, r)
    row_acc["rhm"] = accuracy(clf, merged, held_ds)

    # Full harmonized training (sign loss active), SAE on.
    res_full = train_with()
    for row, strategy in (
        ("avg_opa", "avg"),
        ("layer_trim_opa", "layer_trim"),
        ("rhm_opa", "rhm"),
    ):
        merged, _ = _merge_for_strategy(strategy, theta0, res_full, r)
        row_acc[row] = accuracy(clf, merged, held_ds)
    source_val = [accuracy(clf, p, val_ds) for p in res_full.ma_params]
    best_idx = int(np.argmax(source_val))
    row_acc["best_source"] = accuracy(clf, res_full.ma_params[best_idx], held_ds)
    merged, _ = _merge_for_strategy("best_model", theta0, res_full, r)
    row_acc["best_model"] = accuracy(clf, merged, held_ds)
    diagnostics["full"] = _conflict_summary(res_full.log)

    # Full training with enrichment disabled.
    res_no_sae = train_with(sae=False)
    merged, _ = _merge_for_strategy("rhm", theta0, res_no_sae, r)
    row_acc["rhm_opa_no_sae"] = accuracy(clf, merged, held_ds)

    return {
        "held_out": held_out,
        "seed": seed,
        "rows": row_acc,
        "source_val_accuracy": source_val,
        "source_held_out_accuracy": [
            accuracy(clf, p, held_ds) for p in res_full.ma_params
        ],
        "diagnostics": diagnostics,
    }


def _conflict_summary(log: list[dict], tail: int = 100) -> dict:
    if not log:
        return {"mean_sign_conflict_rate": 0.0, "mean_sign_loss": 0.0}
    last_step = max(rec["step"] for rec in log)
    cut = max(last_step - tail, 0)
    tail_recs = [rec for rec in log if rec["step"] > cut]
    return {
        "mean_sign_conflict_rate": float(
            np.mean([r["sign_conflict_rate"] for r in tail_recs])
        ),
        "mean_sign_loss": float(np.mean([r["sign_loss"] for r in tail_recs])),
        "min_sign_loss": float(min(r["sign_loss"] for r in log)),
    }


def ablation_run(dataset: Dataset, cfg: RunConfig, jobs: int = 1) -> dict:
    """Emit the full ablation table: zero-shot, pooled ERM, best single
    source, plain and harmonized averaging, layer- vs model-level trimming,
    and the SAE on/off and historical-vs-best-model comparisons."""
    domains = dataset.domains()
    if len(domains) < 3:
        raise ConfigError("ablation needs at least 3 domains")
    tasks = [
        (dataset, cfg, held_out, seed)
        for held_out in domains
        for seed in cfg.eval.seeds
    ]
    if jobs <= 1:
        cells = [_ablation_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_ablation_cell, tasks))

    rows = sorted({name for c in cells for name in c["rows"]})
    table = {row: _aggregate([c["rows"][row] for c in cells]) for row in rows}
    best_source_cells = [c["rows"]["best_source"] for c in cells]
    return {
        "protocol": "ablation",
        "config": cfg.to_dict(),
        "seeds": list(cfg.eval.seeds),
        "domains": domains,
        "cells": cells,
        "table": table,
        "best_source_mean": float(np.mean(best_source_cells)),
    }


# -- sensitivity sweep ------------------------------------------------------------


def _patched_config(cfg: RunConfig, parameter: str, value: float) -> RunConfig:
    if parameter == "lambda":
        return replace(cfg, train=replace(cfg.train, lam=value))
    if parameter == "r":
        return replace(
            cfg,
            train=replace(cfg.train, trim_ratio=value),
            merge=replace(cfg.merge, r=value),
        )
    if parameter == "beta":
        return replace(cfg, train=replace(cfg.train, beta=value))
    if parameter == "logit_scale":
        model = replace(cfg.model, logit_scale=value)
        return replace(cfg, model=model)
    raise ConfigError(f"unknown sweep parameter {parameter!r}")


def sweep(
    dataset: Dataset,
    cfg: RunConfig,
    parameter: str | None = None,
    values: Sequence[float] | None = None,
    jobs: int = 1,
) -> dict:
    """Repeat the leave-one-domain-out run varying one knob; the report holds
    one aggregate row per (value, strategy)."""
    parameter = parameter or cfg.eval.sweep_parameter
    values = list(values if values is not None else cfg.eval.sweep_values)
    if len(values) < 1:
        raise ConfigError("sweep needs at least one value")
    runs = []
    for value in values:
        patched = _patched_config(cfg, parameter, value)
        report = leave_one_out_run(
            dataset, patched, jobs=jobs, keep_diagnostics=False
        )
        runs.append({"value": value, "report": report})
    rows = []
    for run in runs:
        for strategy, agg in run["report"]["aggregates"].items():
            rows.append(
                {
                    "parameter": parameter,
                    "value": run["value"],
                    "strategy": strategy,
                    "mean_accuracy": agg["mean"],
                    "std_accuracy": agg["std"],
                    "n": agg["n"],
                }
            )
    return {
        "protocol": "sweep",
        "parameter": parameter,
        "values": values,
        "config": cfg.to_dict(),
        "rows": rows,
        "runs": runs,
    }
