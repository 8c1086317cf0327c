"""Command-line entry point wiring configs, data, training, merging, and
evaluation into reproducible experiments.

Exit codes: 0 success, 2 config/validation error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from . import data as data_mod
from . import evaluation, merge as merge_mod, params as params_mod
from .errors import ConfigError, CongruenceError, DataFormatError, NumericsError
from .train import train_all

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir: Path, command: str, cfg, extra: dict | None = None) -> None:
    manifest = {"command": command, "config": cfg.to_dict()}
    if extra:
        manifest.update(extra)
    _dump_json(manifest, out_dir / "manifest.json")


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.default_config()
    if getattr(args, "lam", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, lam=args.lam))
        cfg.train.validate()
    if getattr(args, "strategy", None) is not None:
        if args.strategy not in merge_mod.STRATEGIES:
            raise ConfigError(f"--strategy must be one of {merge_mod.STRATEGIES}")
        cfg = replace(cfg, merge=replace(cfg.merge, strategy=args.strategy))
    if getattr(args, "r", None) is not None:
        if not 0.0 <= args.r < 1.0:
            raise ConfigError(f"--r must lie in [0, 1), got {args.r}")
        cfg = replace(cfg, merge=replace(cfg.merge, r=args.r))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
    out = _out_dir(args)
    ds = evaluation.generate_dataset(cfg)
    data_mod.save_csv(ds, out / "dataset.csv")
    sidecar = dict(ds.provenance or {})
    sidecar["config"] = cfg.to_dict()
    _dump_json(sidecar, out / "dataset_spec.json")
    print(f"wrote {len(ds)} samples to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    out = _out_dir(args)
    ds = data_mod.load_csv(args.data, n_classes=cfg.data.n_classes)

    clf, theta0 = evaluation.build_classifier(cfg)
    split = data_mod.split_train_val(ds, cfg.train.seed)
    domains = ds.domains()
    per_source = [split.train.restrict([d]) for d in domains]

    try:
        result = train_all(per_source, clf, theta0, cfg.train, val_view=split.val)
    except NumericsError as exc:
        diag_path = out / "failure_diagnostic.json"
        _dump_json(exc.diagnostic, diag_path)
        print(f"numerical failure: {exc}; diagnostic at {diag_path}", file=sys.stderr)
        return EXIT_NUMERIC

    params_mod.save_checkpoint(theta0, out / "theta0.json")
    proto_set = params_mod.ParamSet([("prototypes", clf.prototypes.matrix)])
    params_mod.save_checkpoint(proto_set, out / "prototypes.json")
    for i, domain in enumerate(domains):
        params_mod.save_checkpoint(result.ma_params[i], out / f"source_{domain}_ma.json")
        params_mod.save_checkpoint(
            result.final_params[i], out / f"source_{domain}_final.json"
        )
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec))
            fh.write("\n")
    _write_manifest(out, "train", cfg, {"domains": domains, "data": str(args.data)})
    print(f"trained {len(domains)} sources for {cfg.train.steps} steps -> {out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    theta0 = params_mod.load_checkpoint(args.theta0)
    sources = [params_mod.load_checkpoint(p) for p in args.sources]
    strategy = args.strategy or "rhm"
    r = args.r if args.r is not None else 0.2
    accs = None
    if strategy == "best_model":
        if args.val_accuracies is None:
            raise ConfigError("best_model merging needs --val-accuracies")
        accs = [float(v) for v in args.val_accuracies.split(",")]
    merge_input = merge_mod.MergeInput(
        theta0, sources, trim_ratio=r, strategy=strategy, val_accuracies=accs
    )
    merged, report = merge_mod.merge_models(merge_input)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    params_mod.save_checkpoint(merged, out_path)
    _dump_json(report.to_dict(), out_path.with_suffix(out_path.suffix + ".report.json"))
    print(f"merged {len(sources)} sources ({strategy}, r={r}) -> {out_path}")
    return EXIT_OK


def _run_seeds(args, cfg):
    return [args.seed] if args.seed is not None else cfg.eval.seeds


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ds = evaluation.generate_dataset(cfg)
    strategies = [args.strategy] if args.strategy else None
    report = evaluation.leave_one_out_run(
        ds, cfg, strategies=strategies, seeds=_run_seeds(args, cfg), jobs=args.jobs
    )
    _dump_json(report, out / "report.json")
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["held_out", "seed", "strategy", "held_out_accuracy"])
        for cell in report["cells"]:
            writer.writerow([cell["held_out"], cell["seed"], "zs", cell["zs_accuracy"]])
            for strategy in report["strategies"]:
                writer.writerow(
                    [
                        cell["held_out"],
                        cell["seed"],
                        strategy,
                        cell["strategies"][strategy]["held_out_accuracy"],
                    ]
                )
    _write_manifest(out, "run", cfg, {"seeds": report["seeds"], "jobs": args.jobs})
    if args.plots:
        from . import plots

        plots.plot_loss_curves(report, out / "loss_curves.svg")
    for strategy, agg in sorted(report["aggregates"].items()):
        print(f"{strategy:12s} acc = {agg['mean']:.4f} +/- {agg['std']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ds = evaluation.generate_dataset(cfg)
    report = evaluation.ablation_run(ds, cfg, jobs=args.jobs)
    _dump_json(report, out / "ablation.json")
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "mean_accuracy", "std_accuracy", "n"])
        for row in sorted(report["table"]):
            agg = report["table"][row]
            writer.writerow([row, agg["mean"], agg["std"], agg["n"]])
    _write_manifest(out, "ablate", cfg, {"seeds": report["seeds"], "jobs": args.jobs})
    for row in sorted(report["table"]):
        agg = report["table"][row]
        print(f"{row:16s} acc = {agg['mean']:.4f} +/- {agg['std']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ds = evaluation.generate_dataset(cfg)
    values = [float(v) for v in args.values.split(",")] if args.values else None
    report = evaluation.sweep(
        ds, cfg, parameter=args.param, values=values, jobs=args.jobs
    )
    _dump_json(report, out / "sweep.json")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["parameter", "value", "strategy", "mean_accuracy", "std_accuracy", "n"]
        )
        for row in report["rows"]:
            writer.writerow(
                [
                    row["parameter"],
                    row["value"],
                    row["strategy"],
                    row["mean_accuracy"],
                    row["std_accuracy"],
                    row["n"],
                ]
            )
    _write_manifest(out, "sweep", cfg, {"parameter": report["parameter"]})
    if args.plots:
        from . import plots

        plots.plot_sweep(report, out / "sweep.svg")
    print(f"swept {report['parameter']} over {report['values']} -> {out / 'sweep.csv'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harmerge",
        description="Harmonized multi-source training and model merging experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, plots=False):
        p.add_argument("--config", type=str, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--out", type=str, required=True, help="output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel protocol cells")
        if plots:
            p.add_argument("--plots", action="store_true", help="emit SVG plots")

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train all sources on a dataset file")
    common(p)
    p.add_argument("--data", type=str, required=True, help="dataset CSV path")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge source checkpoints")
    p.add_argument("--strategy", type=str, default="rhm",
                   choices=list(merge_mod.STRATEGIES))
    p.add_argument("--r", type=float, default=None, help="trim ratio")
    p.add_argument("--theta0", type=str, required=True)
    p.add_argument("--out", type=str, required=True, help="merged checkpoint path")
    p.add_argument("--val-accuracies", type=str, default=None,
                   help="comma-separated accuracies for best_model")
    p.add_argument("sources", nargs="+", help="source checkpoint paths")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("run", help="leave-one-domain-out protocol")
    common(p, jobs=True, plots=True)
    p.add_argument("--strategy", type=str, default=None)
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="emit the ablation table")
    common(p, jobs=True)
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity sweep over one knob")
    common(p, jobs=True, plots=True)
    p.add_argument("--param", type=str, default=None,
                   choices=list(config_mod.SWEEP_PARAMETERS))
    p.add_argument("--values", type=str, default=None,
                   help="comma-separated sweep values")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CongruenceError, DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
