"""Command-line front end: prepare, train, evaluate, benchmark, report.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training error, 5 evaluation error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import datasets as ds
from .models import BACKBONES, BNStrategy
from .scoring import ScoreReport, ScoringError, aggregate_benchmark, score_model
from .trainer import (
    CheckpointBundle,
    NonFiniteLossError,
    RunRecord,
    TrainConfig,
    TrainingConfigError,
    stable_hash,
    train_run,
)

log = logging.getLogger("pseudoanomaly")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5
SOURCES = ("synthetic", "mnist", "fashion_mnist", "cifar10", "cifar100", "folder")
RUN_LAYOUT = ("config.json", "train.log.jsonl", "run.json", "checkpoints")

DATASET_DEFAULTS = {
    "source": None,
    "normal_class": None,
    "gamma": 0.0,
    "image_size": 32,
    "seed": 0,
    "root": None,
    "download": False,
    "mapping": None,
    "test_fraction": 0.2,
    "manifest": None,
    "synthetic": {},
}
OUTPUT_DEFAULTS = {"run_dir": "runs", "eval_every": 1, "export": ["json", "csv"], "plots": True}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# Config ####################################################################################


def resolve_config(raw: dict, args: argparse.Namespace | None = None) -> dict:
    """Fill defaults, apply command-line overrides and validate. Returns the canonical config."""
    if not isinstance(raw, dict):
        raise CLIError(EXIT_CONFIG, "config must be a JSON object")
    unknown = set(raw) - {"dataset", "train", "output"}
    if unknown:
        raise CLIError(EXIT_CONFIG, f"unknown top-level config keys: {sorted(unknown)}")
    dataset = {**copy.deepcopy(DATASET_DEFAULTS), **raw.get("dataset", {})}
    output = {**OUTPUT_DEFAULTS, **raw.get("output", {})}
    train = dict(raw.get("train", {}))
    for block, allowed, name in ((dataset, DATASET_DEFAULTS, "dataset"), (output, OUTPUT_DEFAULTS, "output")):
        extra = set(block) - set(allowed)
        if extra:
            raise CLIError(EXIT_CONFIG, f"unknown {name} keys: {sorted(f'{name}.{k}' for k in extra)}")

    if args is not None:
        if getattr(args, "seed", None) is not None:
            dataset["seed"] = train["seed"] = args.seed
        if getattr(args, "no_adcon", False):
            train["adcon_enabled"] = False
        if getattr(args, "bn_strategy", None):
            train["bn_strategy"] = args.bn_strategy
        if getattr(args, "backbone", None):
            backbone = train.get("backbone", {})
            backbone = {"backbone": backbone} if isinstance(backbone, str) else dict(backbone)
            backbone["backbone"] = args.backbone
            train["backbone"] = backbone

    for key in ("source", "normal_class"):
        if dataset[key] is None:
            raise CLIError(EXIT_CONFIG, f"missing required key dataset.{key}")
    if dataset["source"] not in SOURCES:
        raise CLIError(EXIT_CONFIG, f"dataset.source must be one of {SOURCES}, got {dataset['source']!r}")
    if dataset["source"] == "folder" and not (dataset["root"] and dataset["mapping"]):
        raise CLIError(EXIT_CONFIG, "folder sources need dataset.root and dataset.mapping")
    if not 0.0 <= float(dataset["gamma"]) < 1.0:
        raise CLIError(EXIT_CONFIG, f"dataset.gamma must lie in [0, 1), got {dataset['gamma']}")

    train.setdefault("seed", dataset["seed"])
    train["image_size"] = dataset["image_size"]
    train["eval_every"] = output["eval_every"]
    try:
        tc = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as e:
        raise CLIError(EXIT_CONFIG, f"invalid train config: {e}") from None
    return {"dataset": dataset, "train": tc.to_dict(), "output": output}


def config_hash(config: dict) -> str:
    return stable_hash({"dataset": config["dataset"], "train": config["train"]})


def load_config(path, args=None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(EXIT_CONFIG, f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise CLIError(EXIT_CONFIG, f"config file {path} is not valid JSON: {e}") from None
    return resolve_config(raw, args)


def load_corpus(dataset: dict) -> ds.ImageCorpus:
    try:
        source = dataset["source"]
        if source == "synthetic":
            return ds.make_synthetic_corpus(size=dataset["image_size"], **dataset["synthetic"])
        if source == "folder":
            return ds.ingest_image_folder(dataset["root"], dataset["mapping"], dataset["image_size"],
                                          dataset["test_fraction"], dataset["seed"])
        return ds.load_benchmark(source, dataset["root"] or f"data/{source}", dataset["download"])
    except (OSError, ValueError, KeyError) as e:
        raise CLIError(EXIT_DATA, f"cannot load dataset: {e}") from None


def load_split(dataset: dict, corpus: ds.ImageCorpus, manifest=None) -> ds.OneClassSplit:
    manifest = manifest or dataset.get("manifest")
    try:
        if manifest:
            split = ds.OneClassSplit.load(manifest)
            corpus.indices(split.train_normals + split.train_anomalies + tuple(split.test_ids))
            return split
        return ds.build_one_class_split(corpus, int(dataset["normal_class"]), float(dataset["gamma"]),
                                        int(dataset["seed"]))
    except (OSError, ValueError, KeyError) as e:
        raise CLIError(EXIT_DATA, f"cannot build split: {e}") from None


def run_dir_for(config: dict) -> Path:
    d = config["dataset"]
    name = f"{d['source']}-c{d['normal_class']}-g{d['gamma']}-s{config['train']['seed']}-{config_hash(config)}"
    return Path(config["output"]["run_dir"]) / name


# Commands ##################################################################################


def cmd_prepare(config: dict, out=None) -> Path:
    corpus = load_corpus(config["dataset"])
    split = load_split(config["dataset"], corpus)
    out = Path(out) if out else Path(config["output"]["run_dir"]) / "manifests" / f"split-{config_hash(config)}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    split.save(out)
    summary = {**split.summary(), "skipped_files": len(corpus.skipped), "resize": "bilinear"}
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return out


def cmd_train(config: dict, force: bool = False, manifest=None) -> Path:
    run_dir = run_dir_for(config)
    if (run_dir / "run.json").exists() and not force:
        raise CLIError(EXIT_CONFIG, f"run directory {run_dir} already holds a finished run; pass --force to redo it")
    if run_dir.exists() and force:
        for name in RUN_LAYOUT:
            p = run_dir / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    corpus = load_corpus(config["dataset"])
    split = load_split(config["dataset"], corpus, manifest)
    tc = TrainConfig.from_dict(config["train"])
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = copy.deepcopy(config)
    if manifest:
        snapshot["dataset"]["manifest"] = str(Path(manifest).resolve())
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))
    try:
        record = train_run(corpus, split, tc, run_dir)
    except NonFiniteLossError as e:
        raise CLIError(EXIT_TRAIN, f"training aborted: {e}") from None
    except TrainingConfigError as e:
        raise CLIError(EXIT_CONFIG, f"incompatible data and model: {e}") from None
    print(json.dumps({"run_dir": str(run_dir), "last_auroc": record.last_auroc, "best_auroc": record.best_auroc}))
    return run_dir


def _find_run_config(checkpoint: Path) -> Path | None:
    for parent in checkpoint.resolve().parents:
        if (parent / "config.json").exists():
            return parent / "config.json"
    return None


def cmd_evaluate(checkpoint, manifest=None, config: dict | None = None, out=None) -> ScoreReport:
    checkpoint = Path(checkpoint)
    try:
        bundle = CheckpointBundle.load(checkpoint)
    except (OSError, KeyError, ValueError, RuntimeError) as e:
        raise CLIError(EXIT_EVAL, f"cannot load checkpoint {checkpoint}: {e}") from None
    if config is None:
        found = _find_run_config(checkpoint)
        if found is None:
            raise CLIError(EXIT_CONFIG, "no config given and no config.json found above the checkpoint")
        config = json.loads(found.read_text())
    corpus = load_corpus(config["dataset"])
    split = load_split(config["dataset"], corpus, manifest)
    image_size = bundle.meta["image_size"]
    try:
        report = score_model(bundle.models.generator, corpus, split.test, image_size,
                             meta={"checkpoint": checkpoint.name, "epoch": bundle.epoch,
                                   "config_hash": bundle.meta["config_hash"]})
    except (ScoringError, ValueError, RuntimeError) as e:
        raise CLIError(EXIT_EVAL, f"evaluation failed: {e}") from None
    run_root = checkpoint.resolve().parent.parent
    out = Path(out) if out else run_root / "reports" / checkpoint.name
    export = config.get("output", OUTPUT_DEFAULTS)["export"]
    out.mkdir(parents=True, exist_ok=True)
    if "json" in export:
        (out / "scores.json").write_text(json.dumps(report.to_json(), indent=1))
    if "csv" in export:
        (out / "scores.csv").write_text(report.to_csv())
    print(json.dumps({"auroc": report.auroc, "out": str(out)}))
    return report


def _cell_config(config: dict, normal_class: int, gamma: float, seed: int) -> dict:
    cell = copy.deepcopy(config)
    cell["dataset"].update(normal_class=normal_class, gamma=gamma, seed=seed, manifest=None)
    cell["train"]["seed"] = seed
    cell["output"]["run_dir"] = str(Path(config["output"]["run_dir"]) / "benchmark")
    return resolve_config(cell)


def _run_cell(cell: dict) -> tuple[str, float | None, str]:
    run_dir = run_dir_for(cell)
    if (run_dir / "run.json").exists():
        record = RunRecord.from_json(json.loads((run_dir / "run.json").read_text()))
        return "skipped", record.last_auroc, str(run_dir)
    try:
        cmd_train(cell, force=True)
        record = RunRecord.from_json(json.loads((run_dir / "run.json").read_text()))
        return "ok", record.last_auroc, str(run_dir)
    except CLIError as e:
        return f"failed: {e}", None, str(run_dir)


def cmd_benchmark(config: dict, classes, gammas, seeds, jobs: int = 1) -> tuple[int, Path]:
    cells = [(c, g, s) for g in gammas for c in classes for s in seeds]
    configs = [_cell_config(config, c, g, s) for c, g, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, configs))
    else:
        results = [_run_cell(c) for c in configs]

    out = Path(config["output"]["run_dir"]) / "benchmark"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cells.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "gamma", "seed", "auroc", "status", "run_dir"])
        for (c, g, s), (status, auc, rd) in zip(cells, results):
            w.writerow([c, g, s, "" if auc is None else repr(auc), status, rd])

    combined, tables = [], {}
    for g in gammas:
        per_class = {c: {} for c in classes}
        for (cc, gg, s), (_, auc, _) in zip(cells, results):
            if gg == g and auc is not None:
                per_class[cc][s] = auc
        if any(len(v) != len(seeds) for v in per_class.values()):
            continue
        table = aggregate_benchmark(per_class, title=f"gamma={g}")
        tables[f"gamma={g}"] = table
        stem = f"table_gamma{g}"
        (out / f"{stem}.csv").write_text(table.to_csv())
        (out / f"{stem}.txt").write_text(table.to_text())
        (out / f"{stem}.json").write_text(json.dumps(table.to_json(), indent=1))
        combined += [[g, c, repr(v)] for c, v in table.rows] + [[g, "avg", repr(table.avg)], [g, "sd", repr(table.sd)]]
        print(table.to_text())
    with open(out / "combined.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["gamma", "class", "mean_auroc"])
        w.writerows(combined)
    if tables and config["output"]["plots"]:
        try:
            from .plotting import benchmark_bars

            benchmark_bars(tables, out)
        except Exception as e:  # noqa: BLE001 - figures are optional
            log.warning("figure rendering failed: %s", e)
    failed = [cell for cell, (status, _, _) in zip(cells, results) if status.startswith("failed")]
    return (EXIT_TRAIN if failed else EXIT_OK), out


def cmd_report(target) -> list[Path]:
    """Render figures and their CSV series for a run directory or a scores.json file."""
    from .plotting import score_boxplot, training_curves

    target = Path(target)
    written = []
    if target.is_file():
        report = ScoreReport.from_json(json.loads(target.read_text()))
        return score_boxplot(report, target.parent / "figures")
    if not (target / "run.json").exists():
        raise CLIError(EXIT_CONFIG, f"{target} is neither a run directory nor a scores.json file")
    record = RunRecord.from_json(json.loads((target / "run.json").read_text()))
    fig_dir = target / "figures"
    try:
        written += training_curves(record.epochs, fig_dir)
    except Exception as e:  # noqa: BLE001
        log.warning("training-curve rendering failed: %s", e)
    reports = sorted((target / "reports").glob("*/scores.json"))
    if not reports and (target / "checkpoints" / "last").exists():
        cmd_evaluate(target / "checkpoints" / "last")
        reports = sorted((target / "reports").glob("*/scores.json"))
    for path in reports:
        report = ScoreReport.from_json(json.loads(path.read_text()))
        try:
            written += score_boxplot(report, fig_dir, stem=f"score_boxplot_{path.parent.name}")
        except Exception as e:  # noqa: BLE001
            log.warning("box-plot rendering failed: %s", e)
    for p in written:
        print(p)
    return written


# Entry point ###############################################################################


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override dataset and train seeds")
    common.add_argument("--jobs", type=int, default=1, help="parallel benchmark cells")
    common.add_argument("--force", action="store_true", help="overwrite a finished run with the same hash")
    common.add_argument("--no-adcon", action="store_true", help="disable the contextual adversarial term")
    common.add_argument("--bn-strategy", choices=sorted(BNStrategy.NAMES))
    common.add_argument("--backbone", choices=BACKBONES)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pseudoanomaly", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="build and save a one-class split manifest")
    p.add_argument("--out", help="manifest path")
    p = sub.add_parser("train", parents=[common], help="train one experiment cell")
    p.add_argument("--manifest", help="use this split manifest instead of building one")
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p = sub.add_parser("benchmark", parents=[common], help="sweep classes x gammas x seeds")
    p.add_argument("--classes", type=_ints, required=True, help="comma-separated normal classes")
    p.add_argument("--gammas", type=_floats, default=[0.0], help="comma-separated anomaly ratios")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2], help="comma-separated seeds")
    p = sub.add_parser("report", parents=[common], help="render figures for a run directory or scores.json")
    p.add_argument("target")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.target)
            return EXIT_OK
        if args.command == "evaluate":
            config = load_config(args.config, args) if args.config else None
            cmd_evaluate(args.checkpoint, args.manifest, config, args.out)
            return EXIT_OK
        if not args.config:
            raise CLIError(EXIT_CONFIG, "--config is required")
        config = load_config(args.config, args)
        if args.command == "prepare":
            cmd_prepare(config, args.out)
        elif args.command == "train":
            cmd_train(config, args.force, args.manifest)
        elif args.command == "benchmark":
            code, _ = cmd_benchmark(config, args.classes, args.gammas, args.seeds, args.jobs)
            return code
        return EXIT_OK
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
