"""Command-line entry points: gen, train, ablate, eval, match.

All outputs land under a run directory inside the output root, which defaults
to ./runs and can be overridden with the PROTODA_OUTPUT_ROOT environment
variable. Config files are JSON.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, pngio
from .bench import ScenarioConfig, generate_domain_pair, scenario_presets, write_dataset
from .matching import SourceIndex, class_frequency, rarity_weights
from .metrics import evaluate, format_report_table
from .net import load_checkpoint, save_checkpoint
from .trainer import (
    ExperimentConfig,
    Hyperparams,
    Toggles,
    ablate,
    format_ablation_table,
    standard_grid,
    train,
    weight_variant_grid,
)


def output_root() -> Path:
    return Path(os.environ.get("PROTODA_OUTPUT_ROOT", "runs"))


def load_scenario(spec: str) -> ScenarioConfig:
    """A preset name or a path to a scenario JSON file."""
    path = Path(spec)
    if path.exists():
        return ScenarioConfig.from_json_dict(json.loads(path.read_text()))
    return scenario_presets(spec)


def load_experiment(path: str) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    return experiment_from_dict(doc)


def experiment_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    scenario = doc.pop("scenario")
    if isinstance(scenario, str):
        scenario = scenario_presets(scenario)
    else:
        scenario = ScenarioConfig.from_json_dict(scenario)
    hyper = Hyperparams(**doc.pop("hyper", {}))
    toggles = Toggles(**doc.pop("toggles", {}))
    if "hidden" in doc:
        doc["hidden"] = tuple(doc["hidden"])
    return ExperimentConfig(scenario=scenario, hyper=hyper, toggles=toggles, **doc)


def experiment_to_dict(config: ExperimentConfig) -> dict:
    doc = dataclasses.asdict(config)
    return doc


def _write_loss_log(log, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "source_seg", "target_seg", "proto", "total", "q_t", "source_id", "target_id"]
        )
        for row in log:
            writer.writerow(
                [
                    row.step,
                    repr(row.source_seg),
                    repr(row.target_seg),
                    repr(row.proto),
                    repr(row.total),
                    repr(row.q_t),
                    row.source_id,
                    row.target_id,
                ]
            )


def cmd_gen(args) -> int:
    scenario = load_scenario(args.scenario)
    out = Path(args.out)
    source, target = generate_domain_pair(scenario)
    write_dataset(source, out / "source")
    write_dataset(target, out / "target")
    (out / "scenario.json").write_text(json.dumps(scenario.to_json_dict(), indent=2))
    print(f"wrote {len(source)} source and {len(target)} target images under {out}")
    return 0


def cmd_train(args) -> int:
    config = load_experiment(args.config)
    run_dir = Path(args.out) if args.out else output_root() / f"train_seed{config.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    result = train(config)

    (run_dir / "config.json").write_text(json.dumps(experiment_to_dict(config), indent=2))
    result.report.save(run_dir / "metrics.json")
    _write_loss_log(result.loss_log, run_dir / "loss_log.csv")
    save_checkpoint(result.net, config.steps, run_dir / "student.ckpt")
    save_checkpoint(result.teacher, config.steps, run_dir / "teacher.ckpt")

    _, target_ds = generate_domain_pair(config.scenario)
    pred_dir = run_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    from .trainer import predict_dataset

    preds = predict_dataset(result.net, target_ds)
    for img_id, pred in list(zip(target_ds.ids, preds))[: args.dump_predictions]:
        pngio.save_label_png(pred, pred_dir / f"{img_id}.png")

    print(format_report_table(result.report, config.scenario))
    print(f"outputs in {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    config = load_experiment(args.config)
    if args.grid == "standard":
        grid = standard_grid()
    elif args.grid == "weights":
        grid = weight_variant_grid()
    else:
        doc = json.loads(Path(args.grid).read_text())
        grid = [(name, Toggles(**tog)) for name, tog in doc]
    seeds = tuple(args.seeds)

    rows = ablate(config, grid, seeds=seeds)
    table = format_ablation_table(rows)

    run_dir = Path(args.out) if args.out else output_root() / "ablation"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(experiment_to_dict(config), indent=2))
    payload = [
        {"name": r.name, "toggles": dataclasses.asdict(r.toggles), "common": r.common,
         "private": r.private, "h": r.h}
        for r in rows
    ]
    (run_dir / "ablation.json").write_text(json.dumps(payload, indent=2))
    (run_dir / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_eval(args) -> int:
    net, step = load_checkpoint(args.checkpoint)
    target_ds = bench.load_dataset(Path(args.data))
    scenario = ScenarioConfig.from_json_dict(json.loads(Path(args.scenario).read_text()))
    from .trainer import predict_dataset

    preds = predict_dataset(net, target_ds)
    gts = [target_ds.eval_label(i) for i in range(len(target_ds))]
    report = evaluate(preds, gts, scenario)
    print(format_report_table(report, scenario))
    if args.out:
        report.save(args.out)
    return 0


def cmd_match(args) -> int:
    index = SourceIndex.load(args.index)
    pseudo = pngio.load_label_png(args.pseudo)
    dist = class_frequency(pseudo, index.num_classes)
    rarity = rarity_weights(dist.freq, args.temperature)
    present = dist.counts[: index.num_classes] > 0
    scores = index.counts @ (rarity * present)
    order = sorted(range(len(index.ids)), key=lambda i: (-scores[i], index.ids[i]))

    print(f"{'rank':>4}  {'image':<16} {'score':>12}")
    for rank, i in enumerate(order[: args.top_k], start=1):
        print(f"{rank:>4}  {index.ids[i]:<16} {scores[i]:>12.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoda")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a source/target dataset pair")
    p.add_argument("--scenario", required=True, help="preset name or scenario JSON path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run a single training configuration")
    p.add_argument("--config", required=True, help="experiment config JSON path")
    p.add_argument("--out", default=None, help="run directory (default under output root)")
    p.add_argument("--dump-predictions", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run a toggle grid over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default="standard", help="standard | weights | grid JSON path")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="target dataset directory")
    p.add_argument("--scenario", required=True, help="scenario JSON path")
    p.add_argument("--out", default=None, help="optional metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="top-k source matches for a pseudo-label map")
    p.add_argument("--index", required=True, help="source index JSON path")
    p.add_argument("--pseudo", required=True, help="pseudo-label PNG path")
    p.add_argument("--temperature", "-T", type=float, default=0.01)
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_match)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # surface everything as a nonzero exit
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
