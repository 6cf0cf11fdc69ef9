"""Command-line interface.

Exit codes: 0 success, 2 config rejection, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalAbort
from .checkpoint import CheckpointError, load_arrays
from .harness import (
    TrainConfig,
    Trainer,
    compare,
    evaluate_model,
    expand_seeds,
    load_config,
    preset_matrix,
    run_experiment,
    save_config,
    val_scene_seed,
)
from .metrics import prediction_dump
from .scene import save_scene, synthesize_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _read_config(path: str | None) -> TrainConfig:
    if path is None:
        cfg = TrainConfig()
        cfg.validate()
        return cfg
    return load_config(path)


def cmd_synth(args) -> int:
    config = _read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        scene = synthesize_scene(config.scene, seed)
        save_scene(scene, config.scene, out / f"scene_{i:04d}.json")
    print(f"wrote {args.count} scene dumps to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _read_config(args.config)
    result = run_experiment(config, args.out, resume=args.resume)
    print(
        f"{config.label}: trained {len(result.step_records)} steps in "
        f"{result.wall_seconds:.1f}s; final total loss "
        f"{result.epoch_trajectory[-1]['total'] if result.epoch_trajectory else float('nan'):.4f}"
    )
    m = result.metrics
    print(f"metrics: map_miou={m.map_miou} occ_miou={m.occ_miou} det_map={m.det_map}")
    return EXIT_OK


def cmd_eval(args) -> int:
    header, _ = load_arrays(args.checkpoint)
    config = TrainConfig.from_json(header["config"])
    config.validate()
    if args.scenes is not None:
        config.val_scenes = args.scenes
    trainer = Trainer(config)
    trainer.load_checkpoint(args.checkpoint)
    report = evaluate_model(trainer.model, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=1))
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["map_miou", "occ_miou", "det_map"])
        writer.writeheader()
        writer.writerow(report.csv_row())
    if args.dump_predictions:
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        for i in range(config.val_scenes):
            scene = synthesize_scene(config.scene, val_scene_seed(config, i))
            pred = trainer.model.predict(scene)
            doc = prediction_dump(pred["boxes"], pred["map_probs"], pred["occ_labels"])
            (pred_dir / f"scene_{i:04d}.json").write_text(json.dumps(doc))
    print(f"map_miou={report.map_miou} occ_miou={report.occ_miou} det_map={report.det_map}")
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _read_config(args.config)
    if args.matrix:
        docs = json.loads(Path(args.matrix).read_text())
        configs = [TrainConfig.from_json(d) for d in docs]
        for c in configs:
            c.validate()
    else:
        configs = preset_matrix(args.preset, base)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    configs = expand_seeds(configs, seeds)
    rows, csv_text = compare(configs, args.out)
    print(csv_text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(trials=args.trials)
    failed = 0
    for entry in results:
        status = "pass" if entry.ok else "FAIL"
        print(
            f"{status}  {entry.name:<28} worst_rel={entry.worst_rel:.3e} "
            f"trials={entry.trials} ({entry.seconds:.1f}s)"
        )
        failed += 0 if entry.ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else 1


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for run_dir in args.runs:
        run = Path(run_dir)
        result_path = run / "result.json"
        if not result_path.exists():
            print(f"skipping {run}: no result.json", file=sys.stderr)
            continue
        doc = json.loads(result_path.read_text())
        summary_rows.append(
            {
                "run": run.name,
                "label": doc["label"],
                "seed": doc["seed"],
                "fingerprint": doc["fingerprint"],
                "initial_total": doc["initial_total"],
                "final_total": doc["final_total"],
                "map_miou": doc["metrics"]["map_miou"],
                "occ_miou": doc["metrics"]["occ_miou"],
                "det_map": doc["metrics"]["det_map"],
                "wall_seconds": doc["wall_seconds"],
            }
        )
        log_path = run / "log.jsonl"
        if log_path.exists():
            records = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
            with (out / f"loss_curve_{run.name}.csv").open("w", newline="") as fh:
                writer = csv.DictWriter(
                    fh,
                    fieldnames=[
                        "step", "epoch", "l_cpg", "l_sup", "l_det", "l_map", "l_occ",
                        "total", "grad_norm",
                    ],
                )
                writer.writeheader()
                for r in records:
                    writer.writerow({k: r[k] for k in writer.fieldnames})
    if not summary_rows:
        print("no runs found", file=sys.stderr)
        return EXIT_CONFIG
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary_rows[0].keys()))
        writer.writeheader()
        for row in summary_rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    print(f"wrote summary for {len(summary_rows)} runs to {out / 'summary.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomtl",
        description="Prototype-guided multi-task 3D perception on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit scene dumps")
    p.add_argument("--config", help="config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training config")
    p.add_argument("--config", help="config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, help="override validation scene count")
    p.add_argument("--dump-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run an ablation matrix")
    p.add_argument("--config", help="base config JSON")
    p.add_argument("--preset", default="main", choices=["main", "tsfg", "spa"])
    p.add_argument("--matrix", help="explicit JSON list of configs (overrides preset)")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="full finite-difference suite")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize experiment runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("init-config", help="write the default config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)

    return parser


def cmd_init_config(args) -> int:
    cfg = TrainConfig()
    cfg.validate()
    save_config(cfg, args.out)
    print(f"wrote default config to {args.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config rejected: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
