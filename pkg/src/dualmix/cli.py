"""Command-line entry point: ``gen-data``, ``run``, ``vanilla-st``, ``eval``, ``report``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config
from .distill import evaluate
from .metrics import miou, per_class_iou
from .segnet import CheckpointError, load_checkpoint, save_checkpoint
from .selftrain import (LabeledTargetSet, RoundReport, StageError, ensemble_score, prepare_data,
                        run_framework, run_round, run_vanilla_self_training, score,
                        train_round_teachers, train_source_only)
from .synthdata import DatasetFormatError, build_splits, read_dataset, save_bundle

log = logging.getLogger("dualmix")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CORRUPT = 4
EXIT_SCHEMA = 5
EXIT_STAGE = 6

RUN_FORMAT = "dualmix-run/1"


class SchemaError(ValueError):
    pass


def metrics_header(num_classes: int) -> list[str]:
    return ["round", "stage", "model", "seed", "miou"] + [f"iou_{c}" for c in range(num_classes)]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def metric_rows(reports: list[RoundReport], seed: int, baseline=None) -> list[list[str]]:
    rows = []
    if baseline is not None:
        rows.append(["0", "baseline", "source_only", str(seed), _fmt(baseline.miou)]
                    + [_fmt(v) for v in baseline.per_class])
    for r in reports:
        for stage, model, s in (("teachers", "teacher_RL", r.teacher_rl), ("teachers", "teacher_SL", r.teacher_sl),
                                ("ensemble", "ensemble", r.ensemble), ("student", "student", r.student)):
            rows.append([str(r.round), stage, model, str(seed), _fmt(s.miou)] + [_fmt(v) for v in s.per_class])
    return rows


def write_metrics(path, rows, num_classes: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics_header(num_classes))
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    bundle = build_splits(cfg.dataset_config())
    out = Path(cfg.out_dir)
    paths = save_bundle(bundle, out)
    (out / "dataset.json").write_text(json.dumps({"config": cfg.to_dict()}, indent=2, sort_keys=True))
    for split, p in paths.items():
        print(f"{split}: {len(getattr(bundle, split))} samples -> {p}")
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    baseline = None
    if cfg.baseline:
        _, baseline = train_source_only(cfg, data)

    if cfg.mode == "framework":
        reports = run_framework(cfg, data, out).reports
    elif cfg.mode == "vanilla_st":
        reports = run_vanilla_self_training(cfg, data, out).reports
    elif cfg.mode == "distill_only":
        labeled = LabeledTargetSet(list(data.bundle.target_labeled))
        reports = [run_round(cfg, data, labeled, 1, out).report]
    else:  # teachers_only
        labeled = LabeledTargetSet(list(data.bundle.target_labeled))
        rl, sl, losses = train_round_teachers(cfg, data, labeled, 1)
        val = data.bundle.target_val
        save_checkpoint(rl, out / "round1_teacher_RL.dmck")
        save_checkpoint(sl, out / "round1_teacher_SL.dmck")
        s_rl, s_sl = score(evaluate(rl, val)), score(evaluate(sl, val))
        ens = ensemble_score([rl, sl], val)
        reports = [RoundReport(1, s_rl, s_sl, ens, ens, 0.0, len(labeled), losses,
                               {"teacher_RL": "round1_teacher_RL.dmck", "teacher_SL": "round1_teacher_SL.dmck"})]

    write_metrics(out / "metrics.csv", metric_rows(reports, cfg.seed, baseline), data.bundle.num_classes)
    run_info = {
        "format": RUN_FORMAT,
        "config": cfg.to_dict(),
        "student_init": cfg.student_init,
        "baseline": None if baseline is None else dataclasses.asdict(baseline),
        "rounds": [r.to_dict() for r in reports],
    }
    (out / "run.json").write_text(json.dumps(run_info, indent=2, sort_keys=True))
    for r in reports:
        print(f"round {r.round}: teacher_RL {r.teacher_rl.miou:.4f}  teacher_SL {r.teacher_sl.miou:.4f}  "
              f"ensemble {r.ensemble.miou:.4f}  student {r.student.miou:.4f}")
    return EXIT_OK


def cmd_eval(checkpoint, dataset) -> int:
    params = load_checkpoint(checkpoint)
    samples = read_dataset(dataset)
    if not samples:
        raise DatasetFormatError(f"{dataset}: no samples")
    cm = evaluate(params, samples)
    for c, v in enumerate(per_class_iou(cm)):
        print(f"class {c}: " + ("undefined" if np.isnan(v) else f"{v:.4f}"))
    print(f"mIoU: {miou(cm):.4f}")
    return EXIT_OK


def _read_run_dir(run_dir: Path) -> tuple[dict, list[dict], list[str]]:
    info_path, metrics_path = run_dir / "run.json", run_dir / "metrics.csv"
    for p in (info_path, metrics_path):
        if not p.is_file():
            raise FileNotFoundError(f"{p} not found")
    info = json.loads(info_path.read_text())
    if info.get("format") != RUN_FORMAT:
        raise SchemaError(f"{info_path}: expected format {RUN_FORMAT!r}")
    with open(metrics_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        rows = [dict(zip(header, row)) for row in reader] if header else []
    if not header or header[:5] != metrics_header(0):
        raise SchemaError(f"{metrics_path}: unexpected header {header}")
    return info, rows, header


def _svg_chart(series: dict[str, list[tuple[int, float]]], title: str) -> str:
    width, height, pad = 640, 400, 50
    points = [p for s in series.values() for p in s]
    if not points:
        points = [(1, 0.0)]
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(max(xs), min(xs) + 1)
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-6:
        y0, y1 = y0 - 0.05, y1 + 0.05

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colours = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">round</text>',
           f'<text x="{pad - 5}" y="{py(y0)}" text-anchor="end" font-size="10">{y0:.3f}</text>',
           f'<text x="{pad - 5}" y="{py(y1)}" text-anchor="end" font-size="10">{y1:.3f}</text>']
    for x in range(x0, x1 + 1):
        out.append(f'<text x="{px(x):.1f}" y="{height - pad + 15}" text-anchor="middle" font-size="10">{x}</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        colour = colours[i % len(colours)]
        pts = sorted(pts)
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{colour}"/>')
        out.append(f'<text x="{width - pad + 5}" y="{pad + 14 * i}" font-size="10" fill="{colour}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out)


def cmd_report(run_dirs, out_dir) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    combined = []
    header = None
    series: dict[str, list[tuple[int, float]]] = {}
    for d in run_dirs:
        d = Path(d)
        info, rows, h = _read_run_dir(d)
        if header is None:
            header = h
        elif h != header:
            raise SchemaError(f"{d}: metrics.csv columns differ from the first run directory")
        mode = info["config"].get("mode", "framework")
        for row in rows:
            combined.append([d.name, mode] + [row[k] for k in header])
            if row["round"] != "0" and row["miou"]:
                series.setdefault(f"{d.name}:{row['model']}", []).append((int(row["round"]), float(row["miou"])))
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "mode"] + (header or []))
        w.writerows(combined)
    (out / "report.svg").write_text(_svg_chart(series, "mIoU per round"))
    print(f"wrote {out / 'comparison.csv'} and {out / 'report.svg'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out, "rounds": args.rounds, "mode": args.mode}
    if getattr(args, "no_style_transfer", False):
        overrides["style_transfer"] = False
    path = args.config
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"config file {path} not found")
    if path is not None and str(path).endswith(".json"):
        stored = json.loads(Path(path).read_text())
        cfg = RunConfig.from_dict(stored.get("config", stored))
        values = cfg.to_dict()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(values)
    return parse_config(path, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value file, or a run.json to re-execute")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--rounds", type=int)
        p.add_argument("--no-style-transfer", action="store_true")
        p.add_argument("--mode")

    common(sub.add_parser("gen-data", help="write the DMX1 dataset splits"))
    common(sub.add_parser("run", help="run the iterative framework (or another --mode)"))
    common(sub.add_parser("vanilla-st", help="run the vanilla self-training comparison"))
    p = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint on a dataset file")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p = sub.add_parser("report", help="aggregate run directories into a CSV and an SVG chart")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset)
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
        cfg = _load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "vanilla-st":
            cfg = dataclasses.replace(cfg, mode="vanilla_st")
        return cmd_run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, DatasetFormatError) as exc:
        print(f"corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except SchemaError as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
