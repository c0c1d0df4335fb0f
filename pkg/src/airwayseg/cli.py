"""Command-line entry point: ``airwayseg <command> [options]``.

Commands: phantom, train, semi, infer, eval, ablate. Every command accepts
``--config FILE`` and repeated ``--set key.path=value`` overrides; the
resolved configuration is written next to the outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from .backbone import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config
from .errors import AirwaySegError, ConfigurationError
from .experiment import (
    VARIANTS,
    Dataset,
    evaluate_cases,
    make_dataset,
    mean_report,
    run_ablation,
    segment,
    train_semi,
    train_supervised,
)
from .metrics import evaluate, format_table
from .phantom import LabeledItem, UnlabeledItem, write_case
from .runlog import RunLog
from .volume import load_mask, load_volume, save_mask

SPLIT_NAME = "split.json"


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or [])


def _echo(rec: dict) -> None:
    print(json.dumps(rec), file=sys.stderr, flush=True)


def _load_items(root: Path, names, labeled: bool):
    out = []
    for n in names:
        vol = load_volume(root / f"{n}_image.nvk")
        if labeled:
            out.append(LabeledItem(n, vol, load_mask(root / f"{n}_label.nvk")))
        else:
            out.append(UnlabeledItem(n, vol))
    return out


def _load_dataset(root) -> tuple[Dataset, dict]:
    root = Path(root)
    split_path = root / SPLIT_NAME
    if not split_path.exists():
        raise ConfigurationError(f"{split_path} not found; run 'airwayseg phantom' first")
    split = json.loads(split_path.read_text())
    labeled = _load_items(root, split["labeled"], True)
    unlabeled = _load_items(root, split["unlabeled"], False)
    test = _load_items(root, split["test"], True)
    return Dataset(labeled, unlabeled, test), split


def _report(model, items, cfg: RunConfig, out: Path) -> dict | None:
    if not items:
        return None
    reports = evaluate_cases(model, items, cfg)
    rows = {it.name: r for it, r in zip(items, reports)}
    summary = {"cases": {k: r.to_dict() for k, r in rows.items()}, "mean": mean_report(reports)}
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    table = format_table(rows)
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return summary


def cmd_phantom(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data.root)
    data = make_dataset(cfg)
    for c in data.cases:
        write_case(c, out)
    (out / SPLIT_NAME).write_text(json.dumps(data.split(), indent=2))
    save_config(cfg, out)
    print(json.dumps({"out": str(out), **{k: len(v) for k, v in data.split().items()}}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out)
    data, _ = _load_dataset(args.data or cfg.data.root)
    save_config(cfg, out)
    log = RunLog(out / "log.jsonl", echo=_echo if args.verbose else None)
    model, result = train_supervised(cfg, data.labeled, log)
    save_checkpoint(model, out / "model.pt", {"seconds": result.seconds, "steps": cfg.train.steps})
    log({"event": "checkpoint", "path": str(out / "model.pt"), "seconds": result.seconds})
    if not args.no_eval:
        _report(model, data.test, cfg, out)
    return 0


def cmd_semi(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out)
    data, _ = _load_dataset(args.data or cfg.data.root)
    base, _ = load_checkpoint(args.checkpoint, cfg.model)
    save_config(cfg, out)
    log = RunLog(out / "log.jsonl", echo=_echo if args.verbose else None)
    student = train_semi(cfg, base, data, log)
    save_checkpoint(student, out / "model.pt", {"base": str(args.checkpoint)})
    log({"event": "checkpoint", "path": str(out / "model.pt")})
    if not args.no_eval:
        _report(student, data.test, cfg, out)
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    torch.set_num_threads(cfg.threads)
    t0 = time.perf_counter()
    model, _ = load_checkpoint(args.checkpoint, cfg.model if args.strict else None)
    cfg = replace(cfg, model=model.cfg)
    volume = load_volume(args.image)
    t1 = time.perf_counter()
    mask = segment(model, volume, cfg)
    t2 = time.perf_counter()
    save_mask(mask, args.out)
    t3 = time.perf_counter()
    print(json.dumps({
        "out": str(args.out), "shape": list(volume.shape), "voxels": mask.count(),
        "seconds": {"load": round(t1 - t0, 3), "segment": round(t2 - t1, 3), "save": round(t3 - t2, 3),
                    "total": round(t3 - t0, 3)},
    }))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    pred, ref = load_mask(args.pred), load_mask(args.ref)
    report = evaluate(pred, ref, fraction=cfg.metrics.detection_fraction)
    print(report.table(Path(args.pred).name))
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out)
    variants = args.variants.split(",") if args.variants else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    save_config(cfg, out)
    log = RunLog(out / "log.jsonl", echo=_echo if args.verbose else None)
    result = run_ablation(cfg, variants, seeds, log)
    (out / "ablation.json").write_text(result.to_json())
    table = result.table()
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airwayseg", description="Airway tree segmentation on phantom CT volumes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
        return sp

    sp = common(sub.add_parser("phantom", help="generate a phantom dataset with a labeled/unlabeled/test split"))
    sp.add_argument("--out", help="dataset directory (default: data.root)")
    sp.set_defaults(func=cmd_phantom)

    for name, func, doc in (("train", cmd_train, "supervised training"), ("semi", cmd_semi, "teacher-student training")):
        sp = common(sub.add_parser(name, help=doc))
        sp.add_argument("--data", help="dataset directory (default: data.root)")
        sp.add_argument("--out", help="run directory (default: out)")
        sp.add_argument("--no-eval", action="store_true", help="skip evaluation on the test split")
        sp.add_argument("-v", "--verbose", action="store_true", help="echo log records to stderr")
        if name == "semi":
            sp.add_argument("--checkpoint", required=True, help="supervised model to start from")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("infer", help="segment one volume"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output mask path")
    sp.add_argument("--strict", action="store_true", help="require the checkpoint to match the configured model")
    sp.set_defaults(func=cmd_infer)

    sp = common(sub.add_parser("eval", help="compare a predicted mask with a reference"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", help="write the JSON report here")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablate", help="variant matrix over seeds, mean±std table"))
    sp.add_argument("--variants", help=f"comma-separated subset of: {', '.join(VARIANTS)}")
    sp.add_argument("--seeds", help="comma-separated seeds (default: ablate.seeds)")
    sp.add_argument("--out", help="output directory (default: out)")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AirwaySegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
