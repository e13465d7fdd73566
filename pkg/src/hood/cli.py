"""Command-line entry point: ``python -m hood <subcommand> ...``.

Exit codes: 0 ok, 1 usage or invalid config, 2 I/O, 3 numerical failure.
Every failure prints exactly one line to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import NonFiniteError
from .data import FactoredDataset, generate_synthetic, load_dataset, save_dataset
from .errors import FileFormatError
from .intervention import InterventionConfig, pgd_augment
from .model import load_checkpoint, save_checkpoint
from .tasks import (BUILDERS, RUNNERS, TASK_KINDS, TaskSpec, build_pools, config_for, cross_prediction,
                    interior_optimum, score_instances, sweep_augmentations)
from .trainer import TrainConfig, TrainingDiverged, train_hood, write_log_csv
from .transforms import apply_styles

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None
    try:
        out = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None
    if not isinstance(out, dict):
        raise UsageError(f"invalid config {path}: expected a JSON object")
    return out


def _train_config(path, seed) -> TrainConfig:
    raw = _read_json(path) if path else {}
    if seed is not None:
        raw["seed"] = seed
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _task(kind: str, target_domain=None, spec_path=None) -> TaskSpec:
    factors = _read_json(spec_path) if spec_path else {}
    if "kind" in factors or "factors" in factors:
        task = TaskSpec.from_dict({"kind": kind, **factors})
    else:
        try:
            task = BUILDERS[kind](**factors) if kind != "open_set_da" else BUILDERS[kind](target_domain, **factors)
        except TypeError as exc:
            raise UsageError(f"invalid spec: {exc}") from None
    if target_domain is not None:
        task = replace(task, target_domain=target_domain)
    return task


def _range(text: str) -> list[int]:
    """``2..6`` or ``2,3,5``."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad pool-size list {text!r}; use e.g. 2..6") from None


def _num_augmentations(params, kind: str) -> int:
    return params.config.num_domains - 1 - (kind == "open_set_da")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> None:
    task = _task(args.task, spec_path=args.spec)
    try:
        task.validate()
    except ValueError as exc:
        raise UsageError(f"invalid spec: {exc}") from None
    save_dataset(generate_synthetic(task.factors, args.seed), args.out)


def cmd_train(args) -> None:
    cfg = _train_config(args.config, args.seed)
    ds = load_dataset(args.data)
    task = _task(args.task, args.target_domain)
    cfg = config_for(task, cfg)
    result = train_hood(cfg, build_pools(task, ds, cfg))
    save_checkpoint(result.params, args.out)
    if args.log:
        write_log_csv(result.log, args.log)


def cmd_augment(args) -> None:
    """Write the benign and malign samples for the labeled split as a dataset file."""
    cfg = _train_config(args.config, args.seed)
    ds = load_dataset(args.data)
    params = load_checkpoint(args.ckpt)
    lab = np.flatnonzero(ds.split == 0)
    rng = np.random.default_rng(cfg.seed)
    a = cfg.num_augmentations
    aug = rng.integers(0, a + 1, size=len(lab))
    xs = apply_styles(ds.x[lab], aug, a, ds.value_range)
    base = cfg.intervention
    parts = []
    for mode in ("positive", "negative"):
        icfg = InterventionConfig(base.epsilon, base.steps, base.step_size, base.norm, mode)
        parts.append(pgd_augment(xs, ds.y[lab], aug, icfg, params, ds.value_range, lab))
    origin = np.concatenate([p.origin_index for p in parts])
    out = FactoredDataset(
        x=np.concatenate([p.x_aug for p in parts]).astype(np.float32),
        y=np.concatenate([p.label for p in parts]).astype(np.int32),
        domain=np.concatenate([p.domain for p in parts]).astype(np.int32),
        split=ds.split[origin], content_factors=ds.content_factors[origin],
        style_factors=ds.style_factors[origin], content_id=ds.content_id[origin],
        style_id=ds.style_id[origin], kind=np.concatenate([p.kind for p in parts]).astype(np.int32),
        origin=origin.astype(np.int32), num_known_classes=ds.num_known_classes,
        num_unknown_classes=ds.num_unknown_classes, num_domains=a + 1, value_range=ds.value_range)
    save_dataset(out, args.out)


def cmd_eval(args) -> None:
    ds = load_dataset(args.data)
    params = load_checkpoint(args.ckpt)
    report = RUNNERS[args.task](params, ds)
    report.cross_prediction = cross_prediction(params, ds, _num_augmentations(params, args.task), args.seed or 0)
    report.validate()
    text = report.to_json(args.report)
    if args.scores:
        score_instances(params, ds).write_csv(args.scores)
    if not args.report:
        print(text)


def cmd_probe(args) -> None:
    ds = load_dataset(args.data)
    params = load_checkpoint(args.ckpt)
    a = args.augmentations or _num_augmentations(params, args.task)
    cp = cross_prediction(params, ds, a, args.seed or 0)
    text = json.dumps({"grid": cp.grid(), "rows": ["content", "style"], "cols": ["class", "domain"],
                       "class_chance": cp.class_chance, "domain_chance": cp.domain_chance}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_sweep(args) -> None:
    cfg = _train_config(args.config, args.seed)
    task = _task(args.task, spec_path=args.spec)
    rows = sweep_augmentations(task, cfg, _range(args.augmentations))
    fields = ["num_augmentations", "metric", "closed_set_accuracy", "corrupted_accuracy", "auroc"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if args.out:
            out.close()
    if args.out is None:
        print(f"# interior optimum: {interior_optimum(rows)}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hood", description="Causal content/style disentanglement for open-set recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, task=True):
        sp.add_argument("--seed", type=int, default=None)
        if task:
            sp.add_argument("--task", choices=TASK_KINDS, default="ood_detection")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    common(g)
    g.add_argument("--spec", help="JSON with FactorSpec field overrides")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data, seed=0)

    t = sub.add_parser("train", help="train and write a checkpoint")
    common(t)
    t.add_argument("--config", help="JSON with TrainConfig fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--target-domain", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("augment", help="write benign and malign samples for the labeled split")
    common(a, task=False)
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", help="write the JSON report here instead of stdout")
    e.add_argument("--scores", help="per-instance CSV")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="cross-prediction grid")
    common(pr)
    pr.add_argument("--data", required=True)
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--augmentations", type=int)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("sweep", help="train one model per augmentation-pool size")
    common(s)
    s.add_argument("--augmentations", default="2..6")
    s.add_argument("--config")
    s.add_argument("--spec")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep, task="open_set_ssl")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        msg, code = f"usage error: {exc}", EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        msg, code = f"numerical failure: {exc}", EXIT_NUMERIC
    except FileFormatError as exc:
        msg, code = f"bad file: {exc}", EXIT_IO
    except OSError as exc:
        msg, code = f"I/O error: {exc.strerror or exc}" + (f": {exc.filename}" if exc.filename else ""), EXIT_IO
    except ValueError as exc:
        msg, code = f"invalid input: {exc}", EXIT_USAGE
    print(f"hood: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main_entry() -> None:
    sys.exit(main())
