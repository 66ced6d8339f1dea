"""Command-line entry point: ``sisaplus <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .aggregate import EnsembleModel, predict_ensemble
from .core import ArchDescriptor
from .harness.bench import GridConfig, format_table, run_grid
from .harness.data import (
    SynthSpec,
    gen_synthetic,
    read_feature_file,
    read_feature_rows,
    write_feature_file,
)
from .harness.metrics import task_metrics
from .kv import format_kv, read_kv
from .sharding import UnlearnRequest, load_plan, make_shard_plan, save_plan
from .trainer import TrainConfig
from .unlearn import Run, execute_unlearn, train_run, verify_erasure

MODE_NAMES = {"vote": "majority_vote", "mean": "mean_prediction", "merge": "weight_average"}


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def load_train_config(path: Path | None, input_dim: int, task: str,
                      n_classes: int | None) -> TrainConfig:
    kv = read_kv(path) if path else {}
    hidden = tuple(int(h) for h in _split_list(kv.pop("hidden_dims", "128")))
    arch = ArchDescriptor(input_dim, hidden, n_classes if task == "classification" else 1,
                          task, kv.pop("activation", "relu"))
    return TrainConfig.from_kv(kv, arch)


def cmd_synth(args) -> int:
    write_feature_file(gen_synthetic(SynthSpec.parse(args.spec)), args.out)
    return 0


def cmd_plan(args) -> int:
    ds = read_feature_file(args.data)
    plan = make_shard_plan(ds, args.shards, args.slices, args.seed, not args.random)
    save_plan(plan, args.out)
    print(f"shard sizes: {plan.shard_sizes()}")
    return 0


def cmd_train(args) -> int:
    ds = read_feature_file(args.data)
    plan = load_plan(args.plan)
    cfg = load_train_config(args.config, ds.feature_dim, ds.task, ds.n_classes)
    run = train_run(ds, plan, cfg, args.out, workers=args.workers)
    print(f"trained {plan.n_shards} shards into {run.gen_dir(0)}")
    return 0


def cmd_unlearn(args) -> int:
    run = Run(args.run)
    if args.remove_users:
        request = UnlearnRequest(user_ids=frozenset(_split_list(args.remove_users)))
    else:
        request = UnlearnRequest(point_ids=frozenset(int(p) for p in _split_list(args.remove_points)))
    outcome = execute_unlearn(run, request, parent=args.parent, workers=args.workers)
    text = format_kv(outcome.to_kv())
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _gen_of(path: Path) -> tuple[Path, int]:
    path = Path(path).resolve()
    if not path.name.startswith("gen-"):
        raise ValueError(f"{path} is not a generation directory (gen-NNNN)")
    return path.parent, int(path.name[4:])


def cmd_verify(args) -> int:
    root_a, before = _gen_of(args.before)
    root_b, after = _gen_of(args.after)
    if root_a != root_b:
        raise ValueError("generations belong to different runs")
    report = verify_erasure(Run(root_a), before, after)
    text = format_kv(report.to_kv())
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if report.passed else 1


def cmd_infer(args) -> int:
    run = Run(args.run)
    g = run.latest if args.generation is None else args.generation
    members = tuple(run.shard_models(g).values())
    ens = EnsembleModel(members, MODE_NAMES[args.mode])
    preds = predict_ensemble(ens, read_feature_rows(args.input))
    lines = [str(int(p)) if ens.task == "classification" else repr(float(p)) for p in np.atleast_1d(preds)]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    run = Run(args.run)
    test = read_feature_file(args.test)
    g = run.latest if args.generation is None else args.generation
    members = tuple(run.shard_models(g).values())
    kv: dict[str, str] = {"generation": str(g), "live_shards": str(len(members))}
    ensemble_mode = "majority_vote" if test.task == "classification" else "mean_prediction"
    for label, mode in (("SISA", ensemble_mode), ("SISA++", "weight_average")):
        preds = predict_ensemble(EnsembleModel(members, mode), test.X)
        for k, v in task_metrics(test.task, preds, test.y, test.n_classes).items():
            kv[f"{label}.{k}"] = repr(v)
    sys.stdout.write(format_kv(kv))
    return 0


def cmd_bench(args) -> int:
    if args.data:
        data = read_feature_file(args.data)
    else:
        data = gen_synthetic(SynthSpec.parse(args.synth))
    grid = GridConfig.load(args.grid) if args.grid else GridConfig()
    reports = run_grid(data, grid, args.out, overwrite=args.overwrite)
    sys.stdout.write(format_table(reports, data.task))
    return 1 if any(r.error for r in reports) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sisaplus", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic feature file")
    s.add_argument("--spec", default="n=600,users=40,d=16,C=6,sep=4,seed=0,task=cls")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("plan", help="partition a feature file into shards and slices")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--shards", type=int, default=4)
    s.add_argument("--slices", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--random", action="store_true", help="ignore users; deal points at random")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("train", help="train every shard and write generation 0")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--plan", required=True, type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("unlearn", help="erase users or points and write a new generation")
    s.add_argument("--run", required=True, type=Path)
    who = s.add_mutually_exclusive_group(required=True)
    who.add_argument("--remove-users")
    who.add_argument("--remove-points")
    s.add_argument("--parent", type=int)
    s.add_argument("--report", type=Path)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_unlearn)

    s = sub.add_parser("verify", help="check an unlearning generation against its parent")
    s.add_argument("--before", required=True, type=Path)
    s.add_argument("--after", required=True, type=Path)
    s.add_argument("--report", type=Path)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("infer", help="predict feature rows with a run's ensemble")
    s.add_argument("--run", required=True, type=Path)
    s.add_argument("--mode", choices=sorted(MODE_NAMES), default="merge")
    s.add_argument("--input", required=True, type=Path)
    s.add_argument("--output", type=Path)
    s.add_argument("--generation", type=int)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score a run on a labelled feature file")
    s.add_argument("--run", required=True, type=Path)
    s.add_argument("--test", required=True, type=Path)
    s.add_argument("--generation", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="run the SISA / SISA++ before-after grid")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path)
    src.add_argument("--synth")
    s.add_argument("--grid", type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileExistsError, FileNotFoundError, RuntimeError) as exc:
        print(f"sisaplus {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
