"""Command-line entry point: ``tail-il <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .adapters import (AdapterBundle, AdapterConfigError, adapter_shapes, build_freeze_mask, count_trainable,
                       load_bundle)
from .bench import BenchError, build_dataset, load_dataset, make_suite, perception_matrix, save_dataset
from .checkpoint import CheckpointError, DigestMismatch, dir_size, read_arrays
from .config import ConfigError, ExperimentConfig, load_config
from .continual import (EvalContext, StrategyError, evaluate_tasks, parse_strategy, pretrain, run_curriculum,
                        suite_mean)
from .metrics import LedgerError, RunLedger
from .policy import SpecError, init_weights, load_weights, param_shapes, save_weights
from .report import aggregate, plot_ledger, plot_sweep, read_table_csv, render, table_csv
from .train import NumericalError, ScheduleError

log = logging.getLogger("tail_il")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_MANIFEST = "data_manifest.json"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------- helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "profile", None))
    if getattr(args, "seed", None) is not None:
        try:
            cfg = cfg.with_seed(args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _workers(args) -> int:
    if os.environ.get("TAIL_DETERMINISTIC") == "1":
        return 1
    return args.workers if args.workers else (os.cpu_count() or 1)


def _ctx(cfg: ExperimentConfig, workers: int) -> EvalContext:
    env = cfg.bench.env
    return EvalContext(env, perception_matrix(cfg.bench.seeds.data_seed, env), cfg.bench.seeds.eval_seed,
                       cfg.train.eval_episodes, workers)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_suite(data: Path, cfg: ExperimentConfig, suite_id: str):
    man = _data_manifest(data)
    if man["data_seed"] != cfg.bench.seeds.data_seed:
        raise ConfigError(f"data in {data} was generated with data_seed {man['data_seed']}, "
                          f"config says {cfg.bench.seeds.data_seed}")
    if suite_id not in man["suites"]:
        raise BenchError(f"suite {suite_id!r} not found in {data}")
    return load_dataset(data / suite_id)


def _data_manifest(data: Path) -> dict:
    try:
        return json.loads((data / DATA_MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise BenchError(f"{data} has no {DATA_MANIFEST}; run gen-data first") from exc
    except json.JSONDecodeError as exc:
        raise BenchError(f"corrupt {DATA_MANIFEST} in {data}") from exc


def _load_base(path: Path, cfg: ExperimentConfig):
    weights, meta = load_weights(path)
    echo = meta.get("config", {})
    if echo.get("policy") != cfg.to_dict()["policy"]:
        raise ConfigError(f"base checkpoint {path} was built with a different policy spec than the config")
    if echo.get("bench", {}).get("seeds", {}).get("data_seed") != cfg.bench.seeds.data_seed:
        raise ConfigError(f"base checkpoint {path} was pretrained on a different data seed")
    return weights, meta


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    env = cfg.bench.env
    seed = cfg.bench.seeds.data_seed
    suites = {}
    for sd in (cfg.bench.pretrain,) + cfg.bench.suites:
        tasks = make_suite(sd.kind, sd.n_tasks, cfg.suite_seed(sd.id), env, suite_id=sd.id)
        ds = build_dataset(tasks, seed, env)
        save_dataset(ds, out / sd.id)
        _, man = read_arrays(out / sd.id)
        suites[sd.id] = {"kind": sd.kind, "n_tasks": sd.n_tasks, "digest": man["digest"],
                         "demos_per_task": env.n_demos, "train_per_task": env.n_train}
        print(f"{sd.id:14s} {sd.kind:13s} {sd.n_tasks} tasks x {env.n_demos} demos  steps={ds.num_steps('all')}")
    _write_json(out / DATA_MANIFEST, {"format_version": FORMAT_VERSION, "data_seed": seed, "suites": suites,
                                      "config": cfg.to_dict()})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    data, out = Path(args.data), Path(args.out)
    ds = _load_suite(data, cfg, cfg.bench.pretrain.id)
    if args.resume:
        weights, _ = _load_base(Path(args.resume), cfg)
    else:
        weights = init_weights(cfg.policy, cfg.train.seed)
    ctx = _ctx(cfg, _workers(args))
    epochs = args.epochs or cfg.curriculum.pretrain_epochs
    base, rec = pretrain(weights, ds, cfg.train, ctx, cfg.adapter, epochs=epochs)
    save_weights(base, out / "base", {"config": cfg.to_dict(), "pretrain": {
        "best_success": rec["best_success"], "epochs": epochs, "resumed_from": str(args.resume or "")}})
    _write_json(out / "pretrain.json", rec)
    with open(out / "pretrain_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "task", "split", "metric", "value"])
        for e, (tr, va) in enumerate(zip(rec["train_nll"], rec["val_nll"]), start=1):
            w.writerow([0, e, "*", "train", "nll", repr(float(tr))])
            w.writerow([0, e, "*", "val", "nll", repr(float(va))])
        for c in rec["success"]:
            w.writerow([0, c["epoch"], ds.suite_id, "eval", "success", repr(float(c["success"]))])
    print(f"pretrain best success {rec['best_success']:.3f}; checkpoint -> {out / 'base'}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    if args.strategy:
        parse_strategy(args.strategy, cfg.adapter)
        cfg = replace(cfg, curriculum=replace(cfg.curriculum, strategy=args.strategy))
    data, out = Path(args.data), Path(args.out)
    base, _ = _load_base(Path(args.base), cfg)
    stages = args.stages.split(",") if args.stages else list(cfg.curriculum.stages)
    datasets = [_load_suite(data, cfg, s) for s in stages]
    ctx = _ctx(cfg, _workers(args))
    ledger = RunLedger(out, cfg.to_dict())
    state, ledger = run_curriculum(base, datasets, cfg.curriculum.strategy, cfg.train, ctx, cfg.adapter, ledger)
    ledger.save()
    for s in ledger.stages:
        bwt = "-" if s["bwt"] is None else f"{s['bwt']:+.3f}"
        print(f"stage {s['stage']} {s['suite_id']:12s} FWT {s['fwt']:.3f}  BWT {bwt}  "
              f"trainable {100 * s['params']['fraction']:.2f}%")
    drift = state.base.digest() != state.pretrain_digest
    print(f"base digest {'changed' if drift else 'unchanged'}; ledger -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    base, _ = _load_base(Path(args.base), cfg)
    bundle = load_bundle(Path(args.bundle), base.digest()) if args.bundle else None
    ds = _load_suite(data, cfg, args.suite)
    ctx = _ctx(cfg, _workers(args))
    if args.episodes:
        ctx = replace(ctx, episodes=args.episodes)
    rates = evaluate_tasks(base, bundle, ds.tasks, ctx)
    for t, v in rates.items():
        print(f"{ds.suite_id}/{t}: {v:.3f}")
    print(f"{ds.suite_id} mean: {suite_mean(rates):.3f}")
    if args.out:
        _write_json(Path(args.out), {"suite": ds.suite_id, "tasks": {str(k): v for k, v in rates.items()},
                                     "mean": suite_mean(rates), "episodes": ctx.episodes})
    return EXIT_OK


def cmd_metrics(args) -> int:
    paths = [Path(p) for p in args.paths]
    if len(paths) == 1 and paths[0].is_file():
        table = read_table_csv(paths[0])
    else:
        table = aggregate([RunLedger.load(p) for p in paths])
    missing = any(table.get(r, s, "bwt") is None for r in table.rows[1:] for s in table.strategies)
    print(render(table))
    if missing:
        print("warning: some BWT cells are absent (first stage or missing revisits)", file=sys.stderr)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table_csv(table))
    return EXIT_OK


def _fraction_lines(shapes: dict, cfg: ExperimentConfig) -> list[str]:
    lines = []
    for strat in ("tail-lora", "tail-prefix", "tail-bottleneck", "tail-roboadapter", "fpf", "fft"):
        kind, sp = parse_strategy(strat, cfg.adapter)
        if kind == "tail":
            pspec = cfg.policy
            bshapes = adapter_shapes(sp, pspec)
            mask = build_freeze_mask(shapes, "tail", bshapes)
        elif kind == "fpf":
            bshapes = {}
            mask = build_freeze_mask(shapes, "fpf", {})
        else:
            bshapes = {}
            mask = build_freeze_mask(shapes, "fft")
        r = count_trainable(shapes, mask, bshapes)
        lines.append(f"  {strat:18s} trainable {r['trainable']:>12,d} / {r['total']:,d}  "
                     f"({100 * r['fraction']:.4f}%)")
    return lines


def cmd_inspect(args) -> int:
    cfg = _config(args)
    if args.path is None:
        shapes = param_shapes(cfg.policy)
        print(f"profile {cfg.profile}: shape-only parameter report")
    else:
        path = Path(args.path)
        arrays, man = read_arrays(path)
        print(f"{man['kind']} {path}  ({dir_size(path):,d} bytes, digest {man['digest'][:16]})")
        if man["kind"] == "bundle":
            b = load_bundle(path, None)
            print(f"  suite {b.suite_id}  methods {list(b.spec.methods)}  base {b.base_digest[:16]}")
            print(f"  adapter tensors {sum(t.data.size for t in b.weights.values()):,d}  "
                  f"fusion copy {sum(t.data.size for t in b.fusion_copy.values()):,d}  "
                  f"head copy {sum(t.data.size for t in b.head_copy.values()):,d}")
            return EXIT_OK
        if man["kind"] != "checkpoint":
            raise CheckpointError(f"cannot inspect a {man['kind']!r} file")
        weights, _ = load_weights(path)
        cfg = replace(cfg, policy=weights.spec)
        shapes = {n: (t.shape, weights.groups[n]) for n, t in weights.params.items()}
    groups: dict[str, int] = {}
    for n, (shape, g) in shapes.items():
        k = 1
        for s in shape:
            k *= s
        groups[g] = groups.get(g, 0) + k
    for g, k in groups.items():
        print(f"  {g:20s} {k:>12,d}")
    print("trainable fraction by strategy:")
    for line in _fraction_lines(shapes, cfg):
        print(line)
    return EXIT_OK


def _sweep_specs(cfg: ExperimentConfig, ranks: Sequence[int], methods: Sequence[str], combos: bool):
    specs = []
    for m in methods:
        for r in ranks:
            if m == "lora":
                sp = replace(cfg.adapter, methods=("lora",), lora_rank=r)
            elif m == "bottleneck":
                sp = replace(cfg.adapter, methods=("bottleneck",), bottleneck_size=r)
            else:
                raise ConfigError(f"rank sweep supports lora and bottleneck, not {m!r}")
            specs.append((m, r, sp))
    if combos:
        base = ("prefix", "bottleneck", "lora")
        for n in range(1, 4):
            for sub in itertools.combinations(base, n):
                specs.append(("+".join(sub), "", cfg.adapter.with_methods(*sub)))
    for m, r, sp in specs:
        try:
            adapter_shapes(sp, cfg.policy)
        except AdapterConfigError as exc:
            raise ConfigError(f"{m} rank {r}: {exc}") from exc
    return specs


def cmd_sweep_rank(args) -> int:
    cfg = _config(args)
    ranks = [int(r) for r in args.ranks.split(",") if r.strip()] if args.ranks else list(cfg.curriculum.ranks)
    if not ranks:
        raise ConfigError("empty rank list")
    methods = args.methods.split(",") if args.methods else ["lora", "bottleneck"]
    specs = _sweep_specs(cfg, ranks, methods, args.combinations)
    if args.dry_run:
        for m, r, _ in specs:
            print(f"{m},{r}")
        return EXIT_OK
    data, out = Path(args.data), Path(args.out)
    base, _ = _load_base(Path(args.base), cfg)
    stages = list(cfg.curriculum.stages)[:3]
    datasets = [_load_suite(data, cfg, s) for s in stages]
    ctx = _ctx(cfg, _workers(args))
    rows = []
    for m, r, sp in specs:
        _, led = run_curriculum(base, datasets, "tail", cfg.train, ctx, sp)
        fwt = led.fwt()
        row = {"method": m, "rank": r, **{f"fwt_{s}": v for s, v in zip(stages, fwt)},
               "mean_fwt": sum(fwt) / len(fwt)}
        rows.append(row)
        print(f"{m:24s} {str(r):>4s}  mean FWT {row['mean_fwt']:.3f}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rank_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    ranked = [r for r in rows if r["rank"] != ""]
    if ranked:
        plot_sweep(ranked, out, args.format)
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out)
    for p in args.paths:
        led = RunLedger.load(p)
        dest = out / Path(p).name if len(args.paths) > 1 else out
        for f in plot_ledger(led, dest, args.format):
            print(f)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tail-il", description="Continual imitation learning with per-suite adapters.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=False, base=False, out=True):
        p.add_argument("--config", help="experiment config JSON (layered over its profile)")
        p.add_argument("--profile", choices=["desk-defaults", "paper-defaults"], help="base profile")
        p.add_argument("--seed", type=int, help="training seed override")
        p.add_argument("--workers", type=int, default=0, help="evaluation workers (default: CPU count)")
        if data:
            p.add_argument("--data", required=True, help="directory written by gen-data")
        if base:
            p.add_argument("--base", required=True, help="pretrained base checkpoint directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate demonstrations for every configured suite")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the base policy on the pretrain suite")
    common(p, data=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="override pretrain epochs")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("adapt", help="run the continual curriculum with one strategy")
    common(p, data=True, base=True)
    p.add_argument("--strategy", help="tail-lora|tail-bottleneck|tail-prefix|tail-roboadapter|tail-a+b|fft|fpf|er|ewc")
    p.add_argument("--stages", help="comma-separated suite ids (default: config curriculum)")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a base (plus optional bundle) on one suite")
    common(p, data=True, base=True, out=False)
    p.add_argument("--bundle", help="adapter bundle directory")
    p.add_argument("--suite", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--out", help="optional JSON result path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("metrics", help="FWT/BWT comparison table across ledgers")
    p.add_argument("paths", nargs="+", help="ledger directories, or one table CSV written by this command")
    p.add_argument("--out", help="write the table as CSV")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("inspect", help="parameter counts and trainable fractions")
    p.add_argument("path", nargs="?", help="checkpoint or bundle directory (omit for a shape-only report)")
    p.add_argument("--config")
    p.add_argument("--profile", choices=["desk-defaults", "paper-defaults"])
    p.set_defaults(fn=cmd_inspect, seed=None)

    p = sub.add_parser("sweep-rank", help="FWT versus adapter rank on a 3-suite curriculum")
    common(p, out=False)
    p.add_argument("--data")
    p.add_argument("--base")
    p.add_argument("--out")
    p.add_argument("--ranks", help="comma-separated ranks (default: config)")
    p.add_argument("--methods", help="comma-separated: lora,bottleneck")
    p.add_argument("--combinations", action="store_true", help="also run every prefix/bottleneck/lora subset")
    p.add_argument("--dry-run", action="store_true", help="validate and list the grid without training")
    p.add_argument("--format", default="svg", choices=["svg", "png"])
    p.set_defaults(fn=cmd_sweep_rank)

    p = sub.add_parser("plot", help="loss and success curve figures for ledgers")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="svg", choices=["svg", "png"])
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep-rank" and not args.dry_run and not (args.data and args.base and args.out):
        print("error: sweep-rank needs --data, --base and --out (or --dry-run)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, StrategyError, AdapterConfigError, SpecError, DigestMismatch, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BenchError, CheckpointError, LedgerError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
