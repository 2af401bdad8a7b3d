"""Command-line entry point: ``stablespike <verb> [options]``.

Exit codes: 0 success, 2 bad usage or config (including an architecture
mismatch), 3 missing or unreadable input files, 4 numerical failure during
training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .data import SynthParams, generate_dataset, load_dataset
from .experiments import AXES, ablation, format_table, load_splits, summarize, sweep_timesteps, \
    write_jsonl
from .inspection import dump_spike_maps, inspect_report
from .model import load_checkpoint
from .trainer import evaluate, firing_and_energy, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("stablespike")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _echo(cfg) -> None:
    print("# resolved config")
    print(cfgmod.dump(cfg), flush=True)


def _resolve(args):
    return cfgmod.resolve(args.config, args.set)


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _splits(cfg):
    try:
        return load_splits(cfg)
    except FileNotFoundError as exc:
        raise CliError(f"{exc}; generate one with `stablespike gen-data --out {cfg.data_dir}`",
                       EXIT_DATA) from exc


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    train, test = _splits(cfg)
    out = Path(args.out or f"runs/train_seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dump(cfg))
    result = fit(train, test, cfg, run_dir=out)
    _emit({"run_dir": str(out), "final_test_acc": result.final["test_acc"],
           "best_test_acc": result.best_accuracy, "best_epoch": result.best_epoch,
           "test_variance": result.final["test_variance"]})
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}", EXIT_DATA) from exc


def _check_arch(cfg, explicit: bool, model) -> None:
    if not explicit:
        return
    hidden = cfg.hidden or model.hidden
    if cfg.arch != model.arch or tuple(hidden) != tuple(model.hidden):
        raise CliError(f"checkpoint holds {model.arch}{list(model.hidden)} but config asks for "
                       f"{cfg.arch}{list(hidden)}", EXIT_USAGE)


def _eval_dataset(cfg, manifest):
    path = Path(manifest) if manifest else Path(cfg.data_dir) / "test.txt"
    try:
        return load_dataset(path, cfg.timesteps, cfg.input_size, cfg.input_size)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    model, _, _ = _load_ckpt(args.checkpoint)
    _check_arch(cfg, args.config is not None or any(s.startswith("arch=") for s in args.set), model)
    ds = _eval_dataset(cfg, args.manifest)
    ev = evaluate(model, ds)
    fe = firing_and_energy(model, ds, cfg.e_ac, cfg.e_mac)
    _emit({"checkpoint": str(args.checkpoint), "samples": len(ds), "timesteps": cfg.timesteps,
           "accuracy": ev.accuracy, "timestep_variance": ev.variance,
           "firing_rates": fe.rates, "energy_pj": fe.energy_pj})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    seeds = _seeds(args.seeds)
    splits = {cfg.timesteps: _splits(cfg)}
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = ablation(cfg, args.axis, seeds, with_baseline=args.baseline, splits=splits,
                    out_dir=out if args.keep_runs else None,
                    sink=lambda r: _emit({"axis": args.axis, **r.as_dict()}))
    summary = summarize(rows)
    table = format_table(["variant", "runs", "mean_acc", "mean_best_acc", "mean_variance"],
                         [[k, v["runs"], v["accuracy"], v["best_accuracy"], v["variance"]]
                          for k, v in summary.items()])
    print(table)
    if out:
        write_jsonl(out / "ablation.jsonl", [r.as_dict() for r in rows])
        write_jsonl(out / "summary.jsonl", [{"variant": k, **v} for k, v in summary.items()])
        (out / "table.txt").write_text(table + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    steps = _seeds(args.T)
    seeds = _seeds(args.seeds)
    for t in steps:
        if t < 2:
            raise CliError(f"sweep-T needs every T >= 2, got {t}", EXIT_USAGE)
        _splits(cfg.replace(timesteps=t))
    print(f"# seeds {seeds}")
    rows = sweep_timesteps(cfg, steps, seeds)
    for row in rows:
        _emit(row)
    print(format_table(["T", "baseline", "method", "delta"],
                       [[r["T"], r["baseline"], r["method"], r["delta"]] for r in rows]))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_jsonl(Path(args.out) / "sweep.jsonl", rows)
    return EXIT_OK


_SYNTH_FIELDS = {f.name: f for f in dataclasses.fields(SynthParams)}


def _synth_overrides(pairs):
    params, counts = {}, {"n_train": 400, "n_test": 100}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep:
            raise cfgmod.ConfigError(f"override must be key=value, got {pair!r}")
        if key in counts:
            counts[key] = int(raw)
        elif key in _SYNTH_FIELDS:
            default = getattr(SynthParams(), key)
            try:
                if isinstance(default, tuple):
                    params[key] = tuple(type(default[0])(v) for v in raw.split(","))
                else:
                    params[key] = type(default)(raw)
            except ValueError as exc:
                raise cfgmod.ConfigError(f"bad value for {key}: {raw!r}") from exc
        else:
            raise cfgmod.ConfigError(f"unknown gen-data key {key!r}")
    return SynthParams(**params), counts


def cmd_gen_data(args) -> int:
    params, counts = _synth_overrides(args.set)
    print("# resolved config")
    print(f"seed = {args.seed}")
    for k, v in {**counts, **dataclasses.asdict(params)}.items():
        print(f"{k} = {cfgmod.format_value(v)}")
    try:
        tr, te = generate_dataset(args.out, args.seed, counts["n_train"], counts["n_test"], params)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc}", EXIT_DATA) from exc
    _emit({"train_manifest": str(tr), "test_manifest": str(te), **counts})
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _resolve(args)
    _echo(cfg)
    model, _, _ = _load_ckpt(args.checkpoint)
    _check_arch(cfg, args.config is not None or any(s.startswith("arch=") for s in args.set), model)
    ds = _eval_dataset(cfg, args.manifest)
    if args.limit:
        ds = ds.subset(range(min(args.limit, len(ds))))
    report = inspect_report(model, ds, cfg.e_ac, cfg.e_mac)
    if args.dump:
        files = dump_spike_maps(model, ds, args.dump, args.samples)
        report["dumped"] = len(files)
    _emit(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablespike", description="Train and inspect spiking networks with consistency losses.",
        epilog="exit codes: 0 ok, 2 usage or config, 3 missing input files, 4 non-finite loss")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--out", help="run directory (default runs/train_seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="dataset manifest (default <data_dir>/test.txt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one run per variant along an axis")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--baseline", action="store_true", help="add a beta=gamma=0 row")
    p.add_argument("--out", help="directory for ablation.jsonl / summary.jsonl / table.txt")
    p.add_argument("--keep-runs", action="store_true", help="keep per-run directories under --out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-T", help="baseline vs method trained at each T")
    common(p)
    p.add_argument("--T", required=True, help="comma-separated timestep counts")
    p.add_argument("--seeds", default="0", help="comma-separated seeds (one run each)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="write the synthetic moving-bar dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="n_train, n_test or a generator parameter")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inspect", help="spike statistics and energy report, optional spike-map dumps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--limit", type=int, default=0, help="only the first N samples")
    p.add_argument("--dump", help="directory for PGM spike-map images")
    p.add_argument("--samples", type=int, default=4, help="samples to dump")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
