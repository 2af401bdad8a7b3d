"""Multi-run comparisons: ablation axes and the timestep sweep."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

AXES = {
    "bitop": [("AND", {"bitop": "AND"}), ("OR", {"bitop": "OR"}), ("XOR", {"bitop": "XOR"})],
    "noise": [
        ("aware", {"noise": "aware"}),
        ("fixed_p=0.4", {"noise": "fixed:0.4"}),
        ("fixed_p=0.5", {"noise": "fixed:0.5"}),
        ("fixed_p=0.6", {"noise": "fixed:0.6"}),
        ("gaussian_std=0.1", {"noise": "gaussian:0.1"}),
        ("gaussian_std=0.5", {"noise": "gaussian:0.5"}),
        ("gaussian_std=1.0", {"noise": "gaussian:1.0"}),
    ],
    "consistency_fn": [("MSE", {"consistency_fn": "MSE"}), ("KL", {"consistency_fn": "KL"}),
                       ("COSINE", {"consistency_fn": "COSINE"})],
}

BASELINE = ("baseline", {"beta": 0.0, "gamma": 0.0})


@dataclass
class RunRow:
    label: str
    seed: int
    timesteps: int
    accuracy: float        # final-epoch test accuracy (%)
    best_accuracy: float   # best test accuracy over epochs (%)
    variance: float | None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def load_splits(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    root = Path(cfg.data_dir)
    size = cfg.input_size
    return (load_dataset(root / "train.txt", cfg.timesteps, size, size),
            load_dataset(root / "test.txt", cfg.timesteps, size, size))


def run_variants(base: TrainConfig, variants, seeds, splits=None, out_dir=None,
                 sink=None) -> list[RunRow]:
    """Train every ``(label, overrides)`` variant once per seed.

    ``splits`` caches loaded datasets by timestep count; ``sink`` receives
    each finished row (for streaming output).
    """
    splits = splits if splits is not None else {}
    rows = []
    for label, overrides in variants:
        for seed in seeds:
            cfg = base.replace(seed=int(seed), **overrides)
            if cfg.timesteps not in splits:
                splits[cfg.timesteps] = load_splits(cfg)
            train, test = splits[cfg.timesteps]
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / f"{label}_T{cfg.timesteps}_seed{seed}".replace("=", "")
            result = fit(train, test, cfg, run_dir=run_dir)
            row = RunRow(label, int(seed), cfg.timesteps, result.final["test_acc"],
                         result.best_accuracy, result.final["test_variance"])
            log.info("%s seed %d: %.2f%%", label, seed, row.accuracy)
            rows.append(row)
            if sink is not None:
                sink(row)
    return rows


def summarize(rows: list[RunRow]) -> dict[str, dict]:
    """Mean metrics per label, in first-seen label order."""
    out: dict[str, dict] = {}
    for label in dict.fromkeys(r.label for r in rows):
        sel = [r for r in rows if r.label == label]
        var = [r.variance for r in sel if r.variance is not None]
        out[label] = {
            "runs": len(sel),
            "seeds": [r.seed for r in sel],
            "accuracy": float(np.mean([r.accuracy for r in sel])),
            "best_accuracy": float(np.mean([r.best_accuracy for r in sel])),
            "variance": float(np.mean(var)) if var else None,
        }
    return out


def ablation(base: TrainConfig, axis: str, seeds, with_baseline: bool = False, **kw) -> list[RunRow]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    variants = ([BASELINE] if with_baseline else []) + AXES[axis]
    return run_variants(base, variants, seeds, **kw)


def sweep_timesteps(base: TrainConfig, steps_list, seeds, **kw) -> list[dict]:
    """Baseline and full method trained independently at each T; paired rows."""
    for steps in steps_list:
        if steps < 2:
            raise ValueError(f"sweep needs T >= 2, got {steps}")
    rows = []
    for steps in steps_list:
        cfg = base.replace(timesteps=int(steps))
        runs = run_variants(cfg, [BASELINE, ("method", {})], seeds, **kw)
        summary = summarize(runs)
        rows.append({
            "T": int(steps),
            "seeds": list(seeds),
            "baseline": summary["baseline"]["accuracy"],
            "method": summary["method"]["accuracy"],
            "delta": summary["method"]["accuracy"] - summary["baseline"]["accuracy"],
        })
    return rows


def format_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    if v is None:
        return "-"
    return str(v)


def write_jsonl(path, records) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
