"""Checkpoint inspection: metrics report and spike-map image dumps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset
from .model import SnnModel, forward
from .skeleton import bit_combine_bits
from .trainer import evaluate, firing_and_energy, to_input


def write_pgm(path, image: np.ndarray) -> None:
    """Plain (ASCII) 8-bit PGM; ``image`` values in [0, 1]."""
    img = np.atleast_2d(np.asarray(image, dtype=np.float64))
    pix = np.clip(np.round(img * 255), 0, 255).astype(int)
    h, w = pix.shape
    body = "\n".join(" ".join(str(v) for v in row) for row in pix)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{body}\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=int).reshape(h, w) / maxval


def _channel_mean(spikes: np.ndarray) -> np.ndarray:
    # [C, H, W] -> [H, W]; a flat feature vector becomes a one-row image
    return spikes.mean(axis=0) if spikes.ndim == 3 else spikes[None, :]


def dump_spike_maps(model: SnnModel, dataset: Dataset, out_dir, samples: int = 4) -> list[Path]:
    """Per-timestep channel-averaged backbone maps and their AND skeletons."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = min(samples, len(dataset))
    rec = forward(model, to_input(dataset.frames[:n]))
    spikes = rec.spikes.data
    skeleton = bit_combine_bits(spikes, "AND") if spikes.shape[0] >= 2 else None
    written = []
    for i in range(n):
        for t in range(spikes.shape[0]):
            path = out_dir / f"sample{i:03d}_t{t}.pgm"
            write_pgm(path, _channel_mean(spikes[t, i]))
            written.append(path)
        if skeleton is not None:
            for t in range(skeleton.shape[0]):
                path = out_dir / f"sample{i:03d}_skeleton{t}.pgm"
                write_pgm(path, _channel_mean(skeleton[t, i].astype(np.float64)))
                written.append(path)
    return written


def inspect_report(model: SnnModel, dataset: Dataset, e_ac: float = 0.9, e_mac: float = 4.6) -> dict:
    ev = evaluate(model, dataset)
    fe = firing_and_energy(model, dataset, e_ac, e_mac)
    return {
        "arch": model.arch,
        "samples": len(dataset),
        "timesteps": int(dataset.frames.shape[1]),
        "accuracy": ev.accuracy,
        "timestep_variance": ev.variance,
        "firing_rates": fe.rates,
        "synops": fe.synops,
        "first_layer_macs": fe.mac_ops,
        "energy_pj": fe.energy_pj,
    }
