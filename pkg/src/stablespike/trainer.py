"""Training loop with spike-map and perturbation consistency, plus run metrics.

RNG streams are spawned from the global seed in a fixed order:

    0  model initialization
    1  minibatch shuffling
    2  spike / gaussian noise draws

so changing one consumer never shifts another's sequence.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset
from .model import (ForwardRecord, SnnModel, build_architecture, classifier_forward, forward,
                    save_checkpoint)
from .neuron import LifParams
from .noise import NoiseKind, NoiseSpec, perturb, perturbation_loss, sample_noise
from .skeleton import BitOp, ConsistencyFn, bit_combine, firing_rate, spike_consistency_loss, \
    stable_firing_rate

log = logging.getLogger(__name__)

STREAM_INIT, STREAM_SHUFFLE, STREAM_NOISE = 0, 1, 2


@dataclass
class TrainConfig:
    arch: str = "CONV_SNN_MINI"
    hidden: tuple[int, ...] = ()
    timesteps: int = 4
    input_size: int = 24
    classes: int = 4
    beta: float = 1.0
    gamma: float = 1.0
    alpha: float = 2.0
    consistency_fn: str = "MSE"
    noise: str = "aware"
    bitop: str = "AND"
    dense: bool = False
    detach_anchor: bool = True
    detach_clean: bool = True
    detach_noise_rate: bool = False
    tau: float = 2.0
    theta: float = 1.0
    surrogate_width: float = 1.0
    detach_reset: bool = False
    init_gain: float = 3.0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    e_ac: float = 0.9
    e_mac: float = 4.6
    data_dir: str = "data"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if (self.beta > 0 or self.gamma > 0) and self.timesteps < 2:
            raise ValueError("consistency losses need timesteps >= 2")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        ConsistencyFn(self.consistency_fn)
        BitOp(self.bitop)
        NoiseSpec.parse(self.noise)

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec.parse(self.noise)

    @property
    def lif(self) -> LifParams:
        return LifParams(self.tau, self.theta, self.surrogate_width, self.detach_reset)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def seed_streams(seed: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(int(seed)).spawn(3)


def make_model(cfg: TrainConfig) -> SnnModel:
    init_seed = int(seed_streams(cfg.seed)[STREAM_INIT].generate_state(1)[0])
    shape = (2, cfg.input_size, cfg.input_size)
    return build_architecture(cfg.arch, shape, cfg.classes, seed=init_seed,
                              hidden=cfg.hidden or None, lif=cfg.lif, init_gain=cfg.init_gain)


def to_input(frames: np.ndarray) -> np.ndarray:
    """``[B, T, ...]`` dataset frames to time-major model input ``[T, B, ...]``."""
    return np.ascontiguousarray(np.swapaxes(frames, 0, 1))


# ---------------------------------------------------------------------------
# loss and optimization


@dataclass
class StepLosses:
    ce: float
    spike: float
    noise: float
    total: float
    correct: int = 0    # batch samples classified correctly by the training forward

    def as_dict(self) -> dict:
        return {"ce": self.ce, "spike": self.spike, "noise": self.noise, "total": self.total}


def assemble_loss(model: SnnModel, x: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                  rng: np.random.Generator | None):
    """Forward pass and the weighted total loss.  Returns ``(total, parts, record)``."""
    record = forward(model, x, dense=cfg.dense and cfg.beta > 0)
    ce = ag.cross_entropy(record.logits, labels)
    total = ce
    spike_t = noise_t = None
    if cfg.beta > 0 or cfg.gamma > 0:
        skeleton_rate = stable_firing_rate(bit_combine(record.spikes, cfg.bitop))
    if cfg.beta > 0:
        maps = record.stage_spikes if cfg.dense else [record.spikes]
        terms = []
        for s in maps:
            anchor = skeleton_rate if s is record.spikes else stable_firing_rate(
                bit_combine(s, cfg.bitop))
            terms.append(spike_consistency_loss(anchor, firing_rate(s), cfg.consistency_fn,
                                                detach_anchor=cfg.detach_anchor))
        spike_t = terms[0]
        for extra in terms[1:]:
            spike_t = ag.add(spike_t, extra)
        if len(terms) > 1:
            spike_t = ag.scale(spike_t, 1.0 / len(terms))
        total = ag.add(total, ag.scale(spike_t, cfg.beta))
    if cfg.gamma > 0:
        if rng is None:
            raise ValueError("noise branch needs an rng")
        base = ag.detach(skeleton_rate) if cfg.detach_noise_rate else skeleton_rate
        eps = sample_noise(base, cfg.noise_spec, rng)
        noisy_logits = classifier_forward(model, perturb(base, eps))
        noise_t = perturbation_loss(record.logits, noisy_logits, cfg.alpha,
                                    detach_clean=cfg.detach_clean)
        total = ag.add(total, ag.scale(noise_t, cfg.gamma))
    parts = {"ce": ce, "spike": spike_t, "noise": noise_t}
    return total, parts, record


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        for k, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            t.data = t.data - self.lr * v

    def state(self) -> dict[str, np.ndarray]:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            key = f"velocity/{k}"
            if key in state:
                self.velocity[k] = np.array(state[key])


def train_step(model: SnnModel, frames: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               optimizer: SGD, rng: np.random.Generator | None) -> StepLosses:
    """One optimization step on a ``[B, T, ...]`` batch."""
    model.zero_grad()
    total, parts, record = assemble_loss(model, to_input(frames), labels, cfg, rng)
    values = {k: (float(v.data) if v is not None else 0.0) for k, v in parts.items()}
    values["total"] = float(total.data)
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite loss component(s) {bad}: {values}")
    ag.backward(total)
    optimizer.step()
    correct = int((record.logits.data.argmax(axis=1) == labels).sum())
    return StepLosses(**values, correct=correct)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# evaluation and metrics


def timestep_variance(record_or_spikes) -> float:
    """Mean normalized Hamming distance between adjacent spike maps."""
    s = record_or_spikes.spikes if isinstance(record_or_spikes, ForwardRecord) else record_or_spikes
    s = s.data if isinstance(s, Tensor) else np.asarray(s)
    if s.shape[0] < 2:
        raise ValueError("timestep variance needs T >= 2")
    return float(np.abs(s[1:] - s[:-1]).mean())


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


@dataclass
class EvalResult:
    accuracy: float
    variance: float | None
    predictions: np.ndarray
    logits: np.ndarray


def evaluate(model: SnnModel, dataset: Dataset, batch_size: int = 64) -> EvalResult:
    """Plain forward (no consistency branches, no noise); argmax of averaged logits."""
    preds, logits, var_sum = [], [], 0.0
    steps = dataset.frames.shape[1]
    for sl in _batches(len(dataset), batch_size):
        rec = forward(model, to_input(dataset.frames[sl]))
        logits.append(rec.logits.data)
        preds.append(rec.logits.data.argmax(axis=1))
        if steps >= 2:
            var_sum += timestep_variance(rec) * (sl.stop - sl.start)
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    acc = float((preds == dataset.labels).mean() * 100.0) if len(dataset) else 0.0
    variance = var_sum / len(dataset) if steps >= 2 and len(dataset) else None
    return EvalResult(acc, variance, preds, np.concatenate(logits) if logits else np.zeros(0))


def _conv_fanout(h: int, w: int, out_ch: int, k: int = 3, pad: int = 1) -> np.ndarray:
    """Outputs touched by each input position of a stride-1 padded conv."""
    def span(n):
        idx = np.arange(n)
        lo = np.maximum(idx + pad - (k - 1), 0)
        hi = np.minimum(idx + pad, n + 2 * pad - k)
        return hi - lo + 1
    return out_ch * np.outer(span(h), span(w)).astype(np.float64)


def synapse_maps(model: SnnModel) -> list[np.ndarray]:
    """Per-LIF-layer fan-out of one spike at each position (broadcast over channels)."""
    maps = []
    lif_idx = [i for i, layer in enumerate(model.layers) if layer.kind == "lif"]
    for n, li in enumerate(lif_idx):
        following = model.layers[li + 1:]
        pooled = bool(following) and following[0].kind == "pool"
        consumer = next((layer for layer in following if layer.kind in ("conv", "linear")), None)
        if consumer is None:
            maps.append(np.asarray(float(model.classes)))
            continue
        weight = model.params[f"{consumer.name}.weight"].data
        if consumer.kind == "linear":
            maps.append(np.asarray(float(weight.shape[1])))
            continue
        out_ch = weight.shape[0]
        conv_h, conv_w = _conv_in_shape(model, consumer.name)
        fan = _conv_fanout(conv_h, conv_w, out_ch)
        if pooled:
            # a spike feeds one pooled cell, which fans out like a conv input
            full = np.zeros((conv_h * 2 + 1, conv_w * 2 + 1))
            full[:conv_h * 2, :conv_w * 2] = np.repeat(np.repeat(fan, 2, 0), 2, 1)
            src_h, src_w = _lif_shape(model, n)
            fan = full[:src_h, :src_w]
        maps.append(fan)
    return maps


def _lif_shape(model: SnnModel, n: int) -> tuple[int, int]:
    _, h, w = model.input_shape
    for _ in range(n):
        h, w = h // 2, w // 2
    return h, w


def _conv_in_shape(model: SnnModel, name: str) -> tuple[int, int]:
    idx = int(name[len("conv"):]) - 1
    return _lif_shape(model, idx)


def first_layer_macs(model: SnnModel) -> float:
    """Multiply-accumulates of the first layer for one sample at one timestep."""
    first = next(layer for layer in model.layers if layer.kind in ("conv", "linear"))
    weight = model.params[f"{first.name}.weight"].data
    if first.kind == "linear":
        return float(weight.size)
    in_ch = model.input_shape[0]
    _, h, w = model.input_shape
    return float(in_ch * _conv_fanout(h, w, weight.shape[0]).sum())


@dataclass
class FiringReport:
    rates: list[float]          # percent, one per LIF layer
    synops: list[float]         # per sample, one per LIF layer
    mac_ops: float              # first-layer MACs per sample
    energy_pj: float            # per sample
    samples: int
    timesteps: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def firing_and_energy(model: SnnModel, dataset: Dataset, e_ac: float = 0.9, e_mac: float = 4.6,
                      batch_size: int = 64) -> FiringReport:
    steps = dataset.frames.shape[1]
    fan = synapse_maps(model)
    counts = np.zeros(len(fan))
    neurons = np.zeros(len(fan))
    synops = np.zeros(len(fan))
    for sl in _batches(len(dataset), batch_size):
        rec = forward(model, to_input(dataset.frames[sl]), dense=True)
        for i, s in enumerate(rec.stage_spikes):
            d = s.data
            counts[i] += d.sum()
            neurons[i] = d[0, 0].size
            synops[i] += (d * fan[i]).sum() if fan[i].ndim else d.sum() * float(fan[i])
    n = max(len(dataset), 1)
    rates = [float(c / (neurons[i] * steps * n) * 100.0) for i, c in enumerate(counts)]
    macs = first_layer_macs(model) * steps
    per_sample = synops / n
    energy = float(per_sample.sum() * e_ac + macs * e_mac)
    return FiringReport(rates, [float(v) for v in per_sample], macs, energy, len(dataset), steps)


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    model: SnnModel
    history: list[dict] = field(default_factory=list)
    best_accuracy: float = 0.0
    best_epoch: int = -1
    best_state: dict[str, np.ndarray] | None = None
    final: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {"history": self.history, "best_accuracy": self.best_accuracy,
                "best_epoch": self.best_epoch, "final": self.final}


def fit(train: Dataset, test: Dataset, cfg: TrainConfig, run_dir=None,
        model: SnnModel | None = None) -> FitResult:
    """Train for ``cfg.epochs`` epochs; keep the best-test-accuracy weights.

    With ``run_dir`` set, writes ``config.json``, ``metrics.jsonl`` (one line
    per epoch), ``report.json``, ``best.ckpt`` and ``last.ckpt``.
    """
    streams = seed_streams(cfg.seed)
    model = model or make_model(cfg)
    shuffle_rng = np.random.default_rng(streams[STREAM_SHUFFLE])
    noise_rng = np.random.default_rng(streams[STREAM_NOISE]) if cfg.gamma > 0 else None
    opt = SGD(model.params, cfg.lr, cfg.momentum, cfg.weight_decay)
    result = FitResult(model)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics_fh = (run_dir / "metrics.jsonl").open("w")
    try:
        for epoch in range(cfg.epochs):
            opt.lr = lr_at(cfg, epoch)
            order = shuffle_rng.permutation(len(train))
            sums = {"ce": 0.0, "spike": 0.0, "noise": 0.0, "total": 0.0}
            seen = correct = 0
            for sl in _batches(len(train), cfg.batch_size):
                idx = order[sl]
                losses = train_step(model, train.frames[idx], train.labels[idx], cfg, opt, noise_rng)
                for k, v in losses.as_dict().items():
                    sums[k] += v * idx.size
                seen += idx.size
                correct += losses.correct
            ev = evaluate(model, test)
            row = {"epoch": epoch, "lr": opt.lr,
                   **{f"loss_{k}": v / max(seen, 1) for k, v in sums.items()},
                   "train_acc": 100.0 * correct / max(seen, 1),
                   "test_acc": ev.accuracy, "test_variance": ev.variance}
            result.history.append(row)
            if run_dir is not None:
                metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_fh.flush()
            log.info("epoch %d lr %.4g loss %.4f test %.2f%%", epoch, opt.lr,
                     row["loss_total"], ev.accuracy)
            if ev.accuracy > result.best_accuracy or result.best_state is None:
                result.best_accuracy = ev.accuracy
                result.best_epoch = epoch
                result.best_state = model.state_arrays()
                if run_dir is not None:
                    save_checkpoint(run_dir / "best.ckpt", model, opt.state(),
                                    meta={"epoch": epoch, "config": cfg.to_dict()})
    finally:
        if run_dir is not None:
            metrics_fh.close()
    final = evaluate(model, test)
    energy = firing_and_energy(model, test, cfg.e_ac, cfg.e_mac)
    result.final = {"test_acc": final.accuracy, "test_variance": final.variance,
                    "firing": energy.as_dict()}
    if cfg.epochs == 0:
        result.best_accuracy = final.accuracy
        result.best_state = model.state_arrays()
    if run_dir is not None:
        save_checkpoint(run_dir / "last.ckpt", model, opt.state(),
                        meta={"epoch": cfg.epochs - 1, "config": cfg.to_dict()})
        if cfg.epochs == 0:
            save_checkpoint(run_dir / "best.ckpt", model, opt.state(),
                            meta={"epoch": -1, "config": cfg.to_dict()})
        (run_dir / "report.json").write_text(json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    return result
