"""Desk-scale spiking architectures with a backbone/classifier split.

Activations inside the backbone are kept time-flattened (``[T*B, ...]``) so
convolutions and linear maps run over every timestep in one call; LIF layers
unflatten to ``[T, B, ...]`` to carry membrane state across time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, ShapeError, Tensor
from .neuron import LifParams, lif_sequence

ARCHITECTURES = ("MLP_SNN", "CONV_SNN_MINI")

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


@dataclass
class Layer:
    kind: str  # linear | conv | pool | lif | flatten
    name: str = ""
    stage_end: bool = False


@dataclass
class SnnModel:
    arch: str
    input_shape: tuple[int, ...]
    classes: int
    seed: int
    layers: list[Layer]
    params: dict[str, Tensor]
    hidden: tuple[int, ...] = ()
    lif: LifParams = field(default_factory=LifParams)
    init_gain: float = 1.0

    @property
    def stage_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "lif")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"parameter {k}: stored {arrays[k].shape} vs model {t.shape}")
            t.data = np.array(arrays[k], dtype=DTYPE)


@dataclass
class ForwardRecord:
    spikes: Tensor           # final backbone spikes, [T, B, ...]
    step_logits: Tensor      # [T, B, K]
    logits: Tensor           # mean over T, [B, K]
    stage_spikes: list[Tensor] | None = None

    @property
    def timesteps(self) -> int:
        return self.spikes.shape[0]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias(rng: np.random.Generator, n: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n)


def build_architecture(name: str, input_shape, classes: int, seed: int = 0,
                       hidden: tuple[int, ...] | None = None,
                       lif: LifParams | None = None, init_gain: float = 1.0) -> SnnModel:
    """Build ``MLP_SNN`` or ``CONV_SNN_MINI`` with seeded fan-in initialization.

    ``hidden`` overrides layer widths: two linear widths for the MLP
    (default 128, 64), three channel counts for the conv net (16, 32, 32).
    ``init_gain`` scales the backbone weight bounds; without normalization
    layers, sparse spike inputs need a gain above 1 to keep deep layers firing.
    """
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    input_shape = tuple(int(v) for v in input_shape)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    layers: list[Layer] = []

    def linear(pname: str, fan_in: int, out: int):
        params[f"{pname}.weight"] = Tensor(_kaiming_uniform(rng, (fan_in, out), fan_in, init_gain), True)
        params[f"{pname}.bias"] = Tensor(_bias(rng, out, fan_in), True)
        layers.append(Layer("linear", pname))

    if name == "MLP_SNN":
        widths = tuple(hidden) if hidden else (128, 64)
        fan_in = int(np.prod(input_shape))
        layers.append(Layer("flatten"))
        for i, width in enumerate(widths):
            linear(f"fc{i + 1}", fan_in, width)
            layers.append(Layer("lif", f"lif{i + 1}", stage_end=True))
            fan_in = width
        feat = fan_in
    else:
        if len(input_shape) != 3:
            raise ShapeError(f"CONV_SNN_MINI needs [C,H,W] input, got {input_shape}")
        widths = tuple(hidden) if hidden else (16, 32, 32)
        c, h, w = input_shape
        if h < 4 or w < 4:
            raise ShapeError(f"CONV_SNN_MINI needs spatial extent >= 4, got {h}x{w}")
        for i, width in enumerate(widths):
            fan_in = c * 9
            params[f"conv{i + 1}.weight"] = Tensor(
                _kaiming_uniform(rng, (width, c, 3, 3), fan_in, init_gain), True)
            params[f"conv{i + 1}.bias"] = Tensor(_bias(rng, width, fan_in), True)
            layers.append(Layer("conv", f"conv{i + 1}"))
            layers.append(Layer("lif", f"lif{i + 1}", stage_end=True))
            if i < len(widths) - 1:
                layers.append(Layer("pool"))
            c = width
        feat = c
    params["classifier.weight"] = Tensor(_kaiming_uniform(rng, (feat, classes), feat), True)
    params["classifier.bias"] = Tensor(_bias(rng, classes, feat), True)
    return SnnModel(name, input_shape, int(classes), int(seed), layers, params,
                    tuple(widths), lif or LifParams(), float(init_gain))


def _to_time_major(t: Tensor, steps: int) -> Tensor:
    return ag.reshape(t, (steps, t.shape[0] // steps) + t.shape[1:])


def _flatten_time(t: Tensor) -> Tensor:
    return ag.reshape(t, (t.shape[0] * t.shape[1],) + t.shape[2:])


def forward(model: SnnModel, x, dense: bool = False) -> ForwardRecord:
    """Run the backbone over all timesteps, classify each step, average logits.

    ``x`` is input current shaped ``[T, B, *input_shape]``.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))
    if x.data.ndim < 3 or tuple(x.shape[2:]) != model.input_shape:
        raise ShapeError(
            f"input {x.shape} incompatible with {model.arch} expecting [T, B, {model.input_shape}]")
    steps, batch = x.shape[0], x.shape[1]
    h = _flatten_time(x)
    stages: list[Tensor] = []
    spikes = None
    for layer in model.layers:
        if layer.kind == "flatten":
            h = ag.reshape(h, (h.shape[0], -1))
        elif layer.kind == "linear":
            h = ag.add_bias(ag.matmul(h, model.params[f"{layer.name}.weight"]),
                            model.params[f"{layer.name}.bias"])
        elif layer.kind == "conv":
            h = ag.add_bias(ag.conv2d(h, model.params[f"{layer.name}.weight"], padding=1),
                            model.params[f"{layer.name}.bias"])
        elif layer.kind == "pool":
            h = ag.avg_pool2(h)
        elif layer.kind == "lif":
            spikes = lif_sequence(_to_time_major(h, steps), model.lif)
            if dense:
                stages.append(spikes)
            h = _flatten_time(spikes)
    step_logits = _classify(model, h)
    step_logits = _to_time_major(step_logits, steps)
    logits = ag.mean(step_logits, axis=0)
    assert spikes is not None and logits.shape == (batch, model.classes)
    return ForwardRecord(spikes, step_logits, logits, stages if dense else None)


def _classify(model: SnnModel, features: Tensor) -> Tensor:
    pooled = ag.global_avg_pool(features)
    return ag.add_bias(ag.matmul(pooled, model.params["classifier.weight"]),
                       model.params["classifier.bias"])


def backbone_output_shape(model: SnnModel) -> tuple[int, ...]:
    if model.arch == "MLP_SNN":
        return (model.hidden[-1],)
    _, h, w = model.input_shape
    for _ in range(len(model.hidden) - 1):
        h, w = h // 2, w // 2
    return (model.hidden[-1], h, w)


def classifier_forward(model: SnnModel, rate: Tensor) -> Tensor:
    """Time-free classifier pass over a rate-like map ``[B, *backbone_shape]``."""
    expected = backbone_output_shape(model)
    if tuple(rate.shape[1:]) != expected:
        raise ShapeError(f"classifier input {rate.shape} vs backbone output [B, {expected}]")
    return _classify(model, rate)


def dense_stage_maps(record: ForwardRecord) -> list[Tensor]:
    if record.stage_spikes is None:
        raise ValueError("forward was run without dense stage hooks")
    return record.stage_spikes


def parameter_count(arch: str, input_shape, classes: int, hidden=None) -> int:
    """Closed-form parameter count, independent of any built model."""
    if arch == "MLP_SNN":
        widths = list(hidden or (128, 64))
        dims = [int(np.prod(input_shape))] + widths + [classes]
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    widths = list(hidden or (16, 32, 32))
    chans = [input_shape[0]] + widths
    conv = sum(o * i * 9 + o for i, o in zip(chans[:-1], chans[1:]))
    return conv + widths[-1] * classes + classes


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (little-endian):
#   4 bytes   magic "SSCK"
#   u32       container version
#   u32       header length in bytes
#   header    UTF-8 JSON: arch, seed, input_shape, classes, hidden, init_gain, lif,
#             tensors=[{"name", "shape"}...], meta
#   payload   float64 arrays in the header's tensor order, C order


def save_checkpoint(path, model: SnnModel, optimizer_state: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    arrays = [(f"param/{k}", t.data) for k, t in model.params.items()]
    for k, v in (optimizer_state or {}).items():
        arrays.append((f"optim/{k}", np.asarray(v, dtype=DTYPE)))
    header = {
        "arch": model.arch,
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "classes": model.classes,
        "hidden": list(model.hidden),
        "init_gain": model.init_gain,
        "lif": {"tau": model.lif.tau, "theta": model.lif.theta,
                "surrogate_width": model.lif.surrogate_width,
                "detach_reset": model.lif.detach_reset},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, optimizer_state, meta)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
    model = build_architecture(header["arch"], header["input_shape"], header["classes"],
                               seed=header["seed"], hidden=tuple(header["hidden"]),
                               lif=LifParams(**header["lif"]), init_gain=header["init_gain"])
    model.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    optim = {k[len("optim/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim/")}
    return model, optim, header["meta"]
