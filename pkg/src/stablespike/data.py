"""Event streams: binning into frames, file I/O and a synthetic moving-bar dataset."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASSES = ("left", "right", "up", "down")

EVENT_MAGIC = b"SSEV"
EVENT_VERSION = 1
# t_us, x, y, polarity; packed, little-endian, 9 bytes per record
EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
_HEADER = struct.Struct("<4sHHHHI")  # magic, version, height, width, label, count


class EmptyStreamError(ValueError):
    """Raised when binning a stream with no events."""


@dataclass
class EventStream:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    height: int
    width: int
    label: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ValueError("event fields have different lengths")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("timestamps must be nondecreasing")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError(f"x outside [0, {self.width})")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError(f"y outside [0, {self.height})")
            if not np.all((self.p == 0) | (self.p == 1)):
                raise ValueError("polarity must be 0 or 1")

    def __len__(self) -> int:
        return int(self.t.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.height, self.width, self.label) == (other.height, other.width, other.label) \
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in "txyp")


def bin_events(stream: EventStream, steps: int, height: int, width: int) -> np.ndarray:
    """Integrate events into ``[T, 2, H, W]`` per-polarity count frames.

    The span ``[t_min, t_max]`` is cut into ``steps`` equal windows; an event
    exactly at ``t_max`` belongs to the last one.
    """
    if steps < 1:
        raise ValueError(f"need T >= 1, got {steps}")
    if len(stream) == 0:
        raise EmptyStreamError("cannot bin an empty event stream")
    t0, t1 = stream.t[0], stream.t[-1]
    span = t1 - t0
    if span == 0:
        win = np.zeros(len(stream), dtype=np.int64)
    else:
        win = np.minimum((stream.t - t0) * steps // span, steps - 1)
    row = stream.y * height // stream.height
    col = stream.x * width // stream.width
    frames = np.zeros((steps, 2, height, width), dtype=np.float64)
    np.add.at(frames, (win, stream.p, row, col), 1.0)
    return frames


def encode_static(image, steps: int) -> np.ndarray:
    """Replicate an ``H x W x C`` image as constant current ``[T, C, H, W]``."""
    if steps < 1:
        raise ValueError(f"need T >= 1, got {steps}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    chw = np.transpose(img, (2, 0, 1))
    return np.repeat(chw[None], steps, axis=0)


# ---------------------------------------------------------------------------
# synthetic moving bars


@dataclass(frozen=True)
class SynthParams:
    size: int = 24
    duration_us: int = 100_000
    ticks: int = 40                 # bar position updates over the duration
    bar_width: int = 3
    bar_length: tuple[int, int] = (3, 8)    # inclusive range, random per stream
    speed: tuple[float, float] = (0.5, 1.0)  # fraction of the frame crossed per stream
    edge_prob: float = 0.15         # chance an edge pixel fires at a tick
    noise_rate: float = 0.05        # background events as a fraction of signal events


@dataclass(frozen=True)
class BarPath:
    lo: int                 # first pixel along the bar
    hi: int                 # one past the last pixel along the bar
    lead: np.ndarray        # leading-edge coordinate per tick
    trail: np.ndarray       # trailing-edge coordinate per tick
    horizontal: bool        # True when the bar moves along x


def _draw_path(rng: np.random.Generator, cls: int, params: SynthParams) -> BarPath:
    size, bw = params.size, params.bar_width
    length = min(int(rng.integers(params.bar_length[0], params.bar_length[1] + 1)), size)
    lo = int(rng.integers(0, size - length + 1))
    travel = rng.uniform(*params.speed) * size
    start = rng.uniform(0, max(size - travel, 0.0)) - bw / 2
    frac = np.arange(params.ticks) / max(params.ticks - 1, 1)
    offset = start + frac * travel
    forward = cls in (1, 3)  # right / down move toward larger coordinates
    back = np.floor(offset if forward else size - bw - offset).astype(np.int64)
    front = back + bw - 1
    lead, trail = (front, back) if forward else (back, front)
    return BarPath(lo, lo + length, lead, trail, cls in (0, 1))


def bar_path(cls: int, seed: int, params: SynthParams | None = None) -> BarPath:
    """The bar geometry ``synth_generate`` uses for ``(cls, seed)``."""
    params = params or SynthParams()
    return _draw_path(np.random.default_rng([int(seed), int(cls)]), cls, params)


def synth_generate(cls: int, seed: int, params: SynthParams | None = None) -> EventStream:
    """One moving-bar stream for class ``cls`` (0 left, 1 right, 2 up, 3 down).

    A bar ``bar_width`` pixels thick and a random length moves across the
    sensor; its leading edge emits ON events and its trailing edge OFF events,
    each edge pixel firing with ``edge_prob`` per tick.  Uniform background
    events are added at ``noise_rate`` times the signal count.
    """
    if cls not in range(len(CLASSES)):
        raise ValueError(f"class must be in 0..{len(CLASSES) - 1}, got {cls}")
    params = params or SynthParams()
    rng = np.random.default_rng([int(seed), int(cls)])
    path = _draw_path(rng, cls, params)
    size = params.size
    along = np.arange(path.lo, path.hi)
    dt = params.duration_us // params.ticks
    ts, xs, ys, ps = [], [], [], []
    for k in range(params.ticks):
        for coord, pol in ((path.lead[k], 1), (path.trail[k], 0)):
            if not 0 <= coord < size:
                continue
            fire = along[rng.random(along.size) < params.edge_prob]
            if not fire.size:
                continue
            across = np.full(fire.size, coord)
            ts.append(k * dt + rng.integers(0, dt, size=fire.size))
            xs.append(across if path.horizontal else fire)
            ys.append(fire if path.horizontal else across)
            ps.append(np.full(fire.size, pol))
    empty = np.zeros(0, dtype=np.int64)
    t = np.concatenate(ts) if ts else empty
    x = np.concatenate(xs) if xs else empty
    y = np.concatenate(ys) if ys else empty
    p = np.concatenate(ps) if ps else empty
    n_noise = int(round(params.noise_rate * t.size))
    if n_noise:
        t = np.concatenate([t, rng.integers(0, params.ticks * dt, size=n_noise)])
        x = np.concatenate([x, rng.integers(0, size, size=n_noise)])
        y = np.concatenate([y, rng.integers(0, size, size=n_noise)])
        p = np.concatenate([p, rng.integers(0, 2, size=n_noise)])
    order = np.argsort(t, kind="stable")
    return EventStream(t[order], x[order], y[order], p[order], size, size, cls)


# ---------------------------------------------------------------------------
# files


def write_events(path, stream: EventStream) -> None:
    rec = np.empty(len(stream), dtype=EVENT_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(EVENT_MAGIC, EVENT_VERSION, stream.height, stream.width,
                              stream.label, len(stream)))
        fh.write(rec.tobytes())


def read_events(path) -> EventStream:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated event file")
    magic, version, height, width, label, count = _HEADER.unpack_from(raw)
    if magic != EVENT_MAGIC:
        raise ValueError(f"{path}: not an event file (bad magic)")
    if version != EVENT_VERSION:
        raise ValueError(f"{path}: unsupported event file version {version}")
    expected = _HEADER.size + count * EVENT_DTYPE.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=EVENT_DTYPE, count=count, offset=_HEADER.size)
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], height, width, label)


def read_events_csv(path, height: int, width: int, label: int = 0) -> EventStream:
    """Import ``t,x,y,p`` lines; a non-numeric first line is taken as a header."""
    rows = []
    with Path(path).open() as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if i == 0 and not parts[0].strip().lstrip("-").isdigit():
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{i + 1}: expected 't,x,y,p', got {line!r}")
            rows.append([int(v) for v in parts])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], height, width, label)


@dataclass
class Dataset:
    frames: np.ndarray   # [N, T, 2, H, W]
    labels: np.ndarray   # [N]
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.size)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.frames[idx], self.labels[idx], [self.paths[i] for i in idx] if self.paths else [])


def generate_dataset(outdir, seed: int = 0, n_train: int = 400, n_test: int = 100,
                     params: SynthParams | None = None) -> tuple[Path, Path]:
    """Write balanced train/test event files plus ``train.txt``/``test.txt`` manifests."""
    outdir = Path(outdir)
    params = params or SynthParams()
    root = np.random.SeedSequence(int(seed))
    train_seq, test_seq = root.spawn(2)
    manifests = []
    for split, n, seq in (("train", n_train, train_seq), ("test", n_test, test_seq)):
        (outdir / split).mkdir(parents=True, exist_ok=True)
        stream_seeds = seq.generate_state(max(n, 1), dtype=np.uint32)
        lines = []
        for i in range(n):
            cls = i % len(CLASSES)
            stream = synth_generate(cls, int(stream_seeds[i]), params)
            rel = f"{split}/{i:05d}_{CLASSES[cls]}.ev"
            write_events(outdir / rel, stream)
            lines.append(f"{rel} {cls}\n")
        manifest = outdir / f"{split}.txt"
        manifest.write_text("".join(lines))
        manifests.append(manifest)
    return manifests[0], manifests[1]


def read_manifest(path) -> list[tuple[Path, int]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rel, _, label = line.rpartition(" ")
        if not rel:
            raise ValueError(f"{path}:{n}: expected '<file> <label>'")
        out.append((path.parent / rel, int(label)))
    return out


def load_dataset(manifest, steps: int, height: int = 24, width: int = 24) -> Dataset:
    entries = read_manifest(manifest)
    frames = np.zeros((len(entries), steps, 2, height, width))
    labels = np.zeros(len(entries), dtype=np.int64)
    for i, (file, label) in enumerate(entries):
        try:
            stream = read_events(file)
        except OSError as exc:
            raise OSError(f"cannot read event file {file} listed in {manifest}: {exc}") from exc
        frames[i] = bin_events(stream, steps, height, width)
        labels[i] = label
    return Dataset(frames, labels, [str(f) for f, _ in entries])
