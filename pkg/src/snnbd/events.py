"""Event streams and their frame tensors, plus a synthetic moving-square
corpus stored in the NMF1 format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

OFF, ON = 0, 1
P = 2

NMF_MAGIC = b"NMF1"
DIRECTIONS = ("right", "left", "down", "up")


class InvalidStreamError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class EventStream:
    """Raw DVS events. ``events`` is an (N, 4) integer array of (t_us, x, y, ch)."""

    events: np.ndarray
    height: int
    width: int
    duration: int

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64).reshape(-1, 4)
        object.__setattr__(self, "events", ev)
        if len(ev) == 0:
            return
        t, x, y, ch = ev.T
        if np.any(np.diff(t) < 0):
            raise InvalidStreamError("timestamps must be non-decreasing")
        if t[0] < 0:
            raise InvalidStreamError("negative timestamp")
        if np.any((x < 0) | (x >= self.width)) or np.any((y < 0) | (y >= self.height)):
            raise InvalidStreamError("event coordinates outside the sensor")
        if np.any((ch != OFF) & (ch != ON)):
            raise InvalidStreamError("channel bit must be 0 (OFF) or 1 (ON)")
        if self.duration < t[-1]:
            raise InvalidStreamError(f"duration {self.duration} < last timestamp {t[-1]}")

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class FrameTensor:
    data: np.ndarray  # (T, P, H, W) float32
    normalized: bool = False

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 4 or d.shape[1] != P:
            raise PreconditionError(f"frames must be (T, 2, H, W), got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def check_valid(self) -> None:
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise PreconditionError("frames must be finite and non-negative")
        if self.normalized and np.any(self.data > 1):
            raise PreconditionError("normalized frames must lie in [0, 1]")


@dataclass(frozen=True)
class Sample:
    frames: FrameTensor
    label: int


@dataclass
class Dataset:
    """Stacked samples: ``frames`` is (n, T, P, H, W) float32, ``labels`` (n,) int64."""

    frames: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int = 0
    normalized: bool = True

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 5 or self.frames.shape[2] != P:
            raise PreconditionError(f"dataset frames must be (n, T, 2, H, W), got {self.frames.shape}")
        if len(self.frames) != len(self.labels):
            raise PreconditionError("frames/labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise PreconditionError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(FrameTensor(self.frames[i], self.normalized), int(self.labels[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.labels, other.labels)
            and self.frames.tobytes() == other.frames.tobytes()
        )

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.frames[idx], self.labels[idx], self.num_classes, self.seed, self.normalized)

    def replace(self, frames=None, labels=None) -> "Dataset":
        return Dataset(self.frames if frames is None else frames,
                       self.labels if labels is None else labels,
                       self.num_classes, self.seed, self.normalized)


# ---------------------------------------------------------------------------


def bin_events(stream: EventStream, T: int) -> FrameTensor:
    """Equal-duration binning into T frames of per-(polarity, pixel) counts."""
    if T < 1:
        raise PreconditionError("T must be >= 1")
    out = np.zeros((T, P, stream.height, stream.width), dtype=np.float32)
    if len(stream) == 0:
        return FrameTensor(out, normalized=False)
    if stream.duration <= 0:
        raise InvalidStreamError("zero duration with non-empty events")
    t, x, y, ch = stream.events.T
    f = np.minimum(t * T // stream.duration, T - 1)
    np.add.at(out, (f, ch, y, x), 1.0)
    return FrameTensor(out, normalized=False)


def normalize(frames: FrameTensor) -> FrameTensor:
    """Divide by the sample maximum (or by 1 for an all-zero sample)."""
    if np.any(frames.data < 0):
        raise PreconditionError("frames must be non-negative")
    peak = float(frames.data.max()) if frames.data.size else 0.0
    if peak == 0.0:
        peak = 1.0
    return FrameTensor(frames.data / np.float32(peak), normalized=True)


def normalize_batch(frames: np.ndarray) -> np.ndarray:
    """Per-sample max normalisation of an (n, T, P, H, W) stack."""
    peak = frames.reshape(len(frames), -1).max(axis=1)
    peak[peak == 0] = 1.0
    return (frames / peak[:, None, None, None, None]).astype(np.float32)


def polarity_grid(frames: FrameTensor, t: int, level: float = 0.5) -> np.ndarray:
    """H x W codes for frame ``t``: 1*[OFF >= level] + 2*[ON >= level]."""
    if not frames.normalized:
        raise PreconditionError("polarity_grid needs normalized frames")
    if not 0 <= t < frames.shape[0]:
        raise PreconditionError(f"frame index {t} outside [0, {frames.shape[0]})")
    if not 0 < level < 1:
        raise PreconditionError("binarize threshold must lie in (0, 1)")
    return polarity_codes(frames.data[t], level)


def polarity_codes(frames: np.ndarray, level: float = 0.5) -> np.ndarray:
    """Vectorised polarity codes for any array whose axis -3 is the channel."""
    off = frames[..., OFF, :, :] >= level
    on = frames[..., ON, :, :] >= level
    return off.astype(np.int8) + 2 * on.astype(np.int8)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    frames: int = 16
    num_classes: int = 4
    side: int = 8
    step: int = 1
    noise: float = 0.01
    n_train: int = 1000
    n_test: int = 200
    frame_us: int = 1000

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_classes > len(DIRECTIONS):
            raise ConfigError(f"num_classes must be in [1, {len(DIRECTIONS)}]")
        if self.frames < 1 or self.side < 1 or self.step < 0:
            raise ConfigError("frames, side must be >= 1 and step >= 0")
        travel = self.side + self.step * (self.frames - 1)
        if travel > min(self.height, self.width):
            raise ConfigError(
                f"square of side {self.side} travelling {self.step} px/frame for {self.frames} frames "
                f"needs {travel} px, sensor is {self.height}x{self.width}")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise rate must be in [0, 1)")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        if self.frame_us < 1:
            raise ConfigError("frame_us must be >= 1")


def square_origin(cfg: SynthConfig, direction: str, along: int, across: int, t: int) -> tuple[int, int]:
    """Top-left (row, col) of the square at frame t."""
    d = cfg.step * t
    if direction == "right":
        return across, along + d
    if direction == "left":
        return across, cfg.width - cfg.side - along - d
    if direction == "down":
        return along + d, across
    if direction == "up":
        return cfg.height - cfg.side - along - d, across
    raise ConfigError(f"unknown direction {direction!r}")


def edge_cells(cfg: SynthConfig, direction: str, along: int, across: int, t: int):
    """Pixel lists (ys, xs) of the leading (ON) and trailing (OFF) edge at frame t."""
    r, c = square_origin(cfg, direction, along, across, t)
    s = cfg.side
    span = np.arange(s)
    if direction in ("right", "left"):
        lead_c = c + s - 1 if direction == "right" else c
        trail_c = c if direction == "right" else c + s - 1
        ys = r + span
        return (ys, np.full(s, lead_c)), (ys, np.full(s, trail_c))
    lead_r = r + s - 1 if direction == "down" else r
    trail_r = r if direction == "down" else r + s - 1
    xs = c + span
    return (np.full(s, lead_r), xs), (np.full(s, trail_r), xs)


def synth_stream(cfg: SynthConfig, direction: str, along: int, across: int,
                 rng: np.random.Generator) -> EventStream:
    T, fu = cfg.frames, cfg.frame_us
    rows = []
    for t in range(T):
        (ly, lx), (ty, tx) = edge_cells(cfg, direction, along, across, t)
        occupied = np.zeros((P, cfg.height, cfg.width), dtype=bool)
        occupied[ON, ly, lx] = True
        occupied[OFF, ty, tx] = True
        if cfg.noise > 0:
            # background noise only on cells without a signal event
            noise = (rng.random(occupied.shape) < cfg.noise) & ~occupied
        else:
            noise = np.zeros_like(occupied)
        ch, y, x = np.nonzero(occupied | noise)
        ts = t * fu + rng.integers(0, fu, size=len(ch))
        rows.append(np.stack([ts, x, y, ch], axis=1))
    ev = np.concatenate(rows) if rows else np.zeros((0, 4), dtype=np.int64)
    ev = ev[np.argsort(ev[:, 0], kind="stable")]
    return EventStream(ev, cfg.height, cfg.width, T * fu)


def _make_split(cfg: SynthConfig, n: int, rng: np.random.Generator, seed: int) -> Dataset:
    frames = np.empty((n, cfg.frames, P, cfg.height, cfg.width), dtype=np.float32)
    labels = np.arange(n) % cfg.num_classes
    rng.shuffle(labels)
    travel = cfg.side + cfg.step * (cfg.frames - 1)
    for i, lab in enumerate(labels):
        direction = DIRECTIONS[lab]
        extent = cfg.width if direction in ("right", "left") else cfg.height
        cross = cfg.height if direction in ("right", "left") else cfg.width
        along = int(rng.integers(0, extent - travel + 1))
        across = int(rng.integers(0, cross - cfg.side + 1))
        stream = synth_stream(cfg, direction, along, across, rng)
        frames[i] = normalize(bin_events(stream, cfg.frames)).data
    return Dataset(frames, labels, cfg.num_classes, seed=seed, normalized=True)


def synth_dataset(cfg: SynthConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair of moving-square samples, one class per direction."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    train = _make_split(cfg, cfg.n_train, rng, seed)
    test = _make_split(cfg, cfg.n_test, np.random.default_rng([seed, 1]), seed)
    return train, test


# ---------------------------------------------------------------------------
# NMF1 I/O

_MAX_DIM = 1 << 16


def write_frames(path, dataset: Dataset) -> None:
    n, T, p, H, W = dataset.frames.shape
    header = NMF_MAGIC + struct.pack("<6I", n, dataset.num_classes, T, p, H, W)
    body = np.empty(n, dtype=[("label", "<u4"), ("data", "<f4", (T * p * H * W,))])
    body["label"] = dataset.labels
    body["data"] = dataset.frames.reshape(n, -1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body.tobytes())
    tmp.replace(path)


def read_frames(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != NMF_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    if len(buf) < 28:
        raise FormatError(f"{path}: truncated header at byte {len(buf)} (need 28)")
    n, k, T, p, H, W = struct.unpack_from("<6I", buf, 4)
    for name, val, off in (("T", T, 12), ("P", p, 16), ("H", H, 20), ("W", W, 24)):
        if val == 0 or val > _MAX_DIM:
            raise FormatError(f"{path}: dimension {name}={val} out of range at byte {off}")
    if p != P:
        raise FormatError(f"{path}: P must be 2, got {p} at byte 16")
    cell = T * p * H * W
    if cell > (1 << 31):
        raise FormatError(f"{path}: T*P*H*W={cell} overflows at byte 12")
    rec = 4 + 4 * cell
    avail = len(buf) - 28
    if avail < n * rec:
        bad = avail // rec
        raise FormatError(f"{path}: truncated in sample {bad} at byte {28 + bad * rec}")
    if avail > n * rec:
        raise FormatError(f"{path}: {avail - n * rec} trailing bytes at byte {28 + n * rec}")
    body = np.frombuffer(buf, dtype=[("label", "<u4"), ("data", "<f4", (cell,))], count=n, offset=28)
    labels = body["label"].astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise FormatError(f"{path}: label {labels[bad]} >= num_classes {k} in sample {bad} at byte {28 + bad * rec}")
    frames = body["data"].reshape(n, T, p, H, W).astype(np.float32)
    normalized = bool(frames.size == 0 or frames.max() <= 1.0)
    return Dataset(frames, labels, k, normalized=normalized)
