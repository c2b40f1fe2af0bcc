"""Spiking classifier built from LIF layers with surrogate gradients, trained
on output firing rates."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .events import Dataset
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LIFConfig:
    threshold: float = 1.0
    time_constant: float = 2.0
    surrogate_slope: float = 2.0
    # forward emits the smooth arctan step instead of a hard spike (gradient checks only)
    smooth: bool = False

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if self.time_constant < 1:
            raise ValueError("time_constant must be >= 1")

    @property
    def decay(self) -> float:
        return 0.0 if self.time_constant == 1 else 1.0 - 1.0 / self.time_constant


def lif_step(v: np.ndarray, inp: np.ndarray, cfg: LIFConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single LIF update: decay, integrate, fire, hard reset to zero."""
    v_pre = cfg.decay * v + inp
    spikes = (v_pre >= cfg.threshold).astype(np.asarray(inp).dtype)
    return spikes, np.where(spikes > 0, 0.0, v_pre).astype(spikes.dtype)


@dataclass
class NetConfig:
    input_dims: tuple[int, int, int, int] = (16, 2, 32, 32)
    num_classes: int = 4
    conv_channels: tuple[int, ...] = (8,)
    hidden: tuple[int, ...] = ()
    votes: int = 1
    dropout: float = 0.0
    kernel: int = 3
    lif: LIFConfig = field(default_factory=LIFConfig)
    dtype: str = "float32"


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# layers


class Conv:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype):
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = tn.parameter(rng.uniform(-bound, bound, (cout, cin, k, k)), dtype, "conv.w")
        self.bias = tn.parameter(np.zeros(cout), dtype, "conv.b")
        self.scale = tn.parameter(np.ones(cout), dtype, "conv.scale")
        self.shift = tn.parameter(np.zeros(cout), dtype, "conv.shift")
        self.pad = k // 2

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias, self.scale, self.shift]

    def __call__(self, x: Tensor, ctx) -> Tensor:
        y = tn.conv2d(x, self.weight, self.bias, 1, self.pad)
        return tn.channel_affine(y, self.scale, self.shift)


class Linear:
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype):
        bound = 1.0 / math.sqrt(fin)
        self.weight = tn.parameter(rng.uniform(-bound, bound, (fout, fin)), dtype, "linear.w")
        self.bias = tn.parameter(np.zeros(fout), dtype, "linear.b")

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, ctx) -> Tensor:
        if "features" in ctx.taps_wanted:
            ctx.taps["features"] = x.data
        return tn.linear(x, self.weight, self.bias)


class LIF:
    def __init__(self, cfg: LIFConfig, channels: int | None = None, name: str = "lif"):
        self.cfg = cfg
        self.name = name
        self.mask: np.ndarray | None = None  # persistent per-channel pruning mask
        self.channels = channels

    def params(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor, ctx) -> Tensor:
        c = self.cfg
        s = tn.lif_sequence(x, ctx.steps, c.decay, c.threshold, c.surrogate_slope, smooth=c.smooth)
        if self.mask is not None:
            shape = (1, -1) + (1,) * (s.data.ndim - 2)
            s = tn.mul(s, self.mask.reshape(shape).astype(s.dtype))
        if self.name in ctx.taps_wanted:
            ctx.taps[self.name] = s.data
        return s


class MaxPool:
    def params(self):
        return []

    def __call__(self, x, ctx):
        return tn.maxpool2(x)


class Flatten:
    def params(self):
        return []

    def __call__(self, x, ctx):
        return x.reshape(x.shape[0], -1)


class Dropout:
    def __init__(self, p: float):
        self.p = p

    def params(self):
        return []

    def __call__(self, x, ctx):
        return tn.dropout(x, self.p, ctx.rng, ctx.training)


class _Ctx:
    def __init__(self, steps, training, rng, taps_wanted):
        self.steps = steps
        self.training = training
        self.rng = rng
        self.taps_wanted = set(taps_wanted)
        self.taps: dict[str, np.ndarray] = {}


class SpikingNet:
    """conv(+affine)+LIF [+pool] blocks, optional hidden linear+LIF, output
    linear+LIF, then rate averaging over time and V-way voting."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng([seed, 7])
        T, p, H, W = cfg.input_dims
        layers: list = []
        cin, h, w = p, H, W
        for i, ch in enumerate(cfg.conv_channels):
            layers.append(Conv(cin, ch, cfg.kernel, rng, dtype))
            last = i == len(cfg.conv_channels) - 1
            layers.append(LIF(cfg.lif, ch, name="last_conv" if last else f"conv{i}"))
            if h % 2 == 0 and w % 2 == 0:
                layers.append(MaxPool())
                h, w = h // 2, w // 2
            cin = ch
        layers.append(Flatten())
        fin = cin * h * w
        for j, units in enumerate(cfg.hidden):
            layers.append(Linear(fin, units, rng, dtype))
            layers.append(LIF(cfg.lif, name=f"hidden{j}"))
            if cfg.dropout > 0:
                layers.append(Dropout(cfg.dropout))
            fin = units
        layers.append(Linear(fin, cfg.num_classes * cfg.votes, rng, dtype))
        layers.append(LIF(cfg.lif, name="out"))
        self.layers = layers
        self.num_classes = cfg.num_classes
        self.votes = cfg.votes

    # -- parameters ---------------------------------------------------------
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    @property
    def last_conv(self) -> LIF:
        for layer in self.layers:
            if isinstance(layer, LIF) and layer.name == "last_conv":
                return layer
        raise ValueError("network has no convolutional layer")

    def state_arrays(self) -> list[np.ndarray]:
        arrs = [p.data for p in self.params()]
        for layer in self.layers:
            if isinstance(layer, LIF) and layer.channels is not None:
                arrs.append(layer.mask if layer.mask is not None else np.ones(layer.channels, np.float32))
        return arrs

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.params()
        convs = [l for l in self.layers if isinstance(l, LIF) and l.channels is not None]
        if len(arrays) != len(params) + len(convs):
            raise ValueError(f"checkpoint holds {len(arrays)} tensors, net expects {len(params) + len(convs)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"checkpoint tensor {a.shape} does not fit parameter {p.shape}")
            p.data = np.array(a, dtype=p.dtype)
        for layer, m in zip(convs, arrays[len(params):]):
            layer.mask = None if np.all(m == 1) else np.array(m, dtype=np.float32)

    def copy(self) -> "SpikingNet":
        return copy.deepcopy(self)

    # -- forward ------------------------------------------------------------
    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                taps: Sequence[str] = ()) -> tuple[Tensor, dict[str, np.ndarray]]:
        """Rates (B, num_classes) for a batch of frames (B, T, P, H, W).

        ``x`` may be a numpy array or a Tensor (so the input can carry a gradient).
        Stateless layers run over all frames at once; only the LIF recurrence
        is sequential, which is equivalent to stepping frame by frame.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.dtype))
        if x.data.ndim != 5 or tuple(x.shape[1:]) != tuple(self.cfg.input_dims):
            raise tn.ShapeError(f"net expects (B, {self.cfg.input_dims}), got {x.shape}")
        B, T = x.shape[:2]
        h = tn.transpose(x, (1, 0, 2, 3, 4)).reshape((T * B,) + tuple(x.shape[2:]))
        ctx = _Ctx(T, training, rng if rng is not None else np.random.default_rng(0), taps)
        for layer in self.layers:
            h = layer(h, ctx)
        rates = h.reshape(T, B, -1).mean(axis=0)
        if self.votes > 1:
            rates = rates.reshape(B, self.num_classes, self.votes).mean(axis=2)
        for k in list(ctx.taps):
            a = ctx.taps[k]
            ctx.taps[k] = a.reshape((T, B) + a.shape[1:])
        return rates, ctx.taps

    def rates(self, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with tn.no_grad():
            for i in range(0, len(frames), batch_size):
                r, _ = self.forward(frames[i:i + batch_size])
                out.append(r.data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), np.float32)

    def features(self, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Time-averaged input of the output layer, one row per sample."""
        out = []
        with tn.no_grad():
            for i in range(0, len(frames), batch_size):
                _, taps = self.forward(frames[i:i + batch_size], taps=("features",))
                out.append(taps["features"].mean(axis=0))
        return np.concatenate(out)


def forward_seq(net: SpikingNet, frames) -> np.ndarray:
    """Rates for one sample (T, P, H, W)."""
    data = frames.data if hasattr(frames, "data") else frames
    return net.rates(np.asarray(data)[None])[0]


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def predict(net, frames: np.ndarray) -> np.ndarray:
    return np.argmax(net.rates(frames), axis=1)


def evaluate(net, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, dataset.frames) == dataset.labels))


# ---------------------------------------------------------------------------
# training

EpochHook = Callable[[int, dict], None]


def _check_finite(loss: float, epoch: int, batch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_epoch(net: SpikingNet, dataset: Dataset, cfg: TrainConfig, epoch: int,
                opt: tn.AdamState, params: list[Tensor] | None = None) -> float:
    params = params if params is not None else net.params()
    rng = np.random.default_rng([cfg.seed, epoch])
    drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
    total, count = 0.0, 0
    for b, idx in enumerate(batches(len(dataset), cfg.batch_size, rng)):
        rates, _ = net.forward(dataset.frames[idx], training=True, rng=drop_rng)
        loss = tn.mse_loss(rates, one_hot(dataset.labels[idx], net.num_classes, rates.dtype))
        lv = loss.item()
        _check_finite(lv, epoch, b)
        grads = tn.backward(loss)
        tn.adam_step(params, [grads.get(p) for p in params], opt, lr=cfg.lr)
        total += lv * len(idx)
        count += len(idx)
    return total / max(count, 1)


def fit(net: SpikingNet, dataset: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None,
        opt: tn.AdamState | None = None, start_epoch: int = 0, on_epoch: EpochHook | None = None):
    """Minimise one-hot MSE on output firing rates with Adam.

    Returns (net, history) where history rows are {epoch, loss, clean_acc};
    clean_acc is measured on ``eval_set`` when given, otherwise on ``dataset``.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    opt = opt if opt is not None else tn.AdamState()
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        loss = train_epoch(net, dataset, cfg, epoch, opt)
        acc = evaluate(net, eval_set if eval_set is not None else dataset)
        row = {"epoch": epoch + 1, "loss": loss, "clean_acc": acc}
        history.append(row)
        log.info("epoch %d loss %.5f acc %.4f", epoch + 1, loss, acc)
        if on_epoch is not None:
            on_epoch(epoch, row)
    net.opt_state = opt
    return net, history
