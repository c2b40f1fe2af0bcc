"""Backdoor triggers (static, moving, smart, dynamic), dirty-label poisoning
and the joint classifier/generator training loop of the dynamic attack."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .events import Dataset, FrameTensor, PreconditionError, polarity_codes
from .snn import SpikingNet, TrainConfig, _check_finite, batches, evaluate, one_hot
from .tensor import Tensor

log = logging.getLogger(__name__)

KINDS = ("static", "moving", "smart", "dynamic")
LOCATIONS = ("top-left", "middle", "bottom-right")
# (OFF, ON) channel values written by each polarity code
POLARITY_PATTERN = {0: (0.0, 0.0), 1: (1.0, 0.0), 2: (0.0, 1.0), 3: (1.0, 1.0)}


class PlacementError(ValueError):
    pass


class SpecError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def trigger_side(height: int, size: float) -> int:
    """Square side for an area fraction ``size`` of the image."""
    return max(1, round_half_up(height * math.sqrt(size)))


@dataclass
class TriggerSpec:
    kind: str = "static"
    polarity: int = 3
    size: float = 0.1
    location: str | tuple[int, int] = "top-left"
    grid_lines: int = 2
    most_active: bool = True
    least_polarity: bool = True
    budget: float = 0.1
    clean_weight: float = 0.5
    step: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown trigger kind {self.kind!r}")
        if self.polarity not in POLARITY_PATTERN:
            raise SpecError(f"polarity must be 0..3, got {self.polarity}")
        if not 0 < self.size <= 1:
            raise SpecError("size must lie in (0, 1]")
        if not 0 <= self.budget <= 1:
            raise SpecError("budget must lie in [0, 1]")
        if self.kind == "dynamic" and not 0.5 <= self.clean_weight <= 1:
            raise SpecError("clean_weight must lie in [0.5, 1] for the dynamic attack")
        if self.grid_lines < 1:
            raise SpecError("grid_lines must be >= 1")
        if isinstance(self.location, str) and self.location not in LOCATIONS:
            raise SpecError(f"location must be one of {LOCATIONS} or (row, col)")


@dataclass
class PoisonPlan:
    poison_rate: float
    target: int = 0

    def count(self, n: int) -> int:
        if not 0 < self.poison_rate < 1:
            raise SpecError("poison_rate must lie in (0, 1)")
        m = max(1, round_half_up(self.poison_rate * n))
        if m >= n:
            raise SpecError(f"poison_rate={self.poison_rate} on n={n} poisons every sample")
        return m


def origin(location, height: int, width: int, side: int) -> tuple[int, int]:
    if isinstance(location, str):
        if location == "top-left":
            r, grid_lines = 0, 0
        elif location == "middle":
            r, grid_lines = (height - side) // 2, (width - side) // 2
        elif location == "bottom-right":
            r, grid_lines = height - side, width - side
        else:
            raise PlacementError(f"unknown location {location!r}")
    else:
        r, grid_lines = int(location[0]), int(location[1])
    if r < 0 or grid_lines < 0 or r + side > height or grid_lines + side > width:
        raise PlacementError(f"square of side {side} at ({r}, {grid_lines}) leaves the {height}x{width} image")
    return r, grid_lines


def _paint(frames: np.ndarray, p: int, r: int, grid_lines: int, side: int) -> None:
    off, on = POLARITY_PATTERN[p]
    frames[..., 0, r:r + side, grid_lines:grid_lines + side] = off
    frames[..., 1, r:r + side, grid_lines:grid_lines + side] = on


def _arr(frames) -> np.ndarray:
    return frames.data if isinstance(frames, FrameTensor) else np.asarray(frames)


def apply_static(frames, spec: TriggerSpec) -> np.ndarray:
    """Paint the polarity square at the same place in every frame.

    Works on a single (T,P,H,W) sample or any stack with extra leading axes.
    """
    x = np.array(_arr(frames), dtype=np.float32, copy=True)
    H, W = x.shape[-2:]
    side = trigger_side(H, spec.size)
    r, grid_lines = origin(spec.location, H, W, side)
    _paint(x, spec.polarity, r, grid_lines, side)
    return x


def moving_columns(col0: int, side: int, width: int, steps: int, step: int = 2) -> list[int]:
    span = width - side + 1
    return [(col0 + step * t) % span for t in range(steps)]


def apply_moving(frames, spec: TriggerSpec) -> np.ndarray:
    """Square slides ``spec.step`` px right per frame along a fixed row, wrapping around."""
    x = np.array(_arr(frames), dtype=np.float32, copy=True)
    T, _, H, W = x.shape[-4:]
    side = trigger_side(H, spec.size)
    r, c0 = origin(spec.location, H, W, side)
    for t, grid_lines in enumerate(moving_columns(c0, side, W, T, spec.step)):
        _paint(x[..., t, :, :, :], spec.polarity, r, grid_lines, side)
    return x


# ---------------------------------------------------------------------------
# smart trigger


def tile_edges(n: int, grid_lines: int) -> np.ndarray:
    """Edges of the bands that ``grid_lines`` evenly spaced cuts make in ``n`` pixels."""
    return np.array([i * n // (grid_lines + 1) for i in range(grid_lines + 2)])


@dataclass
class MaskActivity:
    grid_lines: int
    row_edges: np.ndarray
    col_edges: np.ndarray
    activity: np.ndarray  # ((grid_lines+1)^2,) mean non-background polarity events per sample
    histogram: np.ndarray  # ((grid_lines+1)^2, 4) code counts summed over samples and frames

    def tile_bounds(self, tile: int) -> tuple[int, int, int, int]:
        i, j = divmod(tile, self.grid_lines + 1)
        return (int(self.row_edges[i]), int(self.row_edges[i + 1]),
                int(self.col_edges[j]), int(self.col_edges[j + 1]))

    @property
    def num_tiles(self) -> int:
        return (self.grid_lines + 1) ** 2


def compute_mask_activity(dataset: Dataset, grid_lines: int = 2, level: float = 0.5) -> MaskActivity:
    if grid_lines < 1:
        raise PreconditionError("grid_lines must be >= 1")
    if not dataset.normalized:
        raise PreconditionError("mask activity needs normalized frames")
    H, W = dataset.frames.shape[-2:]
    rows, cols = tile_edges(H, grid_lines), tile_edges(W, grid_lines)
    codes = polarity_codes(dataset.frames, level)  # (n, T, H, W)
    n = max(len(dataset), 1)
    k = (grid_lines + 1) ** 2
    activity = np.zeros(k)
    hist = np.zeros((k, 4), dtype=np.int64)
    for i in range(grid_lines + 1):
        for j in range(grid_lines + 1):
            block = codes[:, :, rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            counts = np.bincount(block.ravel(), minlength=4)[:4]
            hist[i * (grid_lines + 1) + j] = counts
            activity[i * (grid_lines + 1) + j] = counts[1:].sum() / n
    return MaskActivity(grid_lines, rows, cols, activity, hist)


def select_smart(activity: MaskActivity, most_active: bool = True,
                 least_polarity: bool = True) -> tuple[int, int]:
    """(tile, polarity); ties go to the lowest tile index, then the lowest code."""
    a = activity.activity
    tile = int(np.argmax(a) if most_active else np.argmin(a))
    h = activity.histogram[tile]
    pol = int(np.argmin(h) if least_polarity else np.argmax(h))
    return tile, pol


def smart_trajectory(bounds: tuple[int, int, int, int], side: int, steps: int,
                     seed) -> list[tuple[int, int]]:
    """Seeded random walk of the square's top-left corner, +-2 px per axis per
    frame, clamped so the square stays inside the tile."""
    r0, r1, c0, c1 = bounds
    rmax, cmax = r1 - side, c1 - side
    if rmax < r0 or cmax < c0:
        raise PlacementError(f"square of side {side} does not fit tile rows {r0}:{r1}, cols {c0}:{c1}")
    rng = np.random.default_rng(seed)
    r = int(rng.integers(r0, rmax + 1))
    c = int(rng.integers(c0, cmax + 1))
    path = [(r, c)]
    for _ in range(steps - 1):
        dr, dc = rng.integers(-2, 3, size=2)
        r = min(max(r + int(dr), r0), rmax)
        c = min(max(c + int(dc), c0), cmax)
        path.append((r, c))
    return path


def apply_smart(frames, bounds: tuple[int, int, int, int], polarity: int, size: float,
                seed) -> np.ndarray:
    x = np.array(_arr(frames), dtype=np.float32, copy=True)
    T, _, H, _ = x.shape[-4:]
    side = trigger_side(H, size)
    for t, (r, c) in enumerate(smart_trajectory(bounds, side, T, seed)):
        _paint(x[..., t, :, :, :], polarity, r, c, side)
    return x


# ---------------------------------------------------------------------------
# trigger callables: (frames (N,T,P,H,W), keys (N,)) -> poisoned frames


class Trigger:
    kind = "none"

    def __call__(self, frames: np.ndarray, keys: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class StaticTrigger(Trigger):
    kind = "static"

    def __init__(self, spec: TriggerSpec):
        self.spec = spec

    def __call__(self, frames, keys=None):
        return apply_static(frames, self.spec)


class MovingTrigger(Trigger):
    kind = "moving"

    def __init__(self, spec: TriggerSpec):
        self.spec = spec

    def __call__(self, frames, keys=None):
        return apply_moving(frames, self.spec)


class SmartTrigger(Trigger):
    kind = "smart"

    def __init__(self, spec: TriggerSpec, activity: MaskActivity):
        self.spec = spec
        self.activity = activity
        self.tile, self.polarity = select_smart(activity, spec.most_active, spec.least_polarity)
        self.bounds = activity.tile_bounds(self.tile)

    def __call__(self, frames, keys=None):
        frames = np.asarray(frames)
        keys = np.arange(len(frames)) if keys is None else np.asarray(keys)
        out = np.empty_like(frames, dtype=np.float32)
        for i, k in enumerate(keys):
            out[i] = apply_smart(frames[i], self.bounds, self.polarity, self.spec.size,
                                 [self.spec.seed, int(k)])
        return out

    def describe(self):
        return {"kind": self.kind, "tile": self.tile, "polarity": self.polarity}


def build_trigger(spec: TriggerSpec, train_set: Dataset | None = None) -> Trigger:
    spec.validate()
    if spec.kind == "static":
        return StaticTrigger(spec)
    if spec.kind == "moving":
        return MovingTrigger(spec)
    if spec.kind == "smart":
        if train_set is None:
            raise SpecError("smart trigger needs the training set to locate the active mask")
        return SmartTrigger(spec, compute_mask_activity(train_set, spec.grid_lines))
    raise SpecError("dynamic triggers come from train_dynamic, not build_trigger")


def poison_dataset(dataset: Dataset, trigger: Trigger, plan: PoisonPlan,
                   seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Replace m = max(1, round(eps * n)) seeded-random samples by triggered
    copies relabelled to the target. Returns the mixed set and sorted indices."""
    n = len(dataset)
    if not 0 <= plan.target < dataset.num_classes:
        raise SpecError(f"target {plan.target} outside [0, {dataset.num_classes})")
    m = plan.count(n)
    rng = np.random.default_rng([seed, 11])
    idx = np.sort(rng.choice(n, size=m, replace=False))
    frames = dataset.frames.copy()
    labels = dataset.labels.copy()
    frames[idx] = trigger(frames[idx], idx)
    labels[idx] = plan.target
    return dataset.replace(frames=frames, labels=labels), idx


# ---------------------------------------------------------------------------
# dynamic trigger


class TriggerGenerator:
    """Per-frame conv encoder/decoder with tanh activations.

    Two stride-2 conv stages halve the resolution twice, two stride-2
    transposed convs bring it back; the same weights serve every frame.
    """

    def __init__(self, channels: int = 2, width: int = 8, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 13])
        w1, w2 = width, 2 * width

        def conv_w(cout, cin):
            b = 1.0 / math.sqrt(cin * 16)
            return rng.uniform(-b, b, (cout, cin, 4, 4))

        def deconv_w(cin, cout):
            b = 1.0 / math.sqrt(cin * 16)
            return rng.uniform(-b, b, (cin, cout, 4, 4))

        p = tn.parameter
        self.enc = [
            (p(conv_w(w1, channels), dtype), p(np.zeros(w1), dtype), p(np.ones(w1), dtype), p(np.zeros(w1), dtype)),
            (p(conv_w(w2, w1), dtype), p(np.zeros(w2), dtype), p(np.ones(w2), dtype), p(np.zeros(w2), dtype)),
        ]
        self.dec = [
            (p(deconv_w(w2, w1), dtype), p(np.zeros(w1), dtype), p(np.ones(w1), dtype), p(np.zeros(w1), dtype)),
            (p(deconv_w(w1, channels), dtype), p(np.zeros(channels), dtype)),
        ]

    def params(self) -> list[Tensor]:
        out = []
        for block in self.enc + self.dec:
            out.extend(block)
        return out

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for w, b, s, sh in self.enc:
            h = tn.tanh(tn.channel_affine(tn.conv2d(h, w, b, stride=2, padding=1), s, sh))
        w, b, s, sh = self.dec[0]
        h = tn.tanh(tn.channel_affine(tn.conv_transpose2d(h, w, b, stride=2, padding=1), s, sh))
        w, b = self.dec[1]
        return tn.tanh(tn.conv_transpose2d(h, w, b, stride=2, padding=1))

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params()]

    def load_state_arrays(self, arrays) -> None:
        for p, a in zip(self.params(), arrays):
            p.data = np.array(a, dtype=p.dtype)


def perturb(gen: TriggerGenerator, x, budget: float) -> tuple[Tensor, Tensor]:
    """Differentiable (triggered, perturbation) for a batch (B, T, P, H, W)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    B, T = xd.shape[:2]
    flat = Tensor(xd.reshape((B * T,) + xd.shape[2:]))
    perturbation = tn.clamp(gen(flat), -budget, budget).reshape(xd.shape)
    triggered = tn.clamp(tn.add(perturbation, xd), 0.0, 1.0)
    return triggered, perturbation


def _enforce_budget(x: np.ndarray, triggered: np.ndarray, budget: float) -> np.ndarray:
    # float32 rounding of x + perturbation can overshoot budget; snap offenders onto the boundary
    x64 = x.astype(np.float64)
    d = triggered.astype(np.float64) - x64
    over = np.abs(d) > budget
    if not over.any():
        return triggered
    triggered = triggered.copy()
    edge = (x64 + np.sign(d) * budget)[over].astype(np.float32)
    for _ in range(4):
        bad = np.abs(edge.astype(np.float64) - x64[over]) > budget
        if not bad.any():
            break
        edge = np.where(bad, np.nextafter(edge, x[over]), edge)
    triggered[over] = edge
    return triggered


def gen_dynamic(gen: TriggerGenerator, x, budget: float) -> tuple[np.ndarray, np.ndarray]:
    """(triggered, perturbation) with max|triggered - x| <= budget holding cell by cell."""
    xd = np.asarray(_arr(x), dtype=np.float32)
    single = xd.ndim == 4
    if single:
        xd = xd[None]
    with tn.no_grad():
        triggered, perturbation = perturb(gen, xd, budget)
    xh = _enforce_budget(xd, triggered.data.astype(np.float32), budget)
    dd = perturbation.data
    return (xh[0], dd[0]) if single else (xh, dd)


class DynamicTrigger(Trigger):
    kind = "dynamic"

    def __init__(self, gen: TriggerGenerator, budget: float, batch_size: int = 64):
        self.gen = gen
        self.budget = budget
        self.batch_size = batch_size

    def __call__(self, frames, keys=None):
        frames = np.asarray(frames, dtype=np.float32)
        out = [gen_dynamic(self.gen, frames[i:i + self.batch_size], self.budget)[0]
               for i in range(0, len(frames), self.batch_size)]
        return np.concatenate(out) if out else frames.copy()

    def describe(self):
        return {"kind": self.kind, "budget": self.budget}


@dataclass
class DynamicResult:
    net: SpikingNet
    gen: TriggerGenerator
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train_dynamic(net: SpikingNet, gen: TriggerGenerator, dataset: Dataset, clean_weight: float,
                  budget: float, target: int, cfg: TrainConfig, test_set: Dataset | None = None,
                  gen_lr: float | None = None) -> DynamicResult:
    """Jointly train classifier and trigger generator.

    Per batch: (i) classifier step on clean_weight*clean + (1-clean_weight)*backdoor loss
    with the generator frozen; (ii) generator step on the backdoor loss with
    the classifier frozen. Keeps the epoch with the best (clean_acc + asr) / 2.
    """
    from .metrics import asr as attack_success

    if not 0.5 <= clean_weight <= 1:
        raise SpecError("clean_weight must lie in [0.5, 1]")
    if budget < 0:
        raise SpecError("budget must be >= 0")
    net_params, gen_params = net.params(), gen.params()
    opt_f, opt_g = tn.AdamState(), tn.AdamState()
    k = net.num_classes
    eval_set = test_set if test_set is not None else dataset
    best = None
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        drop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(dataset), cfg.batch_size, rng)):
            xb, yb = dataset.frames[idx], dataset.labels[idx]
            y_clean = one_hot(yb, k)
            y_bd = one_hot(np.full(len(idx), target), k)
            # (i) classifier update, generator frozen
            rates, _ = net.forward(xb, training=True, rng=drop_rng)
            loss = tn.mul(tn.mse_loss(rates, y_clean), clean_weight)
            if clean_weight < 1:
                with tn.no_grad():
                    triggered, _ = perturb(gen, xb, budget)
                rates_bd, _ = net.forward(triggered.data, training=True, rng=drop_rng)
                loss = tn.add(loss, tn.mul(tn.mse_loss(rates_bd, y_bd), 1.0 - clean_weight))
            lv = loss.item()
            _check_finite(lv, epoch, b)
            grads = tn.backward(loss)
            tn.adam_step(net_params, [grads.get(p) for p in net_params], opt_f, lr=cfg.lr)
            # (ii) generator update, classifier frozen
            with tn.frozen(net_params):
                triggered, _ = perturb(gen, xb, budget)
                rates_bd, _ = net.forward(triggered, training=True, rng=drop_rng)
                gloss = tn.mse_loss(rates_bd, y_bd)
                _check_finite(gloss.item(), epoch, b)
                grads = tn.backward(gloss)
            tn.adam_step(gen_params, [grads.get(p) for p in gen_params], opt_g, lr=gen_lr or cfg.lr)
            total += lv * len(idx)
            count += len(idx)
        trig = DynamicTrigger(gen, budget)
        acc = evaluate(net, eval_set)
        rate = attack_success(net, eval_set, trig, target)
        row = {"epoch": epoch + 1, "loss": total / max(count, 1), "clean_acc": acc, "asr": rate}
        history.append(row)
        log.info("dynamic epoch %d loss %.5f acc %.4f asr %.4f", epoch + 1, row["loss"], acc, rate)
        score = (acc + rate) / 2
        if best is None or score > best[0]:
            best = (score, epoch + 1, net.copy(), copy.deepcopy(gen))
    if best is None:
        return DynamicResult(net, gen, history, 0)
    return DynamicResult(best[2], best[3], history, best[1])
