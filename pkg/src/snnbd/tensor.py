"""Dense arrays with a reverse-mode gradient tape.

Every differentiable op records one entry on a module-level tape when any of
its inputs requires a gradient. ``backward`` walks the tape in reverse and
returns a ``{leaf tensor: gradient}`` map; the tape is cleared afterwards.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is called on something that is not a recorded scalar."""


class CheckpointError(ValueError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Entry:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable ops. Appends are topologically ordered."""

    def __init__(self) -> None:
        self.entries: list[_Entry] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn) -> None:
        out.requires_grad = True
        out._node = len(self.entries)
        self.entries.append(_Entry(out, inputs, fn))

    def clear(self) -> None:
        for e in self.entries:
            e.out._node = None
        self.entries.clear()


TAPE = Tape()


@contextlib.contextmanager
def no_grad():
    prev = TAPE.enabled
    TAPE.enabled = False
    try:
        yield
    finally:
        TAPE.enabled = prev


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradient flow into the given leaf tensors."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, saved):
            p.requires_grad = r


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self._node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # elementwise sugar; operands must share a shape or be python scalars
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)


def _track(*inputs: Tensor) -> bool:
    return TAPE.enabled and any(t.requires_grad for t in inputs)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def parameter(data, dtype=np.float32, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data + np.asarray(b, dtype=a.dtype))
        if _track(a):
            TAPE.record(out, (a,), lambda g: (g,))
        return out
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if _track(a, b):
        TAPE.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _track(a, b):
        TAPE.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. ``b`` may be a Tensor of equal shape or a constant
    (scalar or numpy array broadcastable to ``a``)."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        out = Tensor(a.data * c)
        if _track(a):
            TAPE.record(out, (a,), lambda g: (g * c,))
        return out
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    if _track(a, b):
        TAPE.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    if _track(a):
        shape, dt = a.shape, a.dtype
        TAPE.record(out, (a,), lambda g: (np.full(shape, g, dtype=dt),))
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))
        if _track(a):
            shape, dt = a.shape, a.dtype
            TAPE.record(out, (a,), lambda g: (np.full(shape, g / n, dtype=dt),))
        return out
    n = a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))
    if _track(a):
        shape = a.shape

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).astype(g.dtype),)

        TAPE.record(out, (a,), bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if _track(a):
        old = a.shape
        TAPE.record(out, (a,), lambda g: (g.reshape(old),))
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    if _track(a):
        inv = tuple(np.argsort(axes))
        TAPE.record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if _track(*parts):
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
        TAPE.record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    if _track(a):
        TAPE.record(out, (a,), lambda g: (g * (1.0 - y * y),))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was strictly inside."""
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    if _track(a):
        inside = (a.data > lo) & (a.data < hi)
        TAPE.record(out, (a,), lambda g: (g * inside,))
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return mul(a, keep)


def mse_loss(pred: Tensor, target) -> Tensor:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {tgt.shape}")
    diff = pred.data - tgt
    n = diff.size
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=pred.dtype))
    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)
    if _track(*inputs):
        def bw(g):
            d = (2.0 / n) * g * diff
            return (d, -d) if len(inputs) == 2 else (d,)

        TAPE.record(out, inputs, bw)
    return out


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be (N,F), got {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: axis 1 of input ({x.shape[1]}) != weight in-features ({w.shape[1]})")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = Tensor(xd @ wd.T + b.data)
    if _track(x, w, b):
        def bw(g):
            return (g @ wd if x.requires_grad else None,
                    g.T @ xd if w.requires_grad else None,
                    g.sum(axis=0) if b.requires_grad else None)

        TAPE.record(out, (x, w, b), bw)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N*H'*W', C*kh*kw) patch matrix."""
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, in_shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = in_shape
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int, cols=None):
    k, c, kh, kw = w.shape
    n = x.shape[0]
    ho = _conv_out(x.shape[2], kh, stride, padding)
    wo = _conv_out(x.shape[3], kw, stride, padding)
    if cols is None:
        cols = _im2col(x, kh, kw, stride, padding)
    y = cols @ w.reshape(k, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)), cols


def _conv_bwd_input(g: np.ndarray, w: np.ndarray, in_shape, stride: int, padding: int) -> np.ndarray:
    k, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    return _col2im(gm @ w.reshape(k, -1), in_shape, kh, kw, stride, padding, ho, wo)


def _conv_bwd_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int,
                     cols=None) -> np.ndarray:
    k = w_shape[0]
    n, _, ho, wo = g.shape
    if cols is None:
        cols = _im2col(x, w_shape[2], w_shape[3], stride, padding)
        cols = cols.reshape(n, -1, cols.shape[1])
        # transposed conv can produce more windows than g covers; crop them
        full_h = _conv_out(x.shape[2], w_shape[2], stride, padding)
        full_w = _conv_out(x.shape[3], w_shape[3], stride, padding)
        cols = cols.reshape(n, full_h, full_w, -1)[:, :ho, :wo].reshape(n * ho * wo, -1)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    return (gm.T @ cols).reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) input with (K,C,kh,kw) weight plus (K,) bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D (N,C,H,W), got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (K,C,kh,kw), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel axis 1 mismatch, input {x.shape[1]} vs weight {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias axis 0 is {b.shape}, expected ({w.shape[0]},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    ho = _conv_out(x.shape[2], w.shape[2], stride, padding)
    wo = _conv_out(x.shape[3], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]} on axis 2/3")
    xd, wd = x.data, w.data
    y, cols = _conv_fwd(xd, wd, stride, padding)
    y += b.data[None, :, None, None]
    out = Tensor(y)
    if _track(x, w, b):
        def bw(g):
            return (
                _conv_bwd_input(g, wd, xd.shape, stride, padding) if x.requires_grad else None,
                _conv_bwd_weight(g, xd, wd.shape, stride, padding, cols=cols) if w.requires_grad else None,
                g.sum(axis=(0, 2, 3)) if b.requires_grad else None,
            )

        TAPE.record(out, (x, w, b), bw)
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, kh, kw).

    Output size is (H-1)*stride - 2*padding + kh.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv_transpose2d: input and weight must be 4-D")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: channel axis 1 mismatch, input {x.shape[1]} vs weight {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias axis 0 is {b.shape}, expected ({w.shape[1]},)")
    n, _, h, wdt = x.shape
    kh, kw = w.shape[2:]
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wdt - 1) * stride - 2 * padding + kw
    xd, wd = x.data, w.data
    y = _conv_bwd_input(xd, wd, (n, w.shape[1], ho, wo), stride, padding) + b.data[None, :, None, None]
    out = Tensor(y)
    if _track(x, w, b):
        def bw(g):
            return (
                _conv_fwd(g, wd, stride, padding)[0] if x.requires_grad else None,
                _conv_bwd_weight(xd, g, wd.shape, stride, padding) if w.requires_grad else None,
                g.sum(axis=(0, 2, 3)) if b.requires_grad else None,
            )

        TAPE.record(out, (x, w, b), bw)
    return out


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``scale * x + shift`` on (N,C,H,W)."""
    if x.data.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine: input {x.shape}, scale {scale.shape}, shift {shift.shape}")
    xd, sd = x.data, scale.data
    out = Tensor(xd * sd[None, :, None, None] + shift.data[None, :, None, None])
    if _track(x, scale, shift):
        def bw(g):
            return (g * sd[None, :, None, None], (g * xd).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        TAPE.record(out, (x, scale, shift), bw)
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool. Ties route the gradient to the first cell
    in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial axes 2/3 must be even, got {h}x{w}")
    xd = x.data
    quads = [xd[:, :, 0::2, 0::2], xd[:, :, 0::2, 1::2], xd[:, :, 1::2, 0::2], xd[:, :, 1::2, 1::2]]
    y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    out = Tensor(y)
    if _track(x):
        def bw(g):
            gx = np.zeros_like(xd, dtype=g.dtype)
            taken = np.zeros(y.shape, dtype=bool)
            for q, (di, dj) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
                hit = (q == y) & ~taken
                taken |= hit
                gx[:, :, di::2, dj::2] = g * hit
            return (gx,)

        TAPE.record(out, (x,), bw)
    return out


# ---------------------------------------------------------------------------
# spiking nonlinearity (lives here because it is a tape primitive)


def surrogate_grad(u: np.ndarray, slope: float) -> np.ndarray:
    """Derivative of the arctan surrogate at threshold offset ``u``."""
    return (slope / 2.0) / (1.0 + (np.pi * slope * u / 2.0) ** 2)


def soft_spike(u: np.ndarray, slope: float) -> np.ndarray:
    """Smooth arctan step whose derivative is :func:`surrogate_grad`."""
    return np.arctan(np.pi * slope * u / 2.0) / np.pi + 0.5


def lif_sequence(x: Tensor, steps: int, decay: float, threshold: float, slope: float,
                 smooth: bool = False) -> Tensor:
    """Leaky integrate-and-fire over a time-major stack of inputs.

    ``x`` has shape ``(steps * B, ...)`` laid out time-major. Membrane starts
    at zero; per step ``v_pre = decay * v + x_t``, ``s = [v_pre >= threshold]``,
    ``v = v_pre * (1 - s)``. Backprop runs through time with the arctan
    surrogate standing in for the step derivative. With ``smooth=True`` the
    forward pass emits the soft step itself, which makes the whole recurrence
    differentiable and checkable by finite differences.
    """
    if x.shape[0] % steps:
        raise ShapeError(f"lif_sequence: leading axis {x.shape[0]} not divisible by {steps} steps")
    xs = x.data.reshape((steps, -1) + x.shape[1:])
    v = np.zeros(xs.shape[1:], dtype=x.dtype)
    spikes = np.empty_like(xs)
    vpre = np.empty_like(xs)
    for t in range(steps):
        vp = decay * v + xs[t]
        u = vp - threshold
        s = soft_spike(u, slope).astype(x.dtype) if smooth else (u >= 0).astype(x.dtype)
        vpre[t] = vp
        spikes[t] = s
        v = vp * (1 - s)
    bad = ~np.isfinite(vpre)
    if bad.any():
        # a hard threshold would silently map NaN to "no spike"; keep it visible
        spikes[bad] = np.nan
    out = Tensor(spikes.reshape(x.shape))
    if _track(x):
        def bw(g):
            gs = g.reshape(xs.shape)
            dx = np.empty_like(gs)
            dv = np.zeros(xs.shape[1:], dtype=g.dtype)
            for t in range(steps - 1, -1, -1):
                vp, s = vpre[t], spikes[t]
                sg = surrogate_grad(vp - threshold, slope).astype(g.dtype)
                dvp = gs[t] * sg + dv * (1 - s) - dv * vp * sg
                dx[t] = dvp
                dv = decay * dvp
            return (dx.reshape(x.shape),)

        TAPE.record(out, (x,), bw)
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, tape: Tape = TAPE) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate from a scalar loss; returns gradients of the leaf
    tensors that require them. The tape is cleared afterwards."""
    if loss.size != 1 or loss._node is None or not loss.requires_grad:
        tape.clear()
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise GraphError("loss is detached: no recorded op produced it")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    try:
        for entry in reversed(tape.entries[: loss._node + 1]):
            g = pending.pop(id(entry.out), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    prev = leaves.get(inp)
                    leaves[inp] = gi.astype(inp.dtype, copy=True) if prev is None else prev + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
    finally:
        tape.clear()
    return leaves


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``. A ``None``
    gradient is treated as zero."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape} at index {i}")
        m = state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        v = state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# CKP1 checkpoints

CKP_MAGIC = b"CKP1"


def save_tensors(path, arrays: Iterable[np.ndarray]) -> None:
    arrays = list(arrays)
    chunks = [CKP_MAGIC, struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    _atomic_write(Path(path), b"".join(chunks))


def load_tensors(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKP_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    off = 4

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated reading {what} at byte {off}")
        chunk = buf[off:off + nbytes]
        off += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = []
    for i in range(count):
        (rank,) = struct.unpack("<I", take(4, f"rank of tensor {i}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of tensor {i}"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"data of tensor {i}"), dtype="<f4").reshape(dims)
        out.append(data.astype(np.float32))
    return out


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
