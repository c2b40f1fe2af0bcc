"""Finite-difference gradient checks and brute-force oracle comparisons.

``run_all`` backs the ``selfcheck`` command. Setting the environment variable
named by ``CORRUPT_ENV`` to a check name scales that check's analytic gradient
by 1.01, which must make it fail (test-only hook).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Tensor

CORRUPT_ENV = "SNNBD_SELFCHECK_CORRUPT"
STEP = 1e-5
OP_TOL = 1e-6
NET_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| scaled by the larger of the two max-magnitudes."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def check_grad(name: str, build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
               tol: float = OP_TOL, corrupt: str | None = None) -> CheckResult:
    """Compare backward() against central differences for every input array."""
    t0 = time.perf_counter()
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build(leaves)
    grads = tn.backward(loss)

    def value() -> float:
        with tn.no_grad():
            return float(build(leaves).data)

    err = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        if corrupt == name:
            analytic = analytic * 1.01
        err = max(err, rel_error(analytic, numeric_grad(value, leaf.data)))
    return CheckResult(name, err, tol, time.perf_counter() - t0)


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    # random projection to a scalar so every output element gets a distinct weight
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return tn.tsum(tn.mul(out, w))


def op_checks(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    r = lambda *s: rng.standard_normal(s)
    target = r(4, 3)
    away = lambda *s: np.where(rng.random(s) < 0.5, -1, 1) * rng.uniform(0.1, 0.9, s)
    return [
        ("add", lambda t: _weighted(tn.add(t[0], t[1])), [r(3, 4), r(3, 4)]),
        ("sub", lambda t: _weighted(tn.sub(t[0], t[1])), [r(3, 4), r(3, 4)]),
        ("mul", lambda t: _weighted(tn.mul(t[0], t[1])), [r(3, 4), r(3, 4)]),
        ("sum", lambda t: tn.mul(tn.tsum(t[0]), 0.7), [r(2, 5)]),
        ("mean", lambda t: _weighted(tn.mean(t[0], axis=1)), [r(3, 5, 2)]),
        ("reshape", lambda t: _weighted(tn.reshape(t[0], (6, 2))), [r(3, 4)]),
        ("transpose", lambda t: _weighted(tn.transpose(t[0], (2, 0, 1))), [r(2, 3, 4)]),
        ("concat", lambda t: _weighted(tn.concat([t[0], t[1]], axis=1)), [r(2, 3), r(2, 2)]),
        ("tanh", lambda t: _weighted(tn.tanh(t[0])), [r(4, 5)]),
        ("clamp", lambda t: _weighted(tn.clamp(t[0], -0.5, 0.5)),
         [np.concatenate([away(10) * 0.45, np.sign(r(10)) * rng.uniform(0.6, 2, 10)])]),
        ("mse_loss", lambda t: tn.mse_loss(t[0], target), [r(4, 3)]),
        ("linear", lambda t: _weighted(tn.linear(t[0], t[1], t[2])), [r(5, 4), r(3, 4), r(3)]),
        ("conv2d", lambda t: _weighted(tn.conv2d(t[0], t[1], t[2], stride=1, padding=1)),
         [r(2, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        ("conv2d_stride2", lambda t: _weighted(tn.conv2d(t[0], t[1], t[2], stride=2, padding=1)),
         [r(1, 2, 8, 8), r(3, 2, 4, 4), r(3)]),
        ("conv_transpose2d", lambda t: _weighted(tn.conv_transpose2d(t[0], t[1], t[2], stride=2, padding=1)),
         [r(1, 3, 4, 4), r(3, 2, 4, 4), r(2)]),
        ("channel_affine", lambda t: _weighted(tn.channel_affine(t[0], t[1], t[2])),
         [r(2, 3, 4, 4), r(3), r(3)]),
        ("maxpool2", lambda t: _weighted(tn.maxpool2(t[0])), [r(2, 3, 6, 6)]),
        ("lif_sequence", lambda t: _weighted(tn.lif_sequence(t[0], 5, 0.5, 1.0, 2.0, smooth=True)),
         [r(5 * 2, 3, 2) + 0.5]),
    ]


def net_check(corrupt: str | None = None) -> CheckResult:
    """Two-layer spiking net (conv + output) in 64-bit smooth mode, all parameters."""
    from .snn import LIFConfig, NetConfig, SpikingNet, one_hot

    t0 = time.perf_counter()
    cfg = NetConfig(input_dims=(4, 2, 8, 8), num_classes=3, conv_channels=(3,),
                    lif=LIFConfig(threshold=1.0, time_constant=2.0, surrogate_slope=2.0, smooth=True),
                    dtype="float64")
    net = SpikingNet(cfg, seed=3)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (2, 4, 2, 8, 8))
    y = one_hot(np.array([0, 2]), 3, np.float64)
    # scale weights so the membrane crosses threshold region where the soft step is informative
    for p in net.params():
        p.data = p.data * 3.0
    params = net.params()

    def loss_value() -> float:
        with tn.no_grad():
            r, _ = net.forward(x)
            return float(tn.mse_loss(r, y).data)

    r, _ = net.forward(x)
    grads = tn.backward(tn.mse_loss(r, y))
    err = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        if corrupt == "spiking_net":
            analytic = analytic * 1.01
        err = max(err, rel_error(analytic, numeric_grad(loss_value, p.data)))
    return CheckResult("spiking_net", err, NET_TOL, time.perf_counter() - t0)


# -- oracle equivalences ------------------------------------------------------


def _naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


def oracle_checks(corrupt: str | None = None) -> list[CheckResult]:
    from .defenses import top_singular_direction
    from .metrics import ssim_frames
    from .snn import LIFConfig, lif_step

    rng = np.random.default_rng(11)
    out = []

    def add(name, err, tol=1e-9):
        if corrupt == name:
            err = err + 1.0
        out.append(CheckResult(name, err, tol))

    x, w, b = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    with tn.no_grad():
        y = tn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    add("conv2d_vs_loops", rel_error(y, _naive_conv(x, w, b, 2, 1)))

    cfg = LIFConfig()
    inp = rng.uniform(0, 1.5, (6, 3, 4))
    v = np.zeros((3, 4))
    ref = []
    for t in range(6):
        s, v = lif_step(v, inp[t], cfg)
        ref.append(s)
    with tn.no_grad():
        got = tn.lif_sequence(Tensor(inp.reshape(18, 4)), 6, cfg.decay, cfg.threshold, cfg.surrogate_slope).data
    add("lif_vs_stepwise", float(np.max(np.abs(got.reshape(6, 3, 4) - np.stack(ref)))))

    xm = rng.standard_normal((1, 2, 4, 4))
    with tn.no_grad():
        pm = tn.maxpool2(Tensor(xm)).data
    brute = np.array([[[[xm[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(2)]
                        for i in range(2)] for c in range(2)]])
    add("maxpool_vs_loops", float(np.max(np.abs(pm - brute))))

    fr = rng.uniform(0, 1, (4, 2, 16, 16))
    add("ssim_identity", abs(ssim_frames(fr, fr.copy()) - 1.0), 1e-6)

    m = rng.standard_normal((8, 8))
    v = top_singular_direction(m)
    vals, vecs = np.linalg.eigh(m.T @ m)
    ref_v = vecs[:, -1]
    add("power_iteration_vs_eigh", float(min(np.max(np.abs(v - ref_v)), np.max(np.abs(v + ref_v)))), 1e-6)
    return out


def run_all(corrupt: str | None = None, seed: int = 0) -> list[CheckResult]:
    if corrupt is None:
        corrupt = os.environ.get(CORRUPT_ENV) or None
    rng = np.random.default_rng(seed)
    results = [check_grad(name, fn, arrs, corrupt=corrupt) for name, fn, arrs in op_checks(rng)]
    results.append(net_check(corrupt))
    results.extend(oracle_checks(corrupt))
    return results


def check_names() -> list[str]:
    names = [n for n, _, _ in op_checks(np.random.default_rng(0))]
    return names + ["spiking_net", "conv2d_vs_loops", "lif_vs_stepwise", "maxpool_vs_loops",
                    "ssim_identity", "power_iteration_vs_eigh"]
