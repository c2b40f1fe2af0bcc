"""Attack effectiveness and trigger stealthiness measures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .events import Dataset, FrameTensor, PreconditionError
from .snn import predict

SSIM_WINDOW = 8


class UndefinedMetricError(ValueError):
    pass


@dataclass
class AttackReport:
    baseline_acc: float
    clean_acc: float
    asr: float
    degradation: float
    spec: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class StealthReport:
    mean_ssim: float
    min_ssim: float
    mean_mse: float
    per_frame_ssim: list[float]


def asr(net, test_set: Dataset, trigger, target: int) -> float:
    """Fraction of triggered non-target samples classified as ``target``."""
    keep = np.flatnonzero(test_set.labels != target)
    if len(keep) == 0:
        raise UndefinedMetricError("every test sample already has the target label")
    poisoned = trigger(test_set.frames[keep], keep)
    return float(np.mean(predict(net, poisoned) == target))


def degradation(baseline: float, current: float) -> float:
    """Signed percent change of clean accuracy relative to the baseline."""
    if baseline == 0:
        raise UndefinedMetricError("baseline accuracy is zero")
    return (current - baseline) / baseline * 100.0


def _frames(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, FrameTensor):
        return x.data, x.normalized
    a = np.asarray(x)
    return a, bool(a.size == 0 or (a.min() >= 0 and a.max() <= 1))


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, L: float = 1.0) -> np.ndarray:
    """Local SSIM for every stride-1 uniform window over the last two axes.

    All window moments are population (1/N) moments.
    """
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_per_frame(x, triggered) -> np.ndarray:
    xa, xn = _frames(x)
    ya, yn = _frames(triggered)
    if xa.shape != ya.shape:
        raise PreconditionError(f"shape mismatch {xa.shape} vs {ya.shape}")
    if not (xn and yn):
        raise PreconditionError("SSIM needs normalized frames in [0, 1]")
    m = ssim_map(xa, ya)  # (T, P, H', W')
    return m.mean(axis=(-2, -1)).mean(axis=-1)


def ssim_frames(x, triggered) -> float:
    """Window mean, then channel mean, then frame mean."""
    return float(ssim_per_frame(x, triggered).mean())


def mse_frames(x, triggered) -> float:
    xa, _ = _frames(x)
    ya, _ = _frames(triggered)
    if xa.shape != ya.shape:
        raise PreconditionError(f"shape mismatch {xa.shape} vs {ya.shape}")
    d = xa.astype(np.float64) - ya.astype(np.float64)
    return float(np.mean(d * d))


def stealth_report(clean: np.ndarray, poisoned: np.ndarray) -> StealthReport:
    """SSIM/MSE over matched (n, T, P, H, W) stacks of clean and triggered samples."""
    if clean.shape != poisoned.shape:
        raise PreconditionError(f"shape mismatch {clean.shape} vs {poisoned.shape}")
    per_sample = []
    per_frame = []
    mses = []
    for x, y in zip(clean, poisoned):
        f = ssim_per_frame(x, y)
        per_frame.append(f)
        per_sample.append(f.mean())
        mses.append(mse_frames(x, y))
    pf = np.mean(per_frame, axis=0)
    return StealthReport(float(np.mean(per_sample)), float(np.min(per_sample)),
                         float(np.mean(mses)), [float(v) for v in pf])


def stealth_sample(n: int, k: int = 16, seed: int = 0) -> np.ndarray:
    """Indices of the k randomly chosen test samples stealth is averaged over."""
    rng = np.random.default_rng([seed, 17])
    return np.sort(rng.choice(n, size=min(k, n), replace=False))
