"""Backdoor defenses adapted to frame sequences and spiking classifiers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .events import Dataset
from .metrics import asr as attack_success
from .snn import SpikingNet, TrainConfig, evaluate, fit
from . import tensor as tn

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-9
PRUNE_GRID = (0.0, 0.1, 0.3, 0.5, 0.8)


class DefenseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# STRIP


@dataclass
class EntropyReport:
    holdout_entropy: np.ndarray
    test_entropy: np.ndarray
    threshold: float
    flags: np.ndarray
    frr: float


def normalized_entropy(rates: np.ndarray) -> np.ndarray:
    """Entropy of rate vectors turned into distributions, divided by log C.

    An all-silent output carries no preference and is treated as uniform.
    """
    r = np.atleast_2d(np.asarray(rates, dtype=np.float64))
    k = r.shape[1]
    s = r.sum(axis=1, keepdims=True)
    p = np.where(s > 0, r / np.where(s > 0, s, 1.0), 1.0 / k)
    h = -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1)
    return h / math.log(k)


def superpose(candidate: np.ndarray, overlays: np.ndarray) -> np.ndarray:
    """Frame-by-frame blend: frame t of the candidate plus frame t of each overlay, clipped to [0, 1]."""
    return np.clip(candidate[None] + overlays, 0.0, 1.0).astype(np.float32)


def overlay_indices(pool_size: int, n_overlays: int, seed) -> np.ndarray:
    if pool_size == 0:
        raise DefenseError("overlay pool is empty")
    if pool_size < n_overlays:
        raise DefenseError(f"pool of {pool_size} is smaller than n_overlays={n_overlays}")
    if pool_size == n_overlays:
        return np.arange(pool_size)
    return np.random.default_rng(seed).choice(pool_size, size=n_overlays, replace=False)


def strip_score(net, candidate: np.ndarray, pool: np.ndarray, n_overlays: int = 64, seed=0) -> float:
    """Mean normalized prediction entropy of the candidate blended with overlays."""
    idx = overlay_indices(len(pool), n_overlays, seed)
    rates = net.rates(superpose(np.asarray(candidate), np.asarray(pool)[idx]))
    return float(np.mean(normalized_entropy(rates)))


def empirical_quantile(scores: np.ndarray, q: float) -> float:
    """Smallest score s with empirical CDF(s) >= q."""
    return float(np.quantile(np.asarray(scores), q, method="inverted_cdf"))


def strip_screen(net, holdout: Dataset, test_frames: np.ndarray, frr: float = 0.01,
                 n_overlays: int = 64, seed: int = 0) -> EntropyReport:
    """Flag test inputs whose entropy falls below the clean frr-quantile."""
    pool = holdout.frames
    hold = np.array([strip_score(net, x, pool, n_overlays, [seed, 0, i]) for i, x in enumerate(pool)])
    test = np.array([strip_score(net, x, pool, n_overlays, [seed, 1, i]) for i, x in enumerate(test_frames)])
    thr = empirical_quantile(hold, frr)
    return EntropyReport(hold, test, thr, test < thr, frr)


def histogram_rows(values: np.ndarray, bins: int = 20) -> list[tuple[float, int]]:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2
    return [(float(c), int(n)) for c, n in zip(centers, counts)]


# ---------------------------------------------------------------------------
# spectral signatures


@dataclass
class SpectralReport:
    scores: np.ndarray
    cutoff: float
    removed: np.ndarray  # indices into the poisoned training set
    candidates: np.ndarray  # indices scored (those carrying the target label)
    pre_clean_acc: float = float("nan")
    pre_asr: float = float("nan")
    post_clean_acc: float = float("nan")
    post_asr: float = float("nan")
    net: SpikingNet | None = None


def top_singular_direction(m: np.ndarray, tol: float = 1e-8, max_iter: int = 1000,
                           seed: int = 0) -> np.ndarray:
    """Top right-singular vector of ``m`` by power iteration.

    Iterates on whichever Gram matrix is smaller. Returns the zero vector
    when ``m`` is identically zero.
    """
    m = np.asarray(m, dtype=np.float64)
    n, d = m.shape
    if not np.any(m):
        return np.zeros(d)
    rng = np.random.default_rng(seed)
    use_rows = n < d
    g = m @ m.T if use_rows else m.T @ m
    v = rng.standard_normal(g.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = g @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return np.zeros(d)
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    if use_rows:
        v = m.T @ v
        v /= np.linalg.norm(v)
    # sign convention: largest-magnitude entry positive
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def spectral_scores(features: np.ndarray, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Squared projection of centred features onto their top singular direction."""
    f = np.asarray(features, dtype=np.float64)
    centred = f - f.mean(axis=0, keepdims=True)
    v = top_singular_direction(centred, tol, max_iter)
    return (centred @ v) ** 2


def spectral_outliers(scores: np.ndarray, percentile: float = 85.0) -> tuple[np.ndarray, float]:
    """Positions whose score ranks above the percentile; ties keep lower positions first."""
    n = len(scores)
    cutoff = float(np.percentile(scores, percentile)) if n else float("nan")
    k = n - 1 - math.floor(percentile / 100.0 * (n - 1)) if n else 0
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:k]), cutoff


def spectral_filter(net: SpikingNet, poisoned: Dataset, make_net: Callable[[], SpikingNet],
                    train_cfg: TrainConfig, target: int = 0, percentile: float = 85.0,
                    test_set: Dataset | None = None, trigger=None, retrain: bool = True) -> SpectralReport:
    cand = np.flatnonzero(poisoned.labels == target)
    if len(cand) < 2:
        raise DefenseError(f"need >= 2 samples labelled {target}, found {len(cand)}")
    feats = net.features(poisoned.frames[cand])
    scores = spectral_scores(feats)
    pos, cutoff = spectral_outliers(scores, percentile)
    removed = cand[pos]
    rep = SpectralReport(scores, cutoff, removed, cand)
    if test_set is not None:
        rep.pre_clean_acc = evaluate(net, test_set)
        if trigger is not None:
            rep.pre_asr = attack_success(net, test_set, trigger, target)
    if retrain:
        keep = np.setdiff1d(np.arange(len(poisoned)), removed)
        fresh = make_net()
        fit(fresh, poisoned.subset(keep), train_cfg)
        rep.net = fresh
        if test_set is not None:
            rep.post_clean_acc = evaluate(fresh, test_set)
            if trigger is not None:
                rep.post_asr = attack_success(fresh, test_set, trigger, target)
    return rep


# ---------------------------------------------------------------------------
# fine-pruning


@dataclass
class PruneResult:
    prune_frac: float
    direction: str
    pruned: np.ndarray
    channel_activity: np.ndarray
    pre_clean_acc: float = float("nan")
    pre_asr: float = float("nan")
    prune_clean_acc: float = float("nan")
    prune_asr: float = float("nan")
    ft_clean_acc: float = float("nan")
    ft_asr: float = float("nan")
    net: SpikingNet | None = None


def prune_count(prune_frac: float, k: int) -> int:
    # round first so 0.3 * 10 does not ceil to 4
    return int(math.ceil(round(prune_frac * k, 9)))


def channel_activity(net: SpikingNet, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Mean post-LIF output per channel of the last conv layer."""
    total, count = None, 0
    with tn.no_grad():
        for i in range(0, len(frames), batch_size):
            _, taps = net.forward(frames[i:i + batch_size], taps=("last_conv",))
            a = taps["last_conv"]  # (T, B, C, H, W)
            s = a.sum(axis=(0, 1, 3, 4))
            total = s if total is None else total + s
            count += a.shape[0] * a.shape[1] * a.shape[3] * a.shape[4]
    return total / count


def fine_prune(net: SpikingNet, holdout: Dataset, prune_frac: float, direction: str = "least",
               fine_tune_epochs: int = 5, train_cfg: TrainConfig | None = None,
               test_set: Dataset | None = None, trigger=None, target: int = 0) -> PruneResult:
    """Zero ceil(prune_frac*K) last-conv channels ranked by clean activation, then
    fine-tune the masked copy on the clean holdout."""
    if not 0 <= prune_frac < 1:
        raise DefenseError("prune_frac must lie in [0, 1)")
    if direction not in ("least", "most"):
        raise DefenseError("direction must be 'least' or 'most'")
    work = net.copy()
    layer = work.last_conv
    acts = channel_activity(work, holdout.frames)
    k = len(acts)
    order = np.argsort(acts if direction == "least" else -acts, kind="stable")
    pruned = np.sort(order[:prune_count(prune_frac, k)])
    res = PruneResult(prune_frac, direction, pruned, acts)

    def measure(model):
        if test_set is None:
            return float("nan"), float("nan")
        a = evaluate(model, test_set)
        r = attack_success(model, test_set, trigger, target) if trigger is not None else float("nan")
        return a, r

    res.pre_clean_acc, res.pre_asr = measure(net)
    if len(pruned):
        mask = np.ones(k, dtype=np.float32) if layer.mask is None else layer.mask.copy()
        mask[pruned] = 0.0
        layer.mask = mask
    res.prune_clean_acc, res.prune_asr = measure(work)
    if fine_tune_epochs > 0:
        base = train_cfg or TrainConfig()
        cfg = TrainConfig(epochs=fine_tune_epochs, batch_size=base.batch_size, lr=base.lr, seed=base.seed + 1)
        fit(work, holdout, cfg)
    res.ft_clean_acc, res.ft_asr = measure(work)
    res.net = work
    return res


# ---------------------------------------------------------------------------
# adaptive attacker sweep

SWEEP_METRICS = ("pre_clean_acc", "pre_asr", "prune_clean_acc", "prune_asr", "ft_clean_acc", "ft_asr")


def adaptive_sweep(cells: Sequence[dict], run_cell: Callable[[dict], dict]) -> list[dict]:
    """Run attack->defense per grid cell; rows carry the cell keys plus the six metrics."""
    if not cells:
        raise DefenseError("empty grid")
    rows = []
    for cell in cells:
        metrics = run_cell(cell)
        missing = [m for m in SWEEP_METRICS if m not in metrics]
        if missing:
            raise DefenseError(f"cell {cell} returned no {missing}")
        rows.append({**cell, **{m: metrics[m] for m in SWEEP_METRICS}})
    return rows
