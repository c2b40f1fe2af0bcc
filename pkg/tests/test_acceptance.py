"""Desk-scale acceptance run on the synthetic moving-square data.

Each test prints one ``Cn PASS|FAIL ...`` line; the lines are repeated in the
terminal summary. Thresholds are checked as stated, never relaxed.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from snnbd import tensor as tn
from snnbd.attacks import (DynamicTrigger, apply_moving, build_trigger, compute_mask_activity,
                           moving_columns, select_smart)
from snnbd.cli import main
from snnbd.config import ExperimentConfig
from snnbd.defenses import (empirical_quantile, fine_prune, normalized_entropy, prune_count,
                            spectral_outliers, spectral_scores, top_singular_direction)
from snnbd.events import Dataset
from snnbd.experiments import load_splits, make_net, run_attack
from snnbd.gradcheck import run_all
from snnbd.metrics import asr, ssim_frames, stealth_report, stealth_sample
from snnbd.snn import evaluate, fit

pytestmark = pytest.mark.acceptance

CFG = ExperimentConfig()  # 32x32, T=16, 4 classes, 1000 train / 200 test / 200 holdout


def record(key: str, ok: bool, detail: str) -> None:
    line = f"{key} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)


def points(a: float, b: float) -> float:
    """Accuracy change in percentage points."""
    return (b - a) * 100.0


@pytest.fixture(scope="module")
def splits():
    return load_splits(CFG)


@pytest.fixture(scope="module")
def clean(splits):
    """Clean training, one epoch at a time up to 15; the baseline is taken at the attack recipe's epoch count."""
    net = make_net(CFG)
    opt = tn.AdamState()
    accs, reached, t_reach = [], None, math.nan
    t0 = time.perf_counter()
    for e in range(15):
        fit(net, splits.train, dataclasses.replace(CFG.train(), epochs=e + 1), opt=opt, start_epoch=e)
        accs.append(evaluate(net, splits.test))
        if reached is None and accs[-1] >= 0.95:
            reached, t_reach = e + 1, time.perf_counter() - t0
        if reached is not None and e + 1 >= CFG.epochs:
            break
    return {"net": net, "accs": accs, "reached": reached, "seconds": t_reach,
            "baseline": accs[CFG.epochs - 1] if len(accs) >= CFG.epochs else accs[-1]}


@pytest.fixture(scope="module")
def static_attack(splits, clean):
    return run_attack(CFG, splits, clean["baseline"])


@pytest.fixture(scope="module")
def dynamic_half(splits, clean):
    return run_attack(dataclasses.replace(CFG, kind="dynamic", clean_weight=0.5, budget=0.1), splits, clean["baseline"])


def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    results = run_all()
    secs = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    ok = all(r.error < 1e-4 for r in results) and secs < 30
    record("C1", ok, f"{len(results)} checks, max rel err {worst.error:.2e} ({worst.name}), {secs:.1f}s")
    assert ok


def test_c2_clean_baseline(clean):
    ok = clean["reached"] is not None and clean["seconds"] < 120
    record("C2", ok, f"acc>=0.95 at epoch {clean['reached']} after {clean['seconds']:.1f}s; "
                     f"accs {[round(a, 3) for a in clean['accs']]}")
    assert ok


def test_c3_static_attack(splits, clean, static_attack):
    rep = static_attack.report
    drop = points(rep.baseline_acc, rep.clean_acc)
    natural = asr(clean["net"], splits.test, static_attack.trigger, CFG.target)
    ok = rep.asr >= 0.99 and drop >= -5
    record("C3", ok, f"ASR {rep.asr:.3f}, acc {rep.baseline_acc:.3f}->{rep.clean_acc:.3f} ({drop:+.1f} pts); "
                     f"clean-model ASR {natural:.3f}")
    assert ok


def test_c4_moving_attack(splits, clean):
    out = run_attack(dataclasses.replace(CFG, kind="moving"), splits, clean["baseline"])
    # brute-force: locate the stamped square in every frame of a blank input
    blank = np.zeros((CFG.frames, 2, CFG.height, CFG.width), np.float32)
    lit = apply_moving(blank, CFG.trigger(kind="moving"))
    pos = []
    for t in range(CFG.frames):
        ys, xs = np.nonzero(lit[t].any(axis=0))
        pos.append((int(ys.min()), int(xs.min())))
    side = int(math.isqrt(int(lit[0].any(axis=0).sum())))
    distinct = len(set(pos)) == CFG.frames
    expected = [c for _, c in pos] == moving_columns(0, side, CFG.width, CFG.frames, CFG.move_step)
    ok = out.report.asr >= 0.95 and distinct and expected
    record("C4", ok, f"ASR {out.report.asr:.3f}, acc {out.report.clean_acc:.3f}, "
                     f"{len(set(pos))}/{CFG.frames} distinct positions")
    assert ok


def _brute_select(frames: np.ndarray, c: int, most: bool, least: bool, b: float = 0.5):
    n, _, _, H, W = frames.shape
    k = (c + 1) ** 2
    act, hist = np.zeros(k), np.zeros((k, 4), int)
    for x in frames:
        for f in x:
            for i in range(H):
                for j in range(W):
                    code = int(f[0, i, j] >= b) + 2 * int(f[1, i, j] >= b)
                    ti = min(r for r in range(c + 1) if i < (r + 1) * H // (c + 1))
                    tj = min(r for r in range(c + 1) if j < (r + 1) * W // (c + 1))
                    tile = ti * (c + 1) + tj
                    hist[tile, code] += 1
                    act[tile] += code != 0
    act /= n
    tile = int(np.flatnonzero(act == (act.max() if most else act.min()))[0])
    h = hist[tile]
    return tile, int(np.flatnonzero(h == (h.min() if least else h.max()))[0])


def test_c5_smart_attack(splits, clean):
    r = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(50):
        c = int(r.integers(1, 4))
        H, W = int(r.integers(c + 1, 12)), int(r.integers(c + 1, 12))
        frames = r.random((int(r.integers(1, 4)), 2, 2, H, W)) ** 2
        act = compute_mask_activity(Dataset(frames, np.zeros(len(frames), int), 1), c)
        for most in (True, False):
            for least in (True, False):
                mismatches += select_smart(act, most, least) != _brute_select(frames, c, most, least)
    centre = np.zeros((4, 4, 2, 32, 32), np.float32)
    centre[:, :, 1, 13:19, 13:19] = 1.0
    centre_tile = select_smart(compute_mask_activity(Dataset(centre, [0, 1, 2, 3], 4), 2), True, True)[0]
    out = run_attack(dataclasses.replace(CFG, kind="smart", poison_rate=0.05), splits, clean["baseline"])
    ok = mismatches == 0 and centre_tile == 4 and out.report.asr >= 0.95
    record("C5", ok, f"{mismatches} brute-force mismatches over 50 datasets, centre tile {centre_tile}, "
                     f"ASR {out.report.asr:.3f} ({out.trigger.describe()})")
    assert ok


def test_c6_dynamic_attack(splits, clean, dynamic_half):
    x = splits.test.frames
    triggered = dynamic_half.trigger(x)
    excess = float(np.max(np.abs(triggered.astype(np.float64) - x.astype(np.float64)))) - 0.1
    half = dynamic_half.report
    full = run_attack(dataclasses.replace(CFG, kind="dynamic", clean_weight=1.0, budget=0.1), splits, clean["baseline"]).report
    ok_budget = excess <= 0
    ok_half = half.asr >= 0.90 and points(clean["baseline"], half.clean_acc) >= -5
    ok_full = abs(points(clean["baseline"], full.clean_acc)) <= 1
    ok = ok_budget and ok_half and ok_full
    record("C6", ok, f"budget max|d|-budget {excess:.2e}; weight 0.5: ASR {half.asr:.3f} acc {half.clean_acc:.3f}; "
                     f"weight 1: acc {full.clean_acc:.3f} vs clean {clean['baseline']:.3f} (ASR {full.asr:.3f})")
    assert ok


def test_c7_stealth_ordering(splits, dynamic_half):
    idx = stealth_sample(len(splits.test), 16, CFG.seed)
    x = splits.test.frames[idx]
    gen = dynamic_half.generator
    dyn = [stealth_report(x, DynamicTrigger(gen, g)(x)).mean_ssim for g in (0.01, 0.05, 0.1)]
    static = stealth_report(x, build_trigger(CFG.trigger(kind="static", polarity=3, size=0.1))(x, idx)).mean_ssim
    identity = ssim_frames(x[0], x[0])
    ok = dyn[0] > static and abs(identity - 1) <= 1e-6 and dyn[0] >= dyn[1] >= dyn[2]
    record("C7", ok, f"SSIM dynamic g=0.01/0.05/0.1 = {dyn[0]:.5f}/{dyn[1]:.5f}/{dyn[2]:.5f}, "
                     f"static {static:.5f}, identity {identity:.8f}")
    assert ok


def test_c8_strip_mechanics():
    uniform = normalized_entropy(np.full((3, 4), 0.5))
    onehot = normalized_entropy(np.eye(4))
    scores = np.random.default_rng(8).permutation(np.arange(200) / 199.0)
    thr = empirical_quantile(scores, 0.01)
    ok = (np.abs(uniform - 1).max() <= 1e-9 and np.abs(onehot).max() <= 1e-9
          and thr == np.sort(scores)[1])
    record("C8", ok, f"uniform {uniform[0]:.12f}, one-hot {onehot.max():.1e}, frr=0.01 threshold {thr:.6f} "
                     f"(2nd smallest of 200)")
    assert ok


def test_c9_spectral_signatures():
    r = np.random.default_rng(9)
    n, d = 200, 16
    f = r.standard_normal((n, d))
    planted = r.choice(n, n // 5, replace=False)
    f[planted] += 10.0 * np.ones(d) / math.sqrt(d)  # +10 sigma along a fixed unit direction
    removed, _ = spectral_outliers(spectral_scores(f), 85)
    recall = float(np.isin(planted, removed).mean())
    worst = 0.0
    for _ in range(20):
        m = r.standard_normal((8, 8))
        v = top_singular_direction(m, tol=1e-12, max_iter=10_000)
        ref = np.linalg.eigh(m.T @ m)[1][:, -1]
        worst = max(worst, min(np.abs(v - ref).max(), np.abs(v + ref).max()))
    ok = recall >= 0.8 and worst <= 1e-6
    record("C9", ok, f"recall {recall:.3f} ({len(removed)} removed of {n}, {len(planted)} planted); "
                     f"power-iteration vs eigh max diff {worst:.1e}")
    assert ok


def test_c10_fine_pruning(splits, static_attack, clean):
    # mechanics: exact channel count, zero through fine-tuning
    work = fine_prune(static_attack.net, splits.holdout, 0.5, fine_tune_epochs=1, train_cfg=CFG.train())
    k = len(work.channel_activity)
    _, taps = work.net.forward(splits.test.frames[:4], taps=("last_conv",))
    mech = (len(work.pruned) == prune_count(0.5, k) == math.ceil(0.5 * k)
            and np.all(work.net.last_conv.mask[work.pruned] == 0)
            and not taps["last_conv"][:, :, work.pruned].any())

    def prune(net, trigger, direction="least"):
        return fine_prune(net, splits.holdout, 0.5, direction, CFG.finetune_epochs, CFG.train(),
                          splits.test, trigger, CFG.target)

    res = prune(static_attack.net, static_attack.trigger)
    drop = points(res.pre_asr, res.ft_asr)
    acc = points(res.pre_clean_acc, res.ft_clean_acc)
    most = prune(static_attack.net, static_attack.trigger, "most")
    low = run_attack(dataclasses.replace(CFG, poison_rate=0.001), splits, clean["baseline"])
    lres = prune(low.net, low.trigger)
    ok = mech and drop <= -30 and abs(acc) <= 3 and lres.ft_asr >= 0.8
    record("C10", ok, f"mechanics {'ok' if mech else 'BROKEN'}; rate 0.1 least: ASR {res.pre_asr:.3f}->{res.ft_asr:.3f} "
                      f"({drop:+.1f} pts), acc {acc:+.1f} pts; rate 0.001 post ASR {lres.ft_asr:.3f} "
                      f"(pre {lres.pre_asr:.3f}); most: ASR {most.ft_asr:.3f} acc {most.ft_clean_acc:.3f}")
    assert ok


TINY = ["height=16", "width=16", "frames=4", "side=4", "n_train=24", "n_test=8", "n_holdout=8",
        "conv_channels=4", "batch_size=8", "epochs=2", "gen_width=4", "n_strip=4", "n_overlays=4",
        "n_stealth=4", "finetune_epochs=1", "prune_fracs=0.0,0.5", "poison_rate=0.25"]

RUNS = [
    ("gen-data", (), ()),
    ("train", (), ("metrics.csv",)),
    ("attack", ("poison_rates=0.1,0.25",), ("attack_report.csv",)),
    ("attack", ("kind=smart",), ("attack_report.csv", "attack_metrics.csv", "poisoned_indices.csv")),
    ("attack", ("kind=dynamic",), ("attack_report.csv", "attack_metrics.csv")),
    ("defend", ("defense=strip",), ("strip_scores.csv", "strip_summary.csv", "strip_hist_clean.csv",
                                    "strip_hist_backdoor.csv")),
    ("defend", ("defense=spectral",), ("spectral_scores.csv", "spectral_summary.csv")),
    ("defend", ("defense=fine-prune",), ("fineprune.csv",)),
    ("defend", ("defense=adaptive", "prune_fracs=0.5"), ("adaptive.csv",)),
    ("stealth", (), ("stealth.csv",)),
    ("selfcheck", (), ()),
]


def test_c11_determinism(tmp_path):
    diffs, compared = [], 0
    for i, (cmd, extra, csvs) in enumerate(RUNS):
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{i}{rep}"
            args = [cmd, "-o", str(out)]
            for kv in TINY + list(extra):
                args += ["-s", kv]
            assert main(args) == 0, (cmd, extra)
            outs.append(out)
        names = csvs or tuple(p.name for p in outs[0].glob("*.csv"))
        for name in names:
            compared += 1
            if (outs[0] / name).read_bytes() != (outs[1] / name).read_bytes():
                diffs.append(f"{cmd}:{name}")
    ok = not diffs
    record("C11", ok, f"{compared} CSV files over {len(RUNS)} commands re-run byte-identical"
                      + (f"; differing: {diffs}" if diffs else ""))
    assert ok
