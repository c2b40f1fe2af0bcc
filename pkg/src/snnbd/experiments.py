"""Experiment pipelines shared by the command line and the experiment scripts.

Each function depends only on (config, data) and returns plain rows.
Writing files is left to callers.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .attacks import (DynamicTrigger, PoisonPlan, Trigger, TriggerGenerator, TriggerSpec,
                      build_trigger, poison_dataset, train_dynamic)
from .config import ExperimentConfig
from .defenses import (fine_prune, histogram_rows, spectral_filter, strip_screen)
from .events import ConfigError, Dataset, read_frames, synth_dataset
from .metrics import AttackReport, asr, degradation, stealth_report, stealth_sample
from .snn import SpikingNet, evaluate, fit

log = logging.getLogger(__name__)

DEFAULT_RATES = (0.001, 0.005, 0.01, 0.05, 0.1)
ADAPTIVE_RATES = (0.001, 0.01)
STEALTH_BUDGETS = (0.01, 0.05, 0.1)


@dataclass
class Splits:
    train: Dataset
    test: Dataset
    holdout: Dataset


def load_splits(cfg: ExperimentConfig) -> Splits:
    """Synthesize the dataset, or read NMF1 files when paths are configured.

    The holdout (clean data the defender owns) is carved from the tail of the
    test split unless a separate file is given.
    """
    if cfg.n_train <= 0 or cfg.n_test <= 0:
        raise ConfigError("n_train and n_test must be positive")
    if cfg.train_path or cfg.test_path:
        if not (cfg.train_path and cfg.test_path):
            raise ConfigError("train_path and test_path must be given together")
        train = read_frames(cfg.train_path)
        test_all = read_frames(cfg.test_path)
    else:
        train, test_all = synth_dataset(cfg.synth(), cfg.data_seed)
    if cfg.holdout_path:
        return Splits(train, test_all, read_frames(cfg.holdout_path))
    if len(test_all) < cfg.n_test + cfg.n_holdout:
        raise ConfigError(f"test data holds {len(test_all)} samples, need n_test + n_holdout = "
                          f"{cfg.n_test + cfg.n_holdout}")
    test = test_all.subset(range(cfg.n_test))
    holdout = test_all.subset(range(cfg.n_test, cfg.n_test + cfg.n_holdout))
    return Splits(train, test, holdout)


def make_net(cfg: ExperimentConfig, seed: int | None = None) -> SpikingNet:
    return SpikingNet(cfg.net(), cfg.seed if seed is None else seed)


# -- checkpoints -------------------------------------------------------------


def opt_path(path: str | Path) -> Path:
    return Path(str(path) + ".opt")


def gen_path(path: str | Path) -> Path:
    return Path(str(path) + ".gen")


def save_model(path, net: SpikingNet) -> None:
    tn.save_tensors(path, net.state_arrays())


def load_model(path, cfg: ExperimentConfig) -> SpikingNet:
    net = make_net(cfg)
    net.load_state_arrays(tn.load_tensors(path))
    return net


def save_opt(path, opt: tn.AdamState, epochs_done: int) -> None:
    meta = np.array([epochs_done, opt.step], dtype=np.float32)
    tn.save_tensors(path, [meta, *opt.m, *opt.v])


def load_opt(path, n_params: int) -> tuple[tn.AdamState, int]:
    arrs = tn.load_tensors(path)
    if len(arrs) != 1 + 2 * n_params:
        raise tn.CheckpointError(f"{path}: optimizer state holds {len(arrs)} tensors, "
                                 f"expected {1 + 2 * n_params}")
    epochs_done, step = (int(v) for v in arrs[0])
    return tn.AdamState(step, arrs[1:1 + n_params], arrs[1 + n_params:]), epochs_done


def save_generator(path, gen: TriggerGenerator) -> None:
    tn.save_tensors(path, gen.state_arrays())


def load_generator(path, cfg: ExperimentConfig) -> TriggerGenerator:
    gen = TriggerGenerator(2, cfg.gen_width, cfg.seed)
    gen.load_state_arrays(tn.load_tensors(path))
    return gen


# -- clean training ----------------------------------------------------------


def train_clean(cfg: ExperimentConfig, splits: Splits, checkpoint: str | Path | None = None,
                resume: bool = False, on_epoch=None) -> tuple[SpikingNet, list[dict], int]:
    """Train on clean data. With a checkpoint, state is saved after every
    epoch; ``resume`` continues from it. Returns (net, new rows, first epoch)."""
    net = make_net(cfg)
    opt, start = tn.AdamState(), 0
    if resume and checkpoint and Path(checkpoint).exists() and opt_path(checkpoint).exists():
        net.load_state_arrays(tn.load_tensors(checkpoint))
        opt, start = load_opt(opt_path(checkpoint), len(net.params()))
        log.info("resuming from epoch %d", start)

    def hook(epoch, row):
        if checkpoint:
            save_model(checkpoint, net)
            save_opt(opt_path(checkpoint), opt, epoch + 1)
        if on_epoch is not None:
            on_epoch(epoch, row)

    _, hist = fit(net, splits.train, cfg.train(), eval_set=splits.test, opt=opt,
                  start_epoch=start, on_epoch=hook)
    return net, hist, start


def baseline_accuracy(cfg: ExperimentConfig, splits: Splits) -> float:
    """Baseline accuracy: from the configured baseline checkpoint, or a clean run with the same seed."""
    if cfg.baseline_checkpoint:
        return evaluate(load_model(cfg.baseline_checkpoint, cfg), splits.test)
    net, _, _ = train_clean(cfg, splits)
    return evaluate(net, splits.test)


# -- attacks -----------------------------------------------------------------


@dataclass
class AttackOutcome:
    net: SpikingNet
    trigger: Trigger
    report: AttackReport
    history: list[dict]
    poisoned: np.ndarray
    poisoned_set: Dataset
    generator: TriggerGenerator | None = None


def spec_row(spec: TriggerSpec) -> dict:
    loc = spec.location
    return {"kind": spec.kind, "polarity": spec.polarity, "size": spec.size,
            "location": loc if isinstance(loc, str) else f"{loc[0]};{loc[1]}",
            "clean_weight": spec.clean_weight, "budget": spec.budget}


def run_attack(cfg: ExperimentConfig, splits: Splits, baseline_acc: float | None = None) -> AttackOutcome:
    """Train a backdoored classifier per the configured trigger kind."""
    spec = cfg.trigger()
    spec.validate()
    if baseline_acc is None:
        baseline_acc = baseline_accuracy(cfg, splits)
    net = make_net(cfg)
    gen = None
    if spec.kind == "dynamic":
        gen = TriggerGenerator(2, cfg.gen_width, cfg.seed)
        res = train_dynamic(net, gen, splits.train, spec.clean_weight, spec.budget, cfg.target, cfg.train(),
                            test_set=splits.holdout)
        net, gen, history = res.net, res.gen, res.history
        trigger: Trigger = DynamicTrigger(gen, spec.budget)
        poisoned_idx = np.zeros(0, dtype=np.int64)
        poisoned_set = splits.train
    else:
        trigger = build_trigger(spec, splits.train)
        poisoned_set, poisoned_idx = poison_dataset(splits.train, trigger,
                                                    PoisonPlan(cfg.poison_rate, cfg.target), seed=cfg.seed)
        _, history = fit(net, poisoned_set, cfg.train(), eval_set=splits.test)
    acc = evaluate(net, splits.test)
    rate = asr(net, splits.test, trigger, cfg.target)
    report = AttackReport(baseline_acc, acc, rate, degradation(baseline_acc, acc),
                          spec=spec_row(spec), seed=cfg.seed)
    return AttackOutcome(net, trigger, report, history, poisoned_idx, poisoned_set, gen)


def restore_attack(cfg: ExperimentConfig, splits: Splits) -> tuple[SpikingNet, Trigger, Dataset, np.ndarray]:
    """Rebuild a saved backdoored model and its trigger; poisoning is replayed
    from the seed so ground-truth indices are available again."""
    spec = cfg.trigger()
    spec.validate()
    net = load_model(cfg.checkpoint, cfg)
    if spec.kind == "dynamic":
        gp = gen_path(cfg.checkpoint)
        if not gp.exists():
            raise FileNotFoundError(f"dynamic trigger needs generator weights at {gp}")
        trigger: Trigger = DynamicTrigger(load_generator(gp, cfg), spec.budget)
        return net, trigger, splits.train, np.zeros(0, dtype=np.int64)
    trigger = build_trigger(spec, splits.train)
    pset, idx = poison_dataset(splits.train, trigger, PoisonPlan(cfg.poison_rate, cfg.target), seed=cfg.seed)
    return net, trigger, pset, idx


REPORT_COLUMNS = ("kind", "poison_rate", "polarity", "size", "location", "clean_weight", "budget",
                  "baseline_acc", "clean_acc", "asr", "degradation", "seed")


def attack_cells(cfg: ExperimentConfig) -> list[dict]:
    """Expand grid axes into per-run overrides; empty axes take the scalar value."""
    kinds = cfg.kinds or (cfg.kind,)
    cells = []
    for kind in kinds:
        if kind == "dynamic":
            for a, g in itertools.product(cfg.clean_weights or (cfg.clean_weight,), cfg.budgets or (cfg.budget,)):
                cells.append({"kind": kind, "clean_weight": a, "budget": g})
            continue
        for e, s, p, loc in itertools.product(cfg.poison_rates or (cfg.poison_rate,), cfg.sizes or (cfg.size,),
                                              cfg.polarities or (cfg.polarity,),
                                              cfg.locations or (cfg.location,)):
            cells.append({"kind": kind, "poison_rate": e, "size": s, "polarity": p, "location": loc})
    return cells


def attack_grid(cfg: ExperimentConfig, splits: Splits, keep_last: bool = False):
    """One report row per grid cell, sharing a single baseline accuracy."""
    baseline = baseline_accuracy(cfg, splits)
    rows, last = [], None
    for cell in attack_cells(cfg):
        sub = dataclasses.replace(cfg, **cell)
        out = run_attack(sub, splits, baseline_acc=baseline)
        r = out.report
        rows.append({**r.spec, "poison_rate": sub.poison_rate, "baseline_acc": r.baseline_acc,
                     "clean_acc": r.clean_acc, "asr": r.asr, "degradation": r.degradation, "seed": r.seed})
        log.info("attack %s -> acc %.4f asr %.4f", cell, r.clean_acc, r.asr)
        last = out
    return (rows, last) if keep_last else rows


# -- defenses ----------------------------------------------------------------


@dataclass
class StripOutcome:
    rows: list[dict]
    summary: dict
    hist_clean: list[tuple[float, int]]
    hist_backdoor: list[tuple[float, int]]


def run_strip(cfg: ExperimentConfig, splits: Splits, net: SpikingNet, trigger: Trigger) -> StripOutcome:
    n = min(cfg.n_strip, len(splits.test))
    clean_idx = np.arange(n)
    nontarget = np.flatnonzero(splits.test.labels != cfg.target)[:n]
    clean = splits.test.frames[clean_idx]
    bad = trigger(splits.test.frames[nontarget], nontarget)
    rep = strip_screen(net, splits.holdout, np.concatenate([clean, bad]), cfg.frr, cfg.n_overlays, cfg.seed)
    h_clean, h_bad = rep.test_entropy[:n], rep.test_entropy[n:]
    f_clean, f_bad = rep.flags[:n], rep.flags[n:]
    rows = [{"set": "clean", "index": int(i), "entropy": float(h), "flagged": bool(f)}
            for i, h, f in zip(clean_idx, h_clean, f_clean)]
    rows += [{"set": "backdoor", "index": int(i), "entropy": float(h), "flagged": bool(f)}
             for i, h, f in zip(nontarget, h_bad, f_bad)]
    summary = {"threshold": rep.threshold, "frr": cfg.frr, "n_clean": n, "n_backdoor": len(nontarget),
               "false_rejection": float(np.mean(f_clean)), "detection": float(np.mean(f_bad)),
               "mean_entropy_clean": float(np.mean(h_clean)), "mean_entropy_backdoor": float(np.mean(h_bad))}
    return StripOutcome(rows, summary, histogram_rows(h_clean), histogram_rows(h_bad))


def run_spectral(cfg: ExperimentConfig, splits: Splits, net: SpikingNet, trigger: Trigger,
                 poisoned_set: Dataset, poisoned_idx: np.ndarray):
    rep = spectral_filter(net, poisoned_set, lambda: make_net(cfg), cfg.train(), cfg.target,
                          cfg.percentile, splits.test, trigger)
    planted = set(int(i) for i in poisoned_idx)
    removed = set(int(i) for i in rep.removed)
    rows = [{"index": int(i), "score": float(s), "removed": int(i) in removed, "poisoned": int(i) in planted}
            for i, s in zip(rep.candidates, rep.scores)]
    caught = len(planted & removed)
    summary = {"n_candidates": len(rep.candidates), "n_removed": len(removed), "n_poisoned": len(planted),
               "poisoned_removed": caught,
               "recall": caught / len(planted) if planted else float("nan"),
               "cutoff": rep.cutoff, "pre_clean_acc": rep.pre_clean_acc, "pre_asr": rep.pre_asr,
               "post_clean_acc": rep.post_clean_acc, "post_asr": rep.post_asr}
    return rows, summary


PRUNE_COLUMNS = ("prune_frac", "direction", "pruned", "pre_clean_acc", "pre_asr", "prune_clean_acc",
                 "prune_asr", "ft_clean_acc", "ft_asr")


def run_fineprune(cfg: ExperimentConfig, splits: Splits, net: SpikingNet, trigger: Trigger,
                  prune_fracs=None, direction: str | None = None) -> list[dict]:
    rows = []
    for prune_frac in (cfg.prune_fracs if prune_fracs is None else prune_fracs):
        r = fine_prune(net, splits.holdout, prune_frac, direction or cfg.prune_direction, cfg.finetune_epochs,
                       cfg.train(), splits.test, trigger, cfg.target)
        rows.append({"prune_frac": prune_frac, "direction": r.direction, "pruned": [int(c) for c in r.pruned],
                     "pre_clean_acc": r.pre_clean_acc, "pre_asr": r.pre_asr,
                     "prune_clean_acc": r.prune_clean_acc, "prune_asr": r.prune_asr,
                     "ft_clean_acc": r.ft_clean_acc, "ft_asr": r.ft_asr})
    return rows


ADAPTIVE_COLUMNS = ("kind", "poison_rate", "prune_frac", "direction", "pre_clean_acc", "pre_asr", "prune_clean_acc",
                    "prune_asr", "ft_clean_acc", "ft_asr")


def run_adaptive(cfg: ExperimentConfig, splits: Splits) -> list[dict]:
    """Low poisoning rate attacks followed by fine-pruning at every prune_frac."""
    from .defenses import adaptive_sweep

    kinds = cfg.kinds or ("static", "moving")
    rates = cfg.poison_rates or ADAPTIVE_RATES
    cells = [{"kind": k, "poison_rate": e, "prune_frac": t} for k in kinds for e in rates for t in cfg.prune_fracs]
    trained: dict[tuple, AttackOutcome] = {}
    baseline = baseline_accuracy(cfg, splits)

    def run_cell(cell):
        key = (cell["kind"], cell["poison_rate"])
        if key not in trained:
            sub = dataclasses.replace(cfg, kind=cell["kind"], poison_rate=cell["poison_rate"])
            trained[key] = run_attack(sub, splits, baseline_acc=baseline)
        out = trained[key]
        return run_fineprune(cfg, splits, out.net, out.trigger, prune_fracs=(cell["prune_frac"],))[0]

    rows = adaptive_sweep(cells, run_cell)
    for r in rows:
        r["direction"] = cfg.prune_direction
    return rows


# -- stealth -----------------------------------------------------------------

STEALTH_COLUMNS = ("label", "kind", "polarity", "budget", "mean_ssim", "min_ssim", "mean_mse")


def run_stealth(cfg: ExperimentConfig, splits: Splits, generator: TriggerGenerator | None = None) -> list[dict]:
    """SSIM/MSE of triggered versus clean test samples on a fixed random subset."""
    idx = stealth_sample(len(splits.test), cfg.n_stealth, cfg.seed)
    x = splits.test.frames[idx]
    rows = []

    def add(label, kind, pol, budget, triggered):
        r = stealth_report(x, triggered)
        rows.append({"label": label, "kind": kind, "polarity": pol, "budget": budget,
                     "mean_ssim": r.mean_ssim, "min_ssim": r.min_ssim, "mean_mse": r.mean_mse})

    add("identical", "none", "", "", x.copy())
    for kind in ("static", "moving"):
        for p in cfg.polarities or (0, 1, 2, 3):
            trig = build_trigger(cfg.trigger(kind=kind, polarity=p))
            add(f"{kind}-p{p}", kind, p, "", trig(x, idx))
    if generator is None:
        generator = TriggerGenerator(2, cfg.gen_width, cfg.seed)
    for g in cfg.budgets or STEALTH_BUDGETS:
        add(f"dynamic-budget{g}", "dynamic", "", g, DynamicTrigger(generator, g)(x, idx))
    return rows
