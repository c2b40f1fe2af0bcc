"""Command-line driver: gen-data, train, attack, defend, stealth, selfcheck."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex
from . import svg
from .attacks import PlacementError, SpecError
from .config import ConfigFileError, ExperimentConfig, load_config
from .defenses import DefenseError
from .events import ConfigError, write_frames
from .outputs import OUT_DIR_ENV, Manifest, atomic_write_text, read_csv, write_csv

log = logging.getLogger("snnbd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigFileError, ConfigError, SpecError, PlacementError, DefenseError)
DEFENSES = ("strip", "spectral", "fine-prune", "adaptive")

class Run:
    """Per-command context holding the resolved config and its output manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.manifest = Manifest(command, cfg.digest(), out)
        out.mkdir(parents=True, exist_ok=True)
        self.manifest.add("config", atomic_write_text(out / f"config_{command}.txt", cfg.dumps()))

    def csv(self, name: str, header, rows) -> Path:
        path = write_csv(self.out / name, header, rows)
        self.manifest.add(name, path)
        return path

    def path(self, name: str) -> Path:
        p = self.out / name
        self.manifest.add(name, p)
        return p

    def splits(self) -> ex.Splits:
        for p in (self.cfg.train_path, self.cfg.test_path, self.cfg.holdout_path):
            if p:
                self.manifest.add_input(p)
        return ex.load_splits(self.cfg)

# -- commands ----------------------------------------------------------------

def cmd_gen_data(run: Run) -> int:
    cfg = run.cfg
    if cfg.n_train <= 0 or cfg.n_test <= 0:
        raise ConfigError("n_train and n_test must be positive")
    cfg.synth().validate()
    from .events import synth_dataset
    train, test = synth_dataset(cfg.synth(), cfg.data_seed)
    for name, ds in (("train.nmf", train), ("test.nmf", test)):
        write_frames(run.path(name), ds)
        print(f"{name}: n={len(ds)} dims={ds.dims}")
    return EXIT_OK

def cmd_train(run: Run) -> int:
    cfg = run.cfg
    splits = run.splits()
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else run.out / "model.ckp"
    metrics = run.out / "metrics.csv"
    header = ("epoch", "loss", "clean_acc")
    rows: list[dict] = []

    def on_epoch(epoch, row):
        rows.append(row)
        write_csv(metrics, header, rows)

    if cfg.resume and ckpt.exists() and ex.opt_path(ckpt).exists():
        _, start = ex.load_opt(ex.opt_path(ckpt), len(ex.make_net(cfg).params()))
        if metrics.exists():
            rows.extend(r for r in read_csv(metrics) if int(r["epoch"]) <= start)
    net, hist, start = ex.train_clean(cfg, splits, ckpt, cfg.resume, on_epoch)
    write_csv(metrics, header, rows)
    run.manifest.add("checkpoint", ckpt)
    run.manifest.add("metrics.csv", metrics)
    eps = [float(r["epoch"]) for r in rows]
    svg.line_chart(run.path("metrics.svg"), {"clean_acc": (eps, [float(r["clean_acc"]) for r in rows]),
                                             "loss": (eps, [float(r["loss"]) for r in rows])},
                   title="clean training", xlabel="epoch")
    print(f"trained epochs {start + 1}..{cfg.epochs}; final clean_acc={rows[-1]['clean_acc']}")
    return EXIT_OK

def cmd_attack(run: Run) -> int:
    cfg = run.cfg
    splits = run.splits()
    if cfg.baseline_checkpoint:
        run.manifest.add_input(cfg.baseline_checkpoint)
    rows, last = ex.attack_grid(cfg, splits, keep_last=True)
    run.csv("attack_report.csv", ex.REPORT_COLUMNS, rows)
    if len(rows) == 1:
        ckpt = Path(cfg.checkpoint) if cfg.checkpoint else run.out / "backdoor.ckp"
        ex.save_model(ckpt, last.net)
        run.manifest.add("checkpoint", ckpt)
        if last.generator is not None:
            ex.save_generator(ex.gen_path(ckpt), last.generator)
            run.manifest.add("generator", ex.gen_path(ckpt))
        hcols = ("epoch", "loss", "clean_acc") + (("asr",) if "asr" in last.history[0] else ())
        run.csv("attack_metrics.csv", hcols, last.history)
        run.csv("poisoned_indices.csv", ("index",), [[int(i)] for i in last.poisoned])
    labels = [_cell_label(r) for r in rows]
    svg.bar_chart(run.path("attack_asr.svg"), labels, [r["asr"] for r in rows], title="attack success rate",
                  ylabel="ASR")
    for r, lab in zip(rows, labels):
        print(f"{lab}: clean_acc={r['clean_acc']:.4f} asr={r['asr']:.4f} degradation={r['degradation']:.2f}")
    return EXIT_OK

def _cell_label(row: dict) -> str:
    if row["kind"] == "dynamic":
        return f"dynamic w={row['clean_weight']} b={row['budget']}"
    return f"{row['kind']} rate={row['poison_rate']} size={row['size']} pol={row['polarity']}"

def _backdoored(run: Run, splits: ex.Splits):
    cfg = run.cfg
    if cfg.checkpoint:
        run.manifest.add_input(cfg.checkpoint)
        return ex.restore_attack(cfg, splits)
    out = ex.run_attack(cfg, splits, baseline_acc=float("nan"))
    return out.net, out.trigger, out.poisoned_set, out.poisoned

def cmd_defend(run: Run) -> int:
    cfg = run.cfg
    if cfg.defense not in DEFENSES:
        raise ConfigError(f"defense must be one of {DEFENSES}, got {cfg.defense!r}")
    splits = run.splits()
    if cfg.defense == "adaptive":
        rows = ex.run_adaptive(cfg, splits)
        run.csv("adaptive.csv", ex.ADAPTIVE_COLUMNS, rows)
        for r in rows:
            print(f"{r['kind']} rate={r['poison_rate']} prune_frac={r['prune_frac']}: asr {r['pre_asr']:.3f} -> {r['ft_asr']:.3f}")
        return EXIT_OK
    net, trigger, pset, pidx = _backdoored(run, splits)
    if cfg.defense == "strip":
        res = ex.run_strip(cfg, splits, net, trigger)
        run.csv("strip_scores.csv", ("set", "index", "entropy", "flagged"), res.rows)
        run.csv("strip_summary.csv", tuple(res.summary), [res.summary])
        run.csv("strip_hist_clean.csv", ("value", "count"), res.hist_clean)
        run.csv("strip_hist_backdoor.csv", ("value", "count"), res.hist_backdoor)
        svg.histogram(run.path("strip_hist.svg"), {"clean": res.hist_clean, "backdoor": res.hist_backdoor},
                      title="STRIP normalized entropy", xlabel="entropy")
        s = res.summary
        print(f"threshold={s['threshold']:.4f} detection={s['detection']:.3f} "
              f"false_rejection={s['false_rejection']:.3f}")
    elif cfg.defense == "spectral":
        rows, summary = ex.run_spectral(cfg, splits, net, trigger, pset, pidx)
        run.csv("spectral_scores.csv", ("index", "score", "removed", "poisoned"), rows)
        run.csv("spectral_summary.csv", tuple(summary), [summary])
        removed = [r["index"] for r in rows if r["removed"]]
        print("removed:", " ".join(str(i) for i in removed))
        print(f"recall={summary['recall']} post_asr={summary['post_asr']}")
    else:
        rows = ex.run_fineprune(cfg, splits, net, trigger)
        run.csv("fineprune.csv", ex.PRUNE_COLUMNS, rows)
        prune_fracs = [r["prune_frac"] for r in rows]
        svg.line_chart(run.path("fineprune.svg"), {"ft_clean_acc": (prune_fracs, [r["ft_clean_acc"] for r in rows]),
                                                   "ft_asr": (prune_fracs, [r["ft_asr"] for r in rows])},
                       title=f"fine-pruning ({cfg.prune_direction})", xlabel="prune_frac")
        for r in rows:
            print(f"prune_frac={r['prune_frac']}: acc {r['ft_clean_acc']:.3f} asr {r['pre_asr']:.3f} -> {r['ft_asr']:.3f}")
    return EXIT_OK

def cmd_stealth(run: Run) -> int:
    cfg = run.cfg
    splits = run.splits()
    gen = None
    if cfg.checkpoint and ex.gen_path(cfg.checkpoint).exists():
        run.manifest.add_input(ex.gen_path(cfg.checkpoint))
        gen = ex.load_generator(ex.gen_path(cfg.checkpoint), cfg)
    rows = ex.run_stealth(cfg, splits, gen)
    run.csv("stealth.csv", ex.STEALTH_COLUMNS, rows)
    svg.bar_chart(run.path("stealth.svg"), [r["label"] for r in rows], [r["mean_ssim"] for r in rows],
                  title="mean SSIM", ylabel="SSIM")
    for r in rows:
        print(f"{r['label']}: ssim={r['mean_ssim']:.5f} mse={r['mean_mse']:.3e}")
    return EXIT_OK

def cmd_selfcheck(run: Run) -> int:
    from .gradcheck import run_all

    results = run_all()
    run.csv("selfcheck.csv", ("check", "error", "tol", "ok"),
            [{"check": r.name, "error": r.error, "tol": r.tol, "ok": r.ok} for r in results])
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name} err={r.error:.3e} tol={r.tol:g}")
    if failed:
        print("selfcheck failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "stealth": cmd_stealth,
    "selfcheck": cmd_selfcheck,
}

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="key=value config file")
    common.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-o", "--out", help=f"output directory (else ${OUT_DIR_ENV}, else out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="snnbd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p

def resolve_out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or os.environ.get(OUT_DIR_ENV) or cfg.out_dir)

def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = resolve_out(args, cfg)
    cfg.out_dir = str(out)
    try:
        run = Run(args.command, cfg, out)
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        status = COMMANDS[args.command](run)
        error = ""
    except CONFIG_ERRORS as exc:
        status, error = EXIT_CONFIG, f"config error: {exc}"
    except Exception as exc:  # every other failure is a runtime error with exit 2
        status, error = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
        log.debug("traceback", exc_info=True)
    if error:
        print(error, file=sys.stderr)
    run.manifest.write(status, error)
    return status

if __name__ == "__main__":
    sys.exit(main())
