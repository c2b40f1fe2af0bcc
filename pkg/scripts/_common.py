"""Shared helper: run one snnbd subcommand with key=value overrides."""

from __future__ import annotations

import argparse
import sys

from snnbd.cli import main


def parser(doc: str, default_out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("-o", "--out", default=default_out)
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra config override (repeatable)")
    p.add_argument("--quick", action="store_true", help="tiny data and one epoch, for a smoke run")
    return p


QUICK = ["height=16", "width=16", "frames=4", "side=4", "n_train=48", "n_test=16", "n_holdout=16",
         "conv_channels=4", "epochs=1", "gen_width=4", "n_strip=8", "n_overlays=8", "n_stealth=8",
         "finetune_epochs=1"]


def run(command: str, out: str, overrides: list[str], quick: bool = False) -> int:
    args = [command, "-o", out]
    for kv in (QUICK if quick else []) + overrides:
        args += ["-s", kv]
    print("snnbd", " ".join(args), flush=True)
    status = main(args)
    if status:
        sys.exit(status)
    return status
