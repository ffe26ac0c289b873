import argparse
import csv
import sys
from pathlib import Path

from covertopt.cli import main

ROOT = Path(__file__).resolve().parents[1]


def parser(description, config, out):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", default=str(ROOT / "configs" / config))
    p.add_argument("--out", default=str(ROOT / "out" / out))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--plot", action="store_true", help="save a PNG next to the CSV (needs matplotlib)")
    return p


def run_cli(command, args):
    argv = [command, "--config", args.config, "--out", args.out, "--seed", str(args.seed)]
    if args.runs is not None:
        argv += ["--runs", str(args.runs)]
    code = main(argv)
    if code:
        sys.exit(code)
    return Path(args.out)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
