#!/usr/bin/env python3
"""Synthetic S1-S4 comparison: synth, train every system, compare, all in one output tree."""
import argparse
import importlib
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import cli
from config import SYSTEM_PRESETS
from file_manager import RunDirectory

logger = logging.getLogger(__name__)

REQUIRED_PACKAGES = ("numpy", "scipy", "yaml", "dotenv", "tqdm", "typing_extensions")


def check_dependencies() -> bool:
    """Check if required dependencies are installed."""
    missing = []
    for name in REQUIRED_PACKAGES:
        try:
            importlib.import_module(name)
        except ImportError:
            missing.append(name)
    if missing:
        print(f"Missing dependencies: {', '.join(missing)}", file=sys.stderr)
        print("Please install dependencies with: pip install -r requirements.txt", file=sys.stderr)
        return False
    return True


def run_experiment(out: str, seed: int = 0, epochs: int = 50, batch_size: int = 256,
                   learning_rate: Optional[float] = None, systems: Sequence[str] = tuple(SYSTEM_PRESETS),
                   synth_args: Sequence[str] = (), extra_train_args: Sequence[str] = ()) -> int:
    """Run the full pipeline; returns the first nonzero exit code, or 0."""
    root = RunDirectory(out).ensure()
    data_dir = root.child("data")
    common = ["--seed", str(seed)]

    code = cli.main(["synth", "--out", str(data_dir.root), *common, *synth_args])
    if code:
        return code

    run_dirs: List[str] = []
    for system in systems:
        system_dir = root.child(system)
        args = ["train", "--system", system, "--out", str(system_dir.root),
                "--trn", str(data_dir.trials_path("trn")), "--dev", str(data_dir.trials_path("dev")),
                "--eval", str(data_dir.trials_path("eval")),
                "--epochs", str(epochs), "--batch-size", str(batch_size), *common, *extra_train_args]
        if learning_rate is not None:
            args += ["--lr", str(learning_rate)]
        logger.info("Training %s", system)
        code = cli.main(args)
        if code:
            return code
        run_dirs.append(str(system_dir.root))

    return cli.main(["compare", "--out", str(root.root), *run_dirs])


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main startup function."""
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/experiment")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--systems", nargs="+", default=list(SYSTEM_PRESETS), choices=sorted(SYSTEM_PRESETS))
    args = parser.parse_args(argv)

    if not check_dependencies():
        return 1
    print(f"Running {', '.join(args.systems)} into {Path(args.out)}")
    return run_experiment(args.out, args.seed, args.epochs, args.batch_size, args.lr, args.systems)


if __name__ == "__main__":
    sys.exit(main())
