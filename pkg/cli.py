#!/usr/bin/env python3
"""Command-line front end: synth, train, score, evaluate, compare and sweep.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 validation error.
"""
import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from config import (DEFAULT_PATIENCE, DEFAULT_SPLIT, ConfigManager, RunConfig, SETTING_PRESETS, SYSTEM_PRESETS,
                    setup_logging)
from data import (ScoredTrial, TrialSet, generate_synthetic, load_score_set, read_trial_file,
                  save_scores, save_trials, save_trials_binary, split)
from errors import RunIOError, UsageError, ValidationError
from file_manager import SPLITS, RunDirectory
from loss import LossMode
from metrics import MetricReport, ScoreSet, a_dcf, evaluate_scores, hard_error_rates, min_a_dcf
from network import load_model, save_model
from trainer import (BatchStrategy, SelectionMetric, ThresholdGrid, ThresholdMode, batch_size_study,
                     score_trials, train)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4

COST_FLAGS = ("c_miss_tar", "c_fa_non", "c_fa_spf", "pi_tar", "pi_non", "pi_spf")


def _add_global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file; flags override its values")
    parser.add_argument("--seed", type=int, help="global random seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")


def _add_cost_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--setting", choices=sorted(SETTING_PRESETS), help="cost/prior preset")
    for name in COST_FLAGS:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trn", help="training trial file")
    parser.add_argument("--dev", help="dev trial file")
    parser.add_argument("--system", choices=sorted(SYSTEM_PRESETS), help="system preset")
    parser.add_argument("--loss-mode", choices=[m.value for m in LossMode])
    parser.add_argument("--threshold-mode", choices=[m.value for m in ThresholdMode])
    parser.add_argument("--selection-metric", choices=[m.value for m in SelectionMetric])
    parser.add_argument("--search-metric", choices=[m.value for m in SelectionMetric])
    parser.add_argument("--batch-strategy", choices=[m.value for m in BatchStrategy])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate")
    parser.add_argument("--alpha", type=float, help="sigmoid steepness of the training loss")
    parser.add_argument("--search-alpha", type=float, help="sigmoid steepness of grid search and soft dev metric")
    parser.add_argument("--grid", nargs=3, type=float, metavar=("LO", "HI", "STEP"))
    parser.add_argument("--hidden-dims", nargs="+", type=int)
    parser.add_argument("--patience", type=int, nargs="?", const=DEFAULT_PATIENCE,
                        help=f"early-stop patience in epochs (off when omitted, {DEFAULT_PATIENCE} without a value)")
    parser.add_argument("--progress", action="store_true", help="show an epoch progress bar")
    _add_cost_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per operation."""
    parser = argparse.ArgumentParser(prog="adcf", description="a-DCF back-end optimization toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate synthetic trn/dev/eval trial files")
    _add_global_flags(synth)
    synth.add_argument("--n-target", type=int)
    synth.add_argument("--n-nontarget", type=int)
    synth.add_argument("--n-spoof", type=int)
    synth.add_argument("--d-asv", type=int)
    synth.add_argument("--d-cm", type=int)
    synth.add_argument("--noise", dest="noise_scale", type=float)
    synth.add_argument("--separation", type=float)
    synth.add_argument("--split", nargs=3, type=float, metavar=("TRN", "DEV", "EVAL"))
    synth.add_argument("--binary", action="store_true", help="write the binary trial encoding")

    train_cmd = commands.add_parser("train", help="train a back-end and calibrate its threshold")
    _add_global_flags(train_cmd)
    _add_train_flags(train_cmd)
    train_cmd.add_argument("--eval", help="eval trial file to score after training")

    score = commands.add_parser("score", help="score a trial file with a checkpoint")
    _add_global_flags(score)
    score.add_argument("--model", help="checkpoint file")
    score.add_argument("--trials", help="trial file")
    score.add_argument("--output", help="score file to write (default <out>/<trials stem>.scores)")

    evaluate = commands.add_parser("evaluate", help="metrics of a score file")
    _add_global_flags(evaluate)
    evaluate.add_argument("--scores", help="score file")
    evaluate.add_argument("--tau", type=float, help="report the a-DCF at this threshold")
    evaluate.add_argument("--normalize", action="store_true", help="divide costs by the best trivial system")
    evaluate.add_argument("--curves", action="store_true", help="write a-DCF-vs-threshold and DET CSVs")
    evaluate.add_argument("--grid", nargs=3, type=float, metavar=("LO", "HI", "STEP"))
    _add_cost_flags(evaluate)

    compare = commands.add_parser("compare", help="compare trained runs")
    _add_global_flags(compare)
    compare.add_argument("runs", nargs="+", help="run directories")
    _add_cost_flags(compare)

    sweep = commands.add_parser("sweep", help="dev min a-DCF as a function of batch size")
    _add_global_flags(sweep)
    _add_train_flags(sweep)
    sweep.add_argument("--batch-sizes", nargs="+", type=int)
    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    """Namespace -> layered config mapping; None means not given."""
    get = lambda name: getattr(args, name, None)
    train = {name: get(name) for name in (
        "loss_mode", "threshold_mode", "selection_metric", "search_metric", "batch_strategy", "epochs",
        "batch_size", "learning_rate", "alpha", "search_alpha", "patience")}
    if get("system"):
        train["system"] = get("system")
    if get("hidden_dims"):
        train["hidden_dims"] = list(get("hidden_dims"))
    grid = get("grid")
    if grid and args.command in ("train", "sweep"):
        train.update(grid_lo=grid[0], grid_hi=grid[1], grid_step=grid[2])

    evaluate = {"tau": get("tau"), "normalize": get("normalize") or None, "curves": get("curves") or None,
                "batch_sizes": list(get("batch_sizes")) if get("batch_sizes") else None}
    if grid and args.command == "evaluate":
        evaluate["grid"] = list(grid)

    synth = {name: get(name) for name in (
        "n_target", "n_nontarget", "n_spoof", "d_asv", "d_cm", "noise_scale", "separation")}
    paths = {name: get(name) for name in ("trn", "dev", "eval", "model", "trials", "output", "scores")}
    if get("split"):
        paths["split"] = list(get("split"))
    if get("binary"):
        paths["binary"] = True
    if get("runs"):
        paths["runs"] = list(get("runs"))

    return {
        "seed": get("seed"),
        "out_dir": get("out"),
        "log_level": get("log_level"),
        "train": train,
        "cost": {**{name: get(name) for name in COST_FLAGS}, "setting": get("setting")},
        "synth": synth,
        "paths": paths,
        "evaluate": evaluate,
    }


def _write_resolved(run: RunConfig, out: RunDirectory) -> None:
    out.write_yaml(out.config_path, run.as_dict())


def _counts(trials: TrialSet) -> Dict[str, int]:
    return {cls.value: n for cls, n in trials.counts().items()}


def cmd_synth(run: RunConfig) -> int:
    """Generate synthetic data and write the three splits."""
    spec = run.synth_spec()
    fractions = run.paths.get("split", list(DEFAULT_SPLIT))
    binary = bool(run.paths.get("binary", False))
    dataset = generate_synthetic(spec)
    parts = split(dataset, fractions, seed=run.seed)

    out = RunDirectory(run.out_dir).ensure()
    run.synth = {k: v for k, v in asdict(spec).items() if k != "seed"}
    run.paths["split"] = list(fractions)
    manifest: Dict[str, Any] = {"seed": run.seed, "spec": asdict(spec), "fractions": list(fractions),
                                "format": "binary" if binary else "text", "splits": {}}
    for name, part in zip(SPLITS, parts):
        path = out.trials_path(name)
        (save_trials_binary if binary else save_trials)(part, path)
        logger.info("Wrote %s (%d trials)", path, len(part))
        manifest["splits"][name] = {"path": path.name, "count": len(part), "counts": _counts(part)}
    out.write_yaml(out.manifest_path, manifest)
    _write_resolved(run, out)
    for name, entry in manifest["splits"].items():
        print(f"{name}: {entry['count']} trials {entry['counts']}")
    return EXIT_OK


def _write_scores(model, trials: TrialSet, path: Path) -> Path:
    scores = score_trials(model, trials)
    records = [ScoredTrial(t.trial_id, t.label, float(s)) for t, s in zip(trials, scores)]
    try:
        return save_scores(records, path)
    except OSError as e:
        raise RunIOError(f"Cannot write {path}: {e}")


def cmd_train(run: RunConfig, manager: ConfigManager, progress: bool = False) -> int:
    """Train, save the checkpoint and log, and score dev (and eval when given)."""
    manager.validate_inputs(run, ("trn", "dev"))
    if run.paths.get("eval") is not None:
        manager.validate_inputs(run, ("eval",))
    cfg = run.train_config()
    trn = read_trial_file(run.paths["trn"])
    dev = read_trial_file(run.paths["dev"])

    out = RunDirectory(run.out_dir).ensure()
    model, report = train(trn, dev, cfg, progress=progress)

    out.backup(out.checkpoint_path)
    save_model(model, out.checkpoint_path)
    logger.info("Wrote %s", out.checkpoint_path)
    out.write_jsonl(out.train_log_path, report.to_records())
    _write_scores(model, dev, out.scores_path("dev"))
    if run.paths.get("eval") is not None:
        _write_scores(model, read_trial_file(run.paths["eval"]), out.scores_path("eval"))

    run.train = {k: v for k, v in cfg.as_dict().items() if k != "seed"}
    _write_resolved(run, out)

    status = "" if report.improved else " (no improvement: threshold left at its initial value)"
    print(f"best epoch {report.best_epoch}, tau {model.threshold:.6f}, "
          f"dev {report.selection_metric} {report.best_dev_metric:.6f}{status}")
    print(f"final dev {report.selection_metric}: {report.final_dev_metric:.6f}")
    return EXIT_OK


def cmd_score(run: RunConfig, manager: ConfigManager) -> int:
    """Score a trial file with a saved checkpoint."""
    manager.validate_inputs(run, ("model", "trials"))
    model = load_model(run.paths["model"])
    trials = read_trial_file(run.paths["trials"])
    out = RunDirectory(run.out_dir).ensure()
    target = Path(run.paths["output"]) if run.paths.get("output") else out.scores_path(Path(run.paths["trials"]).stem)
    _write_scores(model, trials, target)
    logger.info("Wrote %s (%d scores)", target, len(trials))
    _write_resolved(run, out)
    print(f"scored {len(trials)} trials -> {target}")
    return EXIT_OK


def format_report(report: MetricReport) -> str:
    """Human-readable metric report."""
    label = "normalized " if report.normalized else ""
    lines = []
    n_tar, n_non, n_spf = report.counts
    lines.append(f"trials: target={n_tar} nontarget={n_non} spoof={n_spf}")
    if report.tau is not None:
        p_miss, p_fa_non, p_fa_spf = report.rates_at_tau.as_tuple()
        lines.append(f"{label}a-DCF at tau={report.tau:.6f}: {report.a_dcf_at_tau:.6f} "
                     f"(p_miss_tar={p_miss:.6f} p_fa_non={p_fa_non:.6f} p_fa_spf={p_fa_spf:.6f})")
    lines.append(f"{label}min a-DCF: {report.min_a_dcf:.6f} at tau*={report.tau_star:.6f}")
    for pair, value in (("tar-vs-non", report.eer_tar_non), ("tar-vs-spf", report.eer_tar_spf)):
        lines.append(f"EER {pair}: " + ("n/a (empty class)" if value is None else f"{value:.6f}"))
    return "\n".join(lines)


def cmd_evaluate(run: RunConfig, manager: ConfigManager) -> int:
    """Compute metrics of a score file and optionally write curves."""
    manager.validate_inputs(run, ("scores",))
    scores = load_score_set(run.paths["scores"])
    cm = run.cost_model()
    options = run.evaluate
    curves = bool(options.get("curves", False))
    grid = ThresholdGrid(*options["grid"]) if options.get("grid") else ThresholdGrid()
    report = evaluate_scores(scores, cm, tau=options.get("tau"), grid=grid.points() if curves else None,
                             normalize=bool(options.get("normalize", False)))

    out = RunDirectory(run.out_dir).ensure()
    out.write_yaml(out.root / "metrics.yaml", report.summary())
    if curves:
        out.write_csv(out.curve_path("adcf_vs_threshold"), ("threshold", "a_dcf"), report.cost_curve)
        header = ("threshold", "p_fa", "p_miss", "probit_fa", "probit_miss")
        for name, curve in (("det_tar_vs_non", report.det_tar_non), ("det_tar_vs_spf", report.det_tar_spf)):
            if curve is not None:
                out.write_csv(out.curve_path(name), header, curve.rows())
    _write_resolved(run, out)
    print(format_report(report))
    return EXIT_OK


def _score_metrics(scores: ScoreSet, tau: float, cm) -> Dict[str, float]:
    return {"a_dcf": a_dcf(hard_error_rates(scores, tau), cm), "min_a_dcf": min_a_dcf(scores, cm)[0]}


def compare_runs(run_dirs: Sequence[str], cm) -> List[Dict[str, Any]]:
    """One row per run directory; runs with missing artifacts are reported, not compared."""
    rows = []
    for path in run_dirs:
        run_dir = RunDirectory(path)
        row: Dict[str, Any] = {"run": str(path), "system": Path(path).name}
        if run_dir.config_path.exists():
            system = (run_dir.read_yaml(run_dir.config_path).get("train") or {}).get("system")
            row["system"] = system or row["system"]
        missing = run_dir.missing_artifacts([run_dir.checkpoint_path, run_dir.scores_path("dev")])
        if missing:
            logger.warning("%s: missing %s", path, ", ".join(missing))
            row["missing"] = ";".join(missing)
            rows.append(row)
            continue
        tau = load_model(run_dir.checkpoint_path).threshold
        row["tau"] = tau
        for split_name in ("dev", "eval"):
            if run_dir.scores_path(split_name).exists():
                metrics = _score_metrics(load_score_set(run_dir.scores_path(split_name)), tau, cm)
                row[f"{split_name}_a_dcf"] = metrics["a_dcf"]
                row[f"{split_name}_min_a_dcf"] = metrics["min_a_dcf"]
            elif split_name == "eval":
                row["missing"] = run_dir.scores_path("eval").name
        rows.append(row)

    key = "eval_a_dcf" if any("eval_a_dcf" in r for r in rows) else "dev_a_dcf"
    ranked = [r for r in rows if key in r]
    if ranked:
        best = min(ranked, key=lambda r: r[key])[key]
        for r in ranked:
            r["best"] = "*" if r[key] == best else ""
    return rows


COMPARE_COLUMNS = ("system", "tau", "dev_a_dcf", "dev_min_a_dcf", "eval_a_dcf", "eval_min_a_dcf", "best",
                   "missing", "run")


def format_table(rows: List[Dict[str, Any]]) -> str:
    def cell(value: Any) -> str:
        if value is None:
            return "-"
        return f"{value:.6f}" if isinstance(value, float) else str(value)

    table = [list(COMPARE_COLUMNS)] + [[cell(r.get(c)) for c in COMPARE_COLUMNS] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(COMPARE_COLUMNS))]
    return "\n".join("  ".join(value.ljust(width) for value, width in zip(line, widths)).rstrip()
                     for line in table)


def cmd_compare(run: RunConfig) -> int:
    """Tabulate eval metrics of several training runs."""
    run_dirs = run.paths.get("runs") or []
    if not run_dirs:
        raise UsageError("compare needs at least one run directory")
    for path in run_dirs:
        if not Path(path).is_dir():
            raise UsageError(f"Run directory not found: {path}")
    rows = compare_runs(run_dirs, run.cost_model())
    out = RunDirectory(run.out_dir).ensure()
    out.write_csv(out.compare_path, COMPARE_COLUMNS, [[r.get(c, "") for c in COMPARE_COLUMNS] for r in rows])
    _write_resolved(run, out)
    print(format_table(rows))
    return EXIT_OK


def cmd_sweep(run: RunConfig, manager: ConfigManager, progress: bool = False) -> int:
    """Dev min a-DCF for each requested batch size."""
    manager.validate_inputs(run, ("trn", "dev"))
    batch_sizes = run.evaluate.get("batch_sizes") or [64, 128, 256, 512, 1024]
    cfg = run.train_config()
    trn = read_trial_file(run.paths["trn"])
    dev = read_trial_file(run.paths["dev"])
    out = RunDirectory(run.out_dir).ensure()
    results = batch_size_study(trn, dev, cfg, batch_sizes, progress=progress)
    out.write_csv(out.root / "batch_sweep.csv", ("batch_size", "dev_min_a_dcf"), results)
    run.train = {k: v for k, v in cfg.as_dict().items() if k not in ("seed", "batch_size")}
    run.evaluate["batch_sizes"] = [int(b) for b in batch_sizes]
    _write_resolved(run, out)
    for size, value in results:
        print(f"batch size {size:>6}: dev min a-DCF {value:.6f}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        manager = ConfigManager()
        run = manager.resolve(args.command, _flags(args), config_file=args.config)
        setup_logging(run.log_level)
        if args.command == "synth":
            return cmd_synth(run)
        if args.command == "train":
            return cmd_train(run, manager, progress=args.progress)
        if args.command == "score":
            return cmd_score(run, manager)
        if args.command == "evaluate":
            return cmd_evaluate(run, manager)
        if args.command == "compare":
            return cmd_compare(run)
        return cmd_sweep(run, manager, progress=args.progress)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RunIOError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
