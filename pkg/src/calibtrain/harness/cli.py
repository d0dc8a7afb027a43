"""Command-line front end.

Subcommands:
  generate-data   write a synthetic split (train/validation/test CSVs)
  train           one training run: epoch history plus best checkpoints
  grid            inner 2-fold grid search, per-cell table
  suite           full strategy x seed evaluation bundle
  report          print the aggregate tables of a finished suite run
  plot            re-render reliability SVGs from a run's CSV tables

Every run subcommand accepts ``--config FILE`` (JSON) plus flag overrides;
flags win over the file. ``--set KEY=VALUE`` overrides any config field,
parsing VALUE as JSON when possible. The CALIBTRAIN_OUT environment
variable prefixes relative output directories.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..data import generate_gaussian_mixture, write_split
from ..losses import STRATEGIES, LossSpec
from ..metrics import Bin, BinTable
from ..model import VaeClassifier, save_checkpoint
from .config import CRITERIA, ExperimentConfig, config_hash
from .grid import grid_search
from .suite import run_suite, write_csv
from .svg import write_reliability_svg
from .training import select_model, train


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        data[key] = _parse_value(raw)
    for name in ("epochs", "batch_size", "data_seed", "noise_rate", "criterion"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "seeds", None):
        data["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "strategy", None):
        loss = dict(data.get("loss", {}))
        loss["strategy"] = args.strategy
        data["loss"] = loss
    if getattr(args, "out", None):
        data["out_dir"] = args.out
    return ExperimentConfig.from_dict(data)


def _generate(config: ExperimentConfig):
    return generate_gaussian_mixture(
        sizes=config.sizes, d=config.d, separation=config.separation,
        noise_rate=config.noise_rate, positive_fraction=config.positive_fraction,
        seed=config.data_seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    config = load_config(args)
    split = _generate(config)
    out = config.resolve_out_dir()
    write_split(split, out)
    counts = {name: len(part) for name, part in
              (("train", split.train), ("validation", split.validation),
               ("test", split.test))}
    print(f"wrote split {counts} to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    spec = LossSpec.from_dict(dict(config.loss))
    split = _generate(config)
    history = train(config, split, seed=seed, spec=spec)
    out = config.resolve_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    rows = [[e.epoch, e.train_loss, e.val_bacc, e.val_ece] for e in history.entries]
    write_csv(out / "history.csv", ["epoch", "train_loss", "val_bacc", "val_ece"], rows)
    if history.failed:
        print(f"run failed: {history.failure} "
              f"({len(history.entries)} epochs kept)", file=sys.stderr)
        return 1
    for criterion in CRITERIA:
        entry, params = select_model(history, criterion)
        model = VaeClassifier(d=config.d, hidden=config.hidden,
                              latent=config.latent, seed=seed)
        assert params is not None
        model.params.load_values(params)
        save_checkpoint(model, out / "checkpoints" / criterion, epoch=entry.epoch,
                        extra={"criterion": criterion, "strategy": spec.strategy,
                               "seed": seed})
        value = entry.val_bacc if criterion == "max-val-bacc" else entry.val_ece
        print(f"{criterion}: epoch {entry.epoch} (validation value {value:.4f})")
    print(f"history and checkpoints in {out}")
    return 0


def cmd_grid(args) -> int:
    config = load_config(args)
    split = _generate(config)
    try:
        result = grid_search(config, split)
    except RuntimeError as err:
        print(f"grid search failed: {err}", file=sys.stderr)
        return 1
    out = config.resolve_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(config.grid)
    rows = []
    for cell in result.cells:
        row = [cell.values[k] for k in keys]
        scores = list(cell.fold_scores) + [None] * (2 - len(cell.fold_scores))
        row.extend(scores)
        row.append(None if cell.failed else cell.mean_score)
        row.append("yes" if cell.failed else "no")
        rows.append(row)
    write_csv(out / "grid.csv", keys + ["fold0", "fold1", "mean", "failed"], rows)
    best = {k: getattr(result.best, k) for k in keys}
    print(f"best cell under {result.criterion}: {best}")
    print(f"per-cell table in {out / 'grid.csv'}")
    return 0


def cmd_suite(args) -> int:
    config = load_config(args)
    result = run_suite(config, out_override=args.out)
    for cell in result.cells:
        status = f"FAILED ({cell.failure})" if cell.failed else "ok"
        print(f"{cell.strategy} seed {cell.seed}: {status}")
    print(f"reports in {result.out_dir}")
    return 0 if result.ok else 1


def _print_table(path: Path) -> None:
    lines = path.read_text().splitlines()
    table = [line.split(",") for line in lines]
    # shorten float cells for display; the CSV keeps full precision
    shown = []
    for row in table:
        cells = []
        for cell in row:
            try:
                f = float(cell)
                cells.append(f"{f:.4g}" if "." in cell or "e" in cell else cell)
            except ValueError:
                cells.append(cell)
        shown.append(cells)
    widths = [max(len(r[i]) for r in shown) for i in range(len(shown[0]))]
    for row in shown:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    manifest_path = run / "manifest.json"
    if not manifest_path.exists():
        print(f"no manifest.json under {run}", file=sys.stderr)
        return 1
    manifest = json.loads(manifest_path.read_text())
    print(f"config hash {manifest['config_hash']}, seeds {manifest['seeds']}")
    failed = [c for c in manifest["cells"] if c["failed"]]
    if failed:
        print(f"{len(failed)} failed cell(s):")
        for c in failed:
            print(f"  {c['strategy']} seed {c['seed']}: {c['failure']}")
    for name in ("metrics_softmax", "metrics_epistemic", "metrics_aleatoric",
                 "selection_comparison", "mcnemar_vs_baseline"):
        path = run / f"{name}.csv"
        if path.exists():
            print(f"\n{name}")
            _print_table(path)
    return 0


def _table_from_csv(path: Path) -> BinTable:
    lines = path.read_text().splitlines()[1:]
    bins = []
    for line in lines:
        _, lower, upper, count, conf, acc = line.split(",")
        opt = lambda s: None if s == "" else float(s)
        bins.append(Bin(lower=opt(lower), upper=opt(upper), count=int(count),
                        conf=opt(conf), acc=opt(acc)))
    scheme = "equal_width" if path.stem.endswith("_equal_width") else "adaptive"
    n = sum(b.count for b in bins)
    return BinTable(scheme=scheme, m=len(bins), n=n, bins=bins)


def cmd_plot(args) -> int:
    run = Path(args.run_dir)
    rel = run / "reliability"
    tables = sorted(rel.glob("*.csv")) if rel.is_dir() else []
    if not tables:
        print(f"no reliability tables under {rel}", file=sys.stderr)
        return 1
    for path in tables:
        table = _table_from_csv(path)
        suffix = f"_{table.scheme}"
        strategy = path.stem[: -len(suffix)]
        title = f"{strategy} ({table.scheme.replace('_', '-')} bins)"
        write_reliability_svg(table, path.with_suffix(".svg"), title)
        print(f"rendered {path.with_suffix('.svg')}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibtrain",
        description="calibration-aware training experiments on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config field; VALUE parsed as JSON")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int, dest="batch_size")
    common.add_argument("--seeds", help="comma-separated run seeds")
    common.add_argument("--data-seed", type=int, dest="data_seed")
    common.add_argument("--noise-rate", type=float, dest="noise_rate")
    common.add_argument("--criterion", choices=list(CRITERIA))
    common.add_argument("--strategy", choices=list(STRATEGIES),
                        help="replace the configured loss strategy")

    p = sub.add_parser("generate-data", parents=[common],
                       help="write the synthetic split to CSV")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", parents=[common], help="single training run")
    p.add_argument("--seed", type=int, help="run seed (default: first config seed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", parents=[common],
                       help="grid search over loss hyperparameters")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("suite", parents=[common],
                       help="train and evaluate every configured strategy")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("report", help="print the tables of a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="re-render reliability SVGs for a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
