"""``urllc-la`` command line: train / eval / sweep / mcs-histogram."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import experiment as ex
from .config import SCHEMES


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--scheme", choices=SCHEMES, help="policy to run")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--discrete-mcs", action=argparse.BooleanOptionalAction, default=None,
                   help="restrict rates to the MCS table (indices 8..24)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--out", type=Path,
                   help=f"output directory (default: ${ex.OUTPUT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urllc-la", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one scheme, write curve CSV and checkpoint")
    _common(p)
    p.add_argument("--no-slot-log", action="store_true", help="skip the per-slot CSV")

    p = sub.add_parser("eval", help="test episodes, Table-III style summary")
    _common(p)
    p.add_argument("--checkpoint", type=Path,
                   help="trained parameters; without one the scheme is trained first")
    p.add_argument("--episodes", type=int, help="override eval_episodes")

    p = sub.add_parser("sweep", help="sum rate versus device count or BLER threshold")
    _common(p)
    p.add_argument("--axis", choices=tuple(ex.SWEEP_POINTS), required=True)
    p.add_argument("--points", type=float, nargs="+", help="sweep values")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds (default: --seed)")
    p.add_argument("--schemes", choices=SCHEMES, nargs="+", help="schemes (default: --scheme)")
    p.add_argument("--workers", type=int, default=None, help="worker threads")
    p.add_argument("--episodes", type=int, help="override eval_episodes")

    p = sub.add_parser("mcs-histogram", help="violations per optimal MCS index")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--episodes", type=int, help="override eval_episodes")
    return parser


def resolve_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for key in ("seed", "scheme", "epochs", "discrete_mcs"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return config_mod.from_mapping(overrides, cfg)


def _trained(cfg, args, out: Path):
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint is not None:
        return ex.load_checkpoint(checkpoint, cfg, ex.build_env(cfg))
    return ex.train(cfg, out, slot_log=False).policy


def cmd_train(cfg, args, out: Path) -> dict:
    result = ex.train(cfg, out, slot_log=not args.no_slot_log)
    if "training_slots" in result.files:
        ex.check_log(result.files["training_slots"], cfg.n_devices)
    ex.write_metrics(out / "metrics.json", cfg, "train", result.curve, result.files)
    last = result.curve[-1] if result.curve else None
    print(f"trained {cfg.scheme} for {cfg.epochs} epochs -> {out}"
          + (f" (last epoch sum rate {last['sum_rate']:.4f})" if last else ""))
    return result.files


def cmd_eval(cfg, args, out: Path):
    policy = _trained(cfg, args, out)
    files = {"summary": str(out / "summary.csv"), "eval_slots": str(out / "eval_slots.csv")}
    with ex.CsvSink(files["eval_slots"], ex.LOG_COLUMNS) as sink:
        row, _ = ex.evaluate(cfg, policy, episodes=args.episodes, slot_sink=sink)
    ex.check_log(files["eval_slots"], cfg.n_devices)
    ex.write_csv(files["summary"], ex.SUMMARY_COLUMNS, [row])
    ex.write_metrics(out / "metrics.json", cfg, "eval", row, files)
    print(",".join(ex.SUMMARY_COLUMNS))
    print(",".join(ex._cell(row[c]) for c in ex.SUMMARY_COLUMNS))


def cmd_sweep(cfg, args, out: Path):
    rows = ex.sweep(cfg, args.axis, args.points, args.seeds, args.schemes, args.workers,
                    args.episodes)
    path = out / f"sweep_{args.axis}.csv"
    ex.write_csv(path, ex.SWEEP_COLUMNS, rows)
    ex.write_metrics(out / "metrics.json", cfg, "sweep", rows, {"sweep": str(path)})
    print(f"{len(rows)} sweep rows -> {path}")


def cmd_histogram(cfg, args, out: Path):
    if not cfg.discrete_mcs:
        cfg = cfg.replace(discrete_mcs=True)
    policy = _trained(cfg, args, out)
    _, metrics = ex.evaluate(cfg, policy, episodes=args.episodes, keep_records=True)
    rows = ex.mcs_histogram(metrics.records, cfg)
    path = out / "mcs_histogram.csv"
    ex.write_csv(path, ex.HISTOGRAM_COLUMNS, rows)
    ex.write_metrics(out / "metrics.json", cfg, "mcs-histogram", rows, {"histogram": str(path)})
    print(f"MCS histogram over {metrics.slots} slots -> {path}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "mcs-histogram": cmd_histogram}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (KeyError, ValueError, OSError) as exc:
        parser.exit(2, f"urllc-la: invalid configuration: {exc}\n")
    out = args.out or ex.default_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](cfg, args, out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
