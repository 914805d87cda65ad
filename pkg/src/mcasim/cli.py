"""Command-line entry point: ``mcasim <command> [options]``.

Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 runtime.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import device as dev
from .counters import EventCounters
from .crossbar import load_checkpoint
from .data import DataError, load_mnist_dir
from .io import read_csv, write_csv, write_text
from .metrics import UnitCosts, cost_report, frechet_distance

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3, 4
DEFAULT_OFFSETS = "0,60,3600,86400,604800,2592000"

log = logging.getLogger("mcasim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_globals(p, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="experiment config file (INI)")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="override trainer.seed")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory (overrides output.dir)")
    p.add_argument("--profile", choices=cfgmod.PROFILES, default=argparse.SUPPRESS if suppress else "full",
                   help="default profile under the config file (default: full)")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcasim", description="Mixed-precision in-memory training simulator")
    parser.add_argument("--version", action="version", version=f"mcasim {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_globals(p, suppress=True)
        return p

    p = command("characterize", "SET-pulse statistics of a simulated device population")
    p.add_argument("--devices", type=int, default=10000)
    p.add_argument("--pulses", type=int, default=20)
    p.add_argument("--dt", type=float, default=1.0, help="seconds between pulses")

    p = command("calibrate", "fit device model parameters to measurement CSVs")
    p.add_argument("--set-csv", metavar="PATH", help="rows: device_id,pulse_index,g_uS")
    p.add_argument("--drift-csv", metavar="PATH", help="rows: device_id,t_s,g_uS")

    command("train", "run a training experiment")

    p = command("eval-drift", "accuracy of a trained checkpoint as its devices drift")
    p.add_argument("--checkpoint", metavar="PATH", help="default: <out>/<output.checkpoint>")
    p.add_argument("--offsets", default=DEFAULT_OFFSETS,
                   help=f"seconds after the end of training (default: {DEFAULT_OFFSETS})")
    p.add_argument("--test-only", action="store_true", help="skip training-set accuracy")

    p = command("fd", "Frechet distance between two feature CSVs")
    p.add_argument("features_a")
    p.add_argument("features_b")

    p = command("report", "event cost totals from a counters file")
    p.add_argument("counters", help="JSON counters or an epoch CSV (last row is used)")
    for name in ("set-pulse", "reset-pulse", "device-read", "chi-write", "refresh-event"):
        p.add_argument(f"--{name}-cost", type=float, default=0.0)
    return parser


def _config(args) -> cfgmod.TrainingConfig:
    cfg = cfgmod.load(args.config, args.profile) if args.config else \
        cfgmod.TrainingConfig().replace(**cfgmod.profile_overrides(args.profile))
    if args.seed is not None:
        cfg = cfg.replace(trainer={"seed": args.seed})
    if args.out is not None:
        cfg = cfg.replace(output={"dir": args.out})
    return cfg


def _dataset(cfg):
    ds = load_mnist_dir(cfg.data.mnist_dir)
    if cfg.data.n_train is not None or cfg.data.n_test is not None:
        ds = ds.subset(cfg.data.n_train, cfg.data.n_test)
    return ds


def cmd_characterize(args, cfg):
    t = dev.characterize(cfg.model, args.devices, args.pulses, cfg.trainer.seed, args.dt)
    path = Path(cfg.output.dir) / "characterization.csv"
    write_csv(path, ("pulse", "mean_uS", "std_uS"), t.rows(), cfg.digest())
    print("pulse,mean_uS,std_uS")
    for k, m, s in t.rows():
        print(f"{k},{m:.4f},{s:.4f}")
    log.info("wrote %s", path)


def _float_rows(path, width):
    data = _float_rows_any(path)
    if any(len(r) != width for r in data):
        raise DataError(f"{path}: expected {width} columns per row")
    return data


def cmd_calibrate(args, cfg):
    if not (args.set_csv or args.drift_csv):
        raise UsageError("calibrate needs --set-csv and/or --drift-csv")
    model = cfg.model
    if args.set_csv:
        model = dev.calibrate_set_curve(_float_rows(args.set_csv, 3), model)
    if args.drift_csv:
        model = dev.calibrate_drift(_float_rows(args.drift_csv, 3), model)
    new = cfg.replace(model=model.to_dict())
    path = Path(cfg.output.dir) / "calibrated.cfg"
    write_text(path, f"# config_sha256={new.digest()}\n{new.to_ini()}")
    for k, v in model.to_dict().items():
        print(f"{k} = {v!r}")
    log.info("wrote %s", path)


def cmd_train(args, cfg):
    from .train import train_mca

    ds = _dataset(cfg)
    out = Path(cfg.output.dir)
    write_text(out / "effective.cfg", f"# config_sha256={cfg.digest()}\n{cfg.to_ini()}")
    r = train_mca(cfg, ds, out_dir=out)
    print(f"max test accuracy {r.log.max_test_acc:.4f}; epochs -> {r.epoch_csv}; checkpoint -> {r.checkpoint}")


def cmd_eval_drift(args, cfg):
    from .train import DRIFT_HEADER, evaluate_inference_over_time

    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output.dir) / cfg.output.checkpoint
    try:
        arrays, extra = load_checkpoint(ckpt)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load checkpoint {ckpt}: {e}") from e
    if not arrays:
        raise DataError(f"{ckpt} holds no crossbar arrays (exact-mode run)")
    try:
        offsets = [float(v) for v in args.offsets.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"--offsets: {e}") from e
    t_end = float(extra["t_end"])
    rows = evaluate_inference_over_time(arrays, _dataset(cfg), [t_end + o for o in offsets],
                                        extra["activations"], not args.test_only)
    path = Path(cfg.output.dir) / "drift.csv"
    write_csv(path, DRIFT_HEADER, rows, extra.get("config_digest", cfg.digest()))
    print(",".join(DRIFT_HEADER))
    for t, tr, te in rows:
        print(f"{t:.1f},{tr:.4f},{te:.4f}")


def cmd_fd(args, cfg):
    a = np.array(_float_rows_any(args.features_a))
    b = np.array(_float_rows_any(args.features_b))
    print(f"{frechet_distance(a, b):.10g}")


def _float_rows_any(path):
    try:
        _, rows = read_csv(path)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from e
    try:
        return [[float(v) for v in r] for r in rows]
    except ValueError as e:
        raise DataError(f"{path}: non-numeric value ({e})") from e


def _load_counters(path) -> EventCounters:
    p = Path(path)
    try:
        if p.suffix == ".json":
            return EventCounters.from_dict(json.loads(p.read_text()))
        header, rows = read_csv(p)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
        raise DataError(f"cannot read counters from {path}: {e}") from e
    if not header or not rows:
        raise DataError(f"{path}: expected a header and at least one row")
    last = dict(zip(header, rows[-1]))
    known = {f for f in EventCounters().as_dict()}
    return EventCounters.from_dict({k: int(float(v)) for k, v in last.items() if k in known})


def cmd_report(args, cfg):
    c = _load_counters(args.counters)
    costs = UnitCosts(args.set_pulse_cost, args.reset_pulse_cost, args.device_read_cost, args.chi_write_cost,
                      args.refresh_event_cost)
    rep = cost_report(c, costs)
    counts = c.as_dict()
    rows = [(k, counts.get(k, ""), v) for k, v in rep.items()]
    path = Path(cfg.output.dir) / "cost_report.csv"
    write_csv(path, ("stage", "count", "cost"), rows, cfg.digest())
    print("stage,count,cost")
    for k, n, v in rows:
        print(f"{k},{n},{v:.6g}")


COMMANDS = {"characterize": cmd_characterize, "calibrate": cmd_calibrate, "train": cmd_train,
            "eval-drift": cmd_eval_drift, "fd": cmd_fd, "report": cmd_report}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"mcasim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as e:
        print(f"mcasim: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"mcasim: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, ValueError, OSError, FloatingPointError) as e:
        print(f"mcasim: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
