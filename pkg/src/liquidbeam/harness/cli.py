"""Command line entry point: ``liquidbeam <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..dataset import (DataError, DatasetFormatError, DatasetIOError, generate_dataset,
                       read_dataset, write_dataset)
from ..models import MODEL_KINDS
from ..tensor import CheckpointFormatError, ConfigurationError
from .config import ConfigError, RunConfig, parse_config
from .evaluate import evaluate, write_report_csv
from .suites import gradient_suite, selftest
from .sweep import AXES, MissingCheckpointError, run_sweep
from .train import train

log = logging.getLogger("liquidbeam")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file")
    p.add_argument("--preset", help="full | desk | tiny")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (sweep: comma list via --set seeds=1,2,3)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liquidbeam", description="Continuous-time beam tracking experiments")
    sub = ap.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="generate a training/validation dataset pair")
    _common(g)
    g.add_argument("--out", required=True, help="training split path; validation goes to <stem>.val<suffix>")
    g.add_argument("--split", choices=("both", "train", "val"), default="both")

    t = sub.add_parser("train", help="train one model kind")
    _common(t)
    t.add_argument("--kind", choices=MODEL_KINDS)
    t.add_argument("--data", help="training dataset (generated from the config when omitted)")
    t.add_argument("--out", help="output directory for checkpoint and loss CSV")

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--kind", choices=MODEL_KINDS)
    e.add_argument("--out", help="directory for the report CSV and figure")

    s = sub.add_parser("sweep", help="slot / instant / noise-factor sweeps over a run directory")
    _common(s)
    s.add_argument("--axis", choices=AXES + ("all",), default="all")
    s.add_argument("--out", help="run directory (default: config out_dir or $LIQUIDBEAM_OUT_DIR)")
    s.add_argument("--kinds", default=",".join(MODEL_KINDS))
    s.add_argument("--fit", action="store_true", help="train missing checkpoints instead of failing")
    s.add_argument("--no-plot", action="store_true")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    st = sub.add_parser("selftest", help="property invariants")
    st.add_argument("--seed", type=int, default=0)
    return ap


def _config(args) -> RunConfig:
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seeds"] = args.seed
    if getattr(args, "kind", None):
        flags["model"] = args.kind
    return parse_config(args.config, args.set, args.preset, **flags)


def _val_path(out: Path) -> Path:
    return out.with_name(out.stem + ".val" + out.suffix)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    n_train = cfg.n_train if args.split != "val" else 1
    n_val = cfg.n_val if args.split != "train" else 1
    tr, va = generate_dataset(cfg.scene, n_train, n_val, cfg.seed, tuple(sorted(cfg.tbars)), cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.split in ("both", "train"):
        write_dataset(out, tr)
        print(f"wrote {out} ({len(tr)} episodes)")
    if args.split in ("both", "val"):
        vp = _val_path(out) if args.split == "both" else out
        write_dataset(vp, va)
        print(f"wrote {vp} ({len(va)} episodes)")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data:
        ds = read_dataset(args.data)
    else:
        ds, _ = generate_dataset(cfg.scene, cfg.n_train, 1, cfg.seed, tuple(sorted(cfg.tbars)), cfg.workers)
    out = Path(args.out) if args.out else cfg.resolved_out_dir()
    res = train(cfg, ds, out_dir=out)
    from .plotting import plot_loss
    png = plot_loss(res.losses, out / f"{cfg.model}_loss.png", cfg.model)
    print(f"final loss {res.losses[-1]:.6g}; checkpoint {res.checkpoint}; loss curve {res.loss_csv}, {png}")
    return 0


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    report = evaluate(args.checkpoint, ds, args.kind)
    print(f"mean SE_N {report.overall:.6g}")
    print("by slot   " + " ".join(f"{v:.4f}" for v in report.by_slot))
    print("by instant " + " ".join(f"{v:.4f}" for v in report.by_tbar))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(args.checkpoint).stem
        write_report_csv(out / f"{stem}_eval.csv", report)
        from .plotting import plot_report
        plot_report(report, out / f"{stem}_eval.png", stem)
        print(f"wrote {out / f'{stem}_eval.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    bad = [k for k in kinds if k not in MODEL_KINDS]
    if bad:
        raise ConfigError(f"unknown model kind(s) {bad}; choose from {MODEL_KINDS}")
    axes = AXES if args.axis == "all" else (args.axis,)
    run_dir = Path(args.out) if args.out else cfg.resolved_out_dir()
    cache: dict = {}
    for axis in axes:
        res = run_sweep(cfg, axis, run_dir, kinds, fit=args.fit, plot=not args.no_plot, cache=cache)
        print(res.csv_path.read_text().rstrip())
        print(f"wrote {res.csv_path}" + (f", {res.figure_path}" if res.figure_path else ""))
    return 0


def _print_checks(checks) -> int:
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} passed")
    return 0 if failed == 0 else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "gradcheck": lambda a: _print_checks(gradient_suite(a.seed)),
            "selftest": lambda a: _print_checks(selftest(a.seed))}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0
        if argv:
            print(f"liquidbeam: unknown command {argv[0]!r}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ConfigurationError, DataError, DatasetFormatError, DatasetIOError,
            CheckpointFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
