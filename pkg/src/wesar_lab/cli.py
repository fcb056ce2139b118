"""Command-line entry point: ``wesar-lab {train,eval,inspect-init,merge,verify}``.

Exit codes: 0 ok, 1 runtime failure (divergence, I/O, bad checkpoint),
2 usage or configuration error, 3 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import reparam, verify
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_help, parse_config_text
from .errors import ConfigError, DivergedError, InputError, StaleCacheError
from .initializers import std_table
from .trainer import eval_perplexity, load_corpus, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3
TABLE_COLUMNS = ("he_virtual", "he_actual", "small_virtual", "small_actual", "wesar_virtual", "wesar_actual", "wesar_gate")


def _load(path: str, overrides: list[str]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_config_text(text)
    values.update(parse_config_text("\n".join(overrides)))
    return RunConfig.from_values(values, base_dir=Path(path).parent)


def cmd_train(args) -> int:
    cfg = _load(args.config, args.set)
    result = train(cfg, progress_every=0 if args.quiet else 100)
    print(f"steps {cfg.optim.total_steps}  final_loss {result.final_loss:.6f}  spikes {len(result.spikes)}  seconds {result.seconds:.1f}")
    print(f"checkpoint {cfg.checkpoint_path}")
    print(f"telemetry {cfg.csv_path}")
    if result.spikes and args.fail_on_spike:
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.data, args.heldout_fraction)
    data = corpus.heldout if args.heldout_fraction > 0 else corpus.train
    print(f"perplexity {eval_perplexity(model, data):.9g}")
    return EXIT_OK


def std_table_text(rows) -> str:
    header = ("role",) + TABLE_COLUMNS
    body = [[r["role"]] + [f"{r[c]:.6e}" for c in TABLE_COLUMNS] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def std_table_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("role",) + TABLE_COLUMNS)
    for r in rows:
        writer.writerow([r["role"]] + [repr(float(r[c])) for c in TABLE_COLUMNS])
    return buf.getvalue()


def cmd_inspect_init(args) -> int:
    cfg = _load(args.config, args.set)
    sigma = cfg.reparam.sigma
    rows = std_table(cfg.model.d, cfg.model.n_layers, sigma, cfg.init.backbone)
    print(f"d={cfg.model.d} N={cfg.model.n_layers} sigma={sigma:.6e} scheme={cfg.init.scheme} backbone={cfg.init.backbone}")
    print(std_table_text(rows))
    print()
    print(std_table_csv(rows), end="")
    if args.csv:
        Path(args.csv).write_text(std_table_csv(rows), encoding="utf-8")
    return EXIT_OK


def cmd_merge(args) -> int:
    model = load_checkpoint(args.inp)
    reparam.merge_gates(model)
    save_checkpoint(model, args.out)
    print(f"merged {args.inp} -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = [s for item in (args.suite or []) for s in item.split(",") if s]
    results = verify.run_suites(suites)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} probes passed")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (key = value, '#' comments):\n" + config_help()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="wesar-lab", description=__doc__, epilog=epilog, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file", epilog=epilog, formatter_class=fmt)
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--quiet", action="store_true", help="no progress logging")
    p.add_argument("--fail-on-spike", action="store_true", help="exit 1 if the spike detector fired")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--heldout-fraction", type=float, default=0.1,
                   help="evaluate on this trailing fraction of --data (0 evaluates the whole file)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-init", help="print the initialization std table", epilog=epilog, formatter_class=fmt)
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--csv", help="also write the table as CSV to this file")
    p.set_defaults(func=cmd_inspect_init)

    p = sub.add_parser("merge", help="fold WeSaR gates into the weights")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("verify", help="run numerical probes")
    p.add_argument("--suite", action="append", help=f"one of {', '.join(verify.SUITES)} (repeatable; default all)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergedError, InputError, StaleCacheError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
