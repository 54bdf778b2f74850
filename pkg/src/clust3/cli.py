"""``clust3`` command line: gen-data, train, adapt, eval, fig1, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 missing input, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import harness
from .errors import ConfigError, ContractError, StructureError

EXIT_CONFIG = 2
EXIT_MISSING = 3


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. adapt.J=1 (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="clust3", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/test dataset dumps")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="joint training of classifier and projectors")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("adapt", help="test-time adaptation on the corrupted test stream")
    _common(p)
    p.add_argument("--run", required=True, help="directory written by 'train'")
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="eval-mode accuracy on clean and corrupted test sets")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = sub.add_parser("fig1", help="1-D equal-mass clustering entropy under shift")
    p.add_argument("--k", type=int, action="append", help="cluster count (repeatable)")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train and adapt over a projector grid")
    _common(p)
    p.add_argument("--grid", required=True, choices=sorted(harness.ABLATION_GRIDS))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="markdown tables from result CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    return parser


def _config(args):
    if args.config is not None and not Path(args.config).is_file():
        raise FileNotFoundError(args.config)
    return config_mod.load(args.config, args.set)


def _require(*paths):
    for path in paths:
        if not Path(path).exists():
            raise FileNotFoundError(str(path))


def run(args):
    cmd = args.command
    if cmd == "gen-data":
        harness.gen_data(_config(args), args.out, args.config)
    elif cmd == "train":
        cfg = _config(args)
        _require(Path(args.data) / "train.bin", Path(args.data) / "test.bin")
        _, log = harness.train_run(cfg, args.data, args.out, args.seed, args.config)
        if log:
            print(f"test accuracy {log[-1]['test_acc']:.4f}")
    elif cmd == "adapt":
        _require(Path(args.run) / "model.ckpt", Path(args.data) / "test.bin")
        cfg = _config(args) if args.config or args.set else None
        if cfg is not None:
            run_cfg = config_mod.load(Path(args.run) / "config.json")
            cfg = harness.for_seed(cfg, run_cfg.train.seed)
        result = harness.adapt_run(cfg, args.run, args.data, args.out)
        for method, info in harness.summarize(result.rows).items():
            print(f"{method}: {info['mean_accuracy']:.4f}")
    elif cmd == "eval":
        _require(Path(args.run) / "model.ckpt", Path(args.data) / "test.bin")
        cfg = _config(args) if args.config or args.set else None
        for key, acc in harness.eval_run(cfg, args.run, args.data, args.out).items():
            print(f"{key}: {acc:.4f}")
    elif cmd == "fig1":
        rows = harness.fig1(args.out, tuple(args.k or (2, 5, 10, 20)), args.n, args.seed)
        for r in rows:
            print(f"K={r['K']}: source {r['source_bits']:.4f} bits, target {r['target_bits']:.4f} bits")
    elif cmd == "ablate":
        _require(Path(args.data) / "train.bin")
        harness.ablate(_config(args), args.grid, args.data, args.out)
    elif cmd == "report":
        _require(*args.inputs)
        text = harness.report(args.inputs, args.out)
        if args.out is None:
            sys.stdout.write(text)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, StructureError) as exc:
        print(f"missing or unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
