"""Command line entry point.

    fusionfilter train-all       [-c CONFIG] [--set key=value ...]
    fusionfilter tradeoff        [-c CONFIG] [--set key=value ...]
    fusionfilter energy          [-c CONFIG] [--set key=value ...]
    fusionfilter compact         [-c CONFIG] [--set key=value ...]
    fusionfilter validate-config [-c CONFIG] [--set key=value ...]

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error. FUSIONFILTER_OUTPUT_DIR overrides ``output_dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import load_config
from .errors import FusionFilterError

log = logging.getLogger("fusionfilter")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad arguments; 2 is reserved for data errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionfilter", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="YAML experiment config (defaults are used for missing keys)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one dotted config key, e.g. --set train.server.epochs=10 (repeatable)",
    )
    common.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-all", parents=[common], help="train server, near-sensor and edge models")
    sub.add_parser("tradeoff", parents=[common], help="data-efficiency vs. quality-loss curves")
    sub.add_parser("energy", parents=[common], help="per-pipeline energy breakdown over FoI prevalence")
    sub.add_parser("compact", parents=[common], help="edge model size vs. quality loss")
    sub.add_parser("validate-config", parents=[common], help="check a config and print its hash")
    return p


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.command == "validate-config":
        print(json.dumps({"config_hash": cfg.config_hash, "output_dir": str(cfg.output_dir), "seeds": list(cfg.seeds)}))
        return 0

    from . import harness

    rep = None
    if args.command == "train-all":
        m = harness.cmd_train_all(cfg)
        trained = sum(1 for s in m.stages.values() if s == "trained")
        print(f"train-all: {trained} stage(s) trained, {len(m.stages) - trained} skipped; manifest {m.digest}")
    elif args.command == "tradeoff":
        rep = harness.cmd_tradeoff(cfg)
        for c in rep.comparisons:
            print(
                f"efficiency {c.efficiency:.2f}: quality loss fusion-aware {c.loss_fusion_aware:+.4f}, "
                f"uni-modal {c.loss_unimodal:+.4f}"
            )
    elif args.command == "energy":
        rep = harness.cmd_energy(cfg)
        for p, by_pipe in rep.mean_savings.items():
            cells = ", ".join(f"{k} {v:.2f}x" for k, v in by_pipe.items())
            print(f"p={p:g}: {cells}")
    elif args.command == "compact":
        rep = harness.cmd_compact(cfg)
        for r in rep.rows:
            print(
                f"ratio {r.size_ratio:g} ({r.params_with} params): F1 with scores {r.f1_with_scores:.4f}, "
                f"baseline {r.f1_baseline:.4f}"
            )
    if rep is not None:
        for path in rep.paths.values():
            print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and argument errors
        return exc.code if isinstance(exc.code, int) else 0
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return _run(args)
    except FusionFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 3
