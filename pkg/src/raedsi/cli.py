"""Command-line entry point: ``raedsi <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl
from .artifacts import MissingArtifactError
from .core import NumericalError, SchemaError
from .rae import TrainingDivergedError
from .rs import NoSamplesAccepted
from .synth import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    common.add_argument("--output-dir", help=f"artifact directory (the {pl.OUTPUT_ENV} variable takes precedence)")
    common.add_argument("--seed", type=int, help="override every stage seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override one config value, e.g. sampler.n_a=8")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--n-prior", type=int, help="prior ensemble size")
    common.add_argument("--epochs", type=int, help="RAE training epochs")
    common.add_argument("--n-a", type=int, help="number of ESMDA assimilations")
    common.add_argument("--methods", help="comma-separated posterior methods")
    common.add_argument("--rs-prior", type=int, help="rejection-sampling prior size")

    parser = _Parser(prog="raedsi", description="Data-space inversion with recurrent autoencoders.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [
        ("generate-prior", "simulate the prior ensemble, truth and observations"),
        ("train", "fit PCA+HT and/or train the RAE"),
        ("assimilate", "compute posterior ensembles for the configured methods"),
        ("rs", "rejection sampling reference posterior"),
        ("evaluate", "diagnostic tables and the KS summary"),
        ("pipeline", "run every stage in order"),
        ("show-config", "print the effective config as JSON"),
    ]:
        sub.add_parser(name, parents=[common], help=text)
    return parser


def config_from_args(args) -> dict:
    overrides: dict = {}

    def put(dotted, value):
        nonlocal overrides
        overrides = _deep_update(overrides, pl.set_path({}, dotted, value))

    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        put(key, value)
    if args.output_dir:
        put("output_dir", args.output_dir)
    if args.n_prior is not None:
        put("forward_model.n_prior", args.n_prior)
    if args.epochs is not None:
        put("parameterization.rae.epochs", args.epochs)
    if args.n_a is not None:
        put("sampler.n_a", args.n_a)
    if args.methods:
        put("sampler.methods", [m.strip() for m in args.methods.split(",") if m.strip()])
    if args.rs_prior is not None:
        put("rs.n_prior", args.rs_prior)
    if args.seed is not None:
        put("seed", args.seed)
        put("seeds", {})
    return pl.load_config(args.config, overrides)


def _deep_update(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_update(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) and v else v
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        out = pl.output_dir(cfg)
        if args.command == "show-config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
        elif args.command == "generate-prior":
            pl.generate_prior(cfg, out)
        elif args.command == "train":
            pl.train(cfg, out)
        elif args.command == "assimilate":
            pl.assimilate(cfg, out)
        elif args.command == "rs":
            pl.rejection(cfg, out)
        elif args.command == "evaluate":
            print(json.dumps(pl.evaluate(cfg, out)["ks_vs_rs"], indent=2, sort_keys=True))
        elif args.command == "pipeline":
            print(json.dumps(pl.run_pipeline(cfg, out)["ks_vs_rs"], indent=2, sort_keys=True))
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingDivergedError, NoSamplesAccepted) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
