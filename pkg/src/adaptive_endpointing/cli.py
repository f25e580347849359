"""Command line entry point: ``adaptive-ep {generate,run,sweep,report}``.

Errors exit nonzero and print ``error[<category>]: <message>`` on stderr,
where category is one of config, corpus, validation, shape, contract,
training, insufficient_sample, report, io or internal.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, EndpointingError
from .experiments import (
    ExperimentConfig, PRESETS, apply_overrides, cmd_generate, cmd_report, cmd_run, cmd_sweep,
    default_output_root, load_run, preset_configs, resolve_output_dir,
)


def _config(args) -> ExperimentConfig:
    import yaml

    data = {}
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {args.config} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
    return ExperimentConfig.from_dict(apply_overrides(data, args.set))


def _add_config_args(p):
    p.add_argument("--config", "-c", help="YAML or JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. generator.n_utterances=5000")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptive-ep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic corpus and write it to disk")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="corpus directory")

    p = sub.add_parser("run", help="run one experiment config")
    _add_config_args(p)
    p.add_argument("--out", help="run directory (default: $ADAPTIVE_EP_OUTPUT_ROOT/<name>-<hash>)")

    p = sub.add_parser("sweep", help="run a preset or several configs in a worker pool")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--configs", nargs="*", default=[], help="config files to run")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override applied to every config")
    p.add_argument("--seed", type=int, default=0, help="preset seed")
    p.add_argument("--n-utterances", type=int, help="preset corpus size")
    p.add_argument("--out", help="root directory for the runs")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="Table-2 style comparison of finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--csv", help="also write the table as CSV here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            manifest = cmd_generate(_config(args), args.out)
            print(json.dumps(manifest["splits"], indent=2, sort_keys=True))
        elif args.command == "run":
            cfg = _config(args)
            out = Path(args.out) if args.out else resolve_output_dir(cfg)
            result = cmd_run(cfg, out)
            _, table = cmd_report([result])
            print(table, end="")
            print(f"wrote {out}")
        elif args.command == "sweep":
            configs = []
            if args.preset:
                kwargs = {"seed": args.seed}
                if args.n_utterances:
                    kwargs["n_utterances"] = args.n_utterances
                configs += preset_configs(args.preset, **kwargs)
            for path in args.configs:
                import yaml

                configs.append(ExperimentConfig.from_dict(yaml.safe_load(Path(path).read_text())))
            if not configs:
                raise ConfigError("sweep needs --preset or --configs")
            if args.set:
                configs = [ExperimentConfig.from_dict(apply_overrides(c.to_dict(), args.set))
                           for c in configs]
            root = Path(args.out) if args.out else default_output_root() / (args.preset or "sweep")
            dirs = cmd_sweep(configs, root, args.workers)
            csv_text, table = cmd_report([load_run(d) for d in dirs])
            (root / "report.csv").write_text(csv_text)
            (root / "report.txt").write_text(table)
            print(table, end="")
        elif args.command == "report":
            csv_text, table = cmd_report([load_run(d) for d in args.runs])
            if args.csv:
                Path(args.csv).write_text(csv_text)
            print(table, end="")
    except EndpointingError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
