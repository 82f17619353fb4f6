"""Command line entry point: run, compare, sweep and report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .experiment import (
    PRESETS, ConfigError, ExperimentConfig, compare, derive_config, heads_sweep, report_dir, run,
    tomllib,
)
from .metrics import EQ4_MODES
from .strategies import STRATEGIES


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse prints free text and exits 2; route through the JSON error path instead
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([(key, f"{p} is not a section")])
    node[parts[-1]] = value


def load_config(source: str, args: argparse.Namespace) -> ExperimentConfig:
    """Read a preset name or TOML file and apply command line overrides."""
    if source in PRESETS and not Path(source).exists():
        from importlib import resources
        raw = tomllib.loads(resources.files("multiloss").joinpath(f"presets/{source}.toml").read_text())
        base = Path.cwd()
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError([("config", f"file not found: {source}")])
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([("config", f"{source}: {exc}")]) from None
        base = path.parent
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError([("--set", f"expected key=value, got {item!r}")])
        key, value = item.split("=", 1)
        _set_dotted(raw, key.strip(), _parse_value(value.strip()))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.ece_bins is not None:
        raw.setdefault("eval", {})["ece_bins"] = args.ece_bins
    if args.eq4_mode is not None:
        raw.setdefault("eval", {})["eq4_mode"] = args.eq4_mode
    if getattr(args, "out", None) is not None:
        raw["out"] = args.out
    return ExperimentConfig.from_dict(raw, base_dir=base)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--ece-bins", type=int, dest="ece_bins", help="number of ECE bins")
    common.add_argument("--eq4-mode", choices=EQ4_MODES, dest="eq4_mode", help="class-variance normalization")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="multiloss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="train and evaluate one config")
    p.add_argument("config", help=f"TOML file or preset name ({', '.join(PRESETS)})")

    p = sub.add_parser("compare", parents=[common], help="run several configs into one table")
    p.add_argument("configs", nargs="+")
    p.add_argument("--strategies", help=f"derive one config per strategy from the first config ({','.join(STRATEGIES)})")

    p = sub.add_parser("sweep", parents=[common], help="multi-loss accuracy vs number of heads")
    p.add_argument("config")
    p.add_argument("--heads", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, starting at the config seed")
    p.add_argument("--losses", help="comma-separated loss order (defaults to the config's losses)")

    p = sub.add_parser("report", help="rebuild the comparison table from a results directory")
    p.add_argument("dir")
    return parser


def _default_out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.out) if cfg.out else Path("runs") / name


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "run":
            cfg = load_config(args.config, args)
            out = _default_out(cfg, f"{cfg.strategy}-seed{cfg.seed}")
            rec = run(cfg, out)
            print(json.dumps(rec.summary(), sort_keys=True))
        elif args.command == "compare":
            configs = [load_config(c, args) for c in args.configs]
            if args.strategies:
                names = [s.strip() for s in args.strategies.split(",") if s.strip()]
                bad = [s for s in names if s not in STRATEGIES]
                if bad:
                    raise ConfigError([("--strategies", f"unknown strategies {bad}")])
                configs = [derive_config(configs[0], s) for s in names]
            out = _default_out(configs[0], "compare")
            rows, _ = compare(configs, out, workers=args.jobs)
            sys.stdout.write((out / "comparison.csv").read_text())
        elif args.command == "sweep":
            cfg = load_config(args.config, args)
            order = [s.strip() for s in args.losses.split(",")] if args.losses else list(cfg.losses)
            seeds = [cfg.seed + k for k in range(args.seeds)]
            out = _default_out(cfg, "sweep")
            heads_sweep(cfg, args.heads, order, seeds, out, workers=args.jobs)
            sys.stdout.write((out / "sweep.csv").read_text())
        else:
            sys.stdout.write(report_dir(args.dir))
        return 0
    except Exception as exc:  # every failure becomes one machine-readable line
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigError):
            err["fields"] = [f for f, _ in exc.problems]
        sys.stderr.write(json.dumps(err) + "\n")
        return 2 if isinstance(exc, (ConfigError, UsageError)) else 1


if __name__ == "__main__":
    sys.exit(main())
