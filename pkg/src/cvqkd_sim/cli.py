"""Command-line front end.

    cvqkd-sim calibrate --config run.toml --out out/cal
    cvqkd-sim simulate  --config run.toml --frames 4 --workers 4
    cvqkd-sim keyrate   --t-db -25 --epsilon 0.029
    cvqkd-sim channel-model --config run.toml
    cvqkd-sim sweep     --config run.toml

On failure the exit code is nonzero and a JSON object describing the error is
written to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from . import config as cfgmod
from .errors import ConfigurationError, CvqkdError
from .scenarios import run_keyrate, run_scenario

COMMANDS = {
    "calibrate": "calibrate",
    "simulate": None,
    "keyrate": None,
    "channel-model": "channel_model",
    "sweep": "keyrate_sweep",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvqkd-sim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML scenario file")
        p.add_argument("--seed", type=int)
        p.add_argument("--frames", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)
        if name == "keyrate":
            p.add_argument("--t-db", type=float, help="channel transmittance in dB (negative)")
            p.add_argument("--epsilon", type=float, help="excess noise at the input, SNU")
    return parser


def resolve_config(args) -> cfgmod.ScenarioConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ScenarioConfig()
    over = {k: v for k, v in (("seed", args.seed), ("frames", args.frames),
                              ("output_dir", args.out), ("workers", args.workers)) if v is not None}
    fixed = COMMANDS[args.command]
    if fixed is not None:
        over["scenario"] = fixed
    elif args.command == "simulate" and cfg.scenario not in ("fixed_loss", "turbulence"):
        raise ConfigurationError(f"simulate runs fixed_loss or turbulence scenarios, not {cfg.scenario!r}")
    return cfg.replace(**over) if over else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "keyrate":
            manifest = run_scenario(cfg, run_keyrate, t_db=args.t_db, epsilon=args.epsilon)
        else:
            manifest = run_scenario(cfg)
    except CvqkdError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return 2
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io", "message": str(exc)}) + "\n")
        return 3
    print(json.dumps({"output_dir": cfg.output_dir, "files": sorted(manifest["files"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
