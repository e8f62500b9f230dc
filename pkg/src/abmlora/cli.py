"""Command-line entry point.

    abmlora run|race|ablate|validate|inspect-checkpoint --config PATH [--out DIR] [--workers N]

Exit codes: 0 success, 2 invalid config or input, 3 a run failed or an
internal consistency check did not hold (artifacts are flagged INCOMPLETE).
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import AbmLoraError, ConfigError, DataError
from .experiment import ablate, format_table, load_config, race, run_experiment
from .lora import load_adapters, read_checkpoint_meta

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
COMMANDS = ("run", "race", "ablate", "validate", "inspect-checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abmlora", description="Activation boundary matching for LoRA")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True,
                        help="experiment YAML, or the checkpoint file for inspect-checkpoint")
    parser.add_argument("--out", default=None, help="output directory (overrides config.output)")
    parser.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    return parser


def inspect_checkpoint(path) -> dict:
    meta = read_checkpoint_meta(path)
    layers = {}
    for name, ad in load_adapters(path).items():
        layers[name] = {"shape_A": list(ad.A.shape), "shape_B": list(ad.B.shape), "rank": ad.rank,
                        "alpha": ad.alpha, "eta": ad.eta, "seed": ad.seed,
                        "parameters": ad.num_parameters(),
                        "delta_fro": float(np.linalg.norm(ad.delta()))}
    return {"version": meta["version"], "extra": meta.get("extra", {}), "layers": layers}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "inspect-checkpoint":
            print(json.dumps(inspect_checkpoint(args.config), indent=2, sort_keys=True))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok")
            return EXIT_OK
        runner = {"run": run_experiment, "race": race, "ablate": ablate}[args.command]
        outcome = runner(cfg, args.out, args.workers)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except AbmLoraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(format_table(outcome.metrics["summary"]))
    for w in outcome.metrics.get("wins", []):
        print(f"{w['challenger']} vs {w['baseline']}: step-10 loss lower in {w['step10_loss_wins']}/{w['seeds']}"
              f" seeds, early info loss lower in {w['early_total_wins']}/{w['seeds']}")
    print(f"results in {outcome.out_dir}")
    if not outcome.ok:
        for f in outcome.metrics["failed_runs"]:
            print(f"failed: {f['scheme']} seed {f['seed']}: {f['status']} {f['message']}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
