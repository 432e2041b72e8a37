"""Command line entry point: ``dkg-lab <scenario> --config <file> [--out <dir>] [--seed <n>]``.

Exit codes: 0 when every check passes, 1 when the run completed but a check
failed, 2 on a configuration error, 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SCENARIOS, ConfigError, ExperimentConfig
from .experiments import format_report, report_rows, run

EXIT_PASS, EXIT_FAIL, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dkg-lab", description="Damped Klein-Gordon numerical lab")
    ap.add_argument("scenario", choices=SCENARIOS)
    ap.add_argument("--config", type=Path, help="TOML experiment file (defaults apply when omitted)")
    ap.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    ap.add_argument("--seed", type=int, help="seed for randomized suites (overrides seed)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(args.scenario)
        cfg.scenario = args.scenario
        if args.seed is not None:
            cfg.seed = args.seed
        if out is None:
            out = Path(cfg.output_dir)
        man = run(cfg, out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except (OSError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(format_report(report_rows([man])), end="")
    print(f"status: {man.status}  manifest: {out / 'manifest.json'}")
    if man.status == "error":
        print(man.error, file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_PASS if man.status == "pass" else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
