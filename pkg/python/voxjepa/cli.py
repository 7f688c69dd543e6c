"""
Command-line entry point: `voxjepa <subcommand> [--config PATH] [--seed N] [--threads N]
[--out DIR] [--verbose]`.

Each subcommand stages its outputs in a temporary sibling directory, writes
`run_manifest.json` next to them and promotes everything into place only on success.
Exit codes: 0 success, 2 configuration or usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations
import argparse
import logging
import platform
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Dict, List, Optional

from voxjepa.errors import ConfigError, DataError, NumericalError
from voxjepa.pipeline import STAGES, run_stage
from voxjepa.run_config import OUT_DIR_ENV, RunConfig, load_run_config
from voxjepa.utilities import atomic_output_dir, write_json

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

MANIFEST_NAME = "run_manifest.json"
VERSIONED_PACKAGES = ("voxjepa", "numpy", "scipy", "scikit-learn", "polars")


def get_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Run config file (.json, .yaml, .msgpack).")
    common.add_argument("--seed", type=int, default=None, help="Global seed, overrides the config.")
    common.add_argument("--threads", type=int, default=None, help="Worker cap, overrides the config.")
    common.add_argument(
        "--out",
        type=Path,
        default=None,
        help=f"Run output root, overrides the config and ${OUT_DIR_ENV}.",
    )
    common.add_argument("--verbose", action="store_true", help="Debug logging and progress bars.")
    parser = argparse.ArgumentParser(
        prog="voxjepa",
        description="Desk-scale volumetric JEPA pipeline on synthetic head phantoms.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, stage in STAGES.items():
        doc = (stage.run.__doc__ or "").strip().splitlines()
        sub.add_parser(name, parents=[common], help=doc[0] if doc else name)
    return parser


def package_versions() -> Dict[str, str]:
    out = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            out[name] = version(name)
        except PackageNotFoundError:
            out[name] = "unknown"
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    return config.with_overrides(seed=args.seed, threads=args.threads, out_dir=args.out).seeded()


def run_command(command: str, config: RunConfig, config_path: Optional[Path], verbose: bool) -> Path:
    """Runs one stage with atomic promotion and returns the promoted output directory."""
    stage = STAGES[command]
    dest = stage.output(config)
    t0 = time.perf_counter()
    with atomic_output_dir(dest) as staging:
        summary = run_stage(command, config, staging, verbose)
        manifest: Dict[str, Any] = {
            "subcommand": command,
            "config_path": None if config_path is None else str(config_path),
            "config_hash": config.hash(),
            "config": config.to_pydict(),
            "seed": config.seed,
            "inputs": {k: str(v) for k, v in stage.inputs(config).items()},
            "outputs": sorted(p.name for p in staging.iterdir()),
            "summary": summary,
            "versions": package_versions(),
            "wall_time_s": time.perf_counter() - t0,
        }
        write_json(staging / MANIFEST_NAME, manifest)
    log.info(f"{command} finished; outputs in {dest}")
    return dest


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = get_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 0 for --help and 2 for usage errors
        return int(err.code or 0)
    configure_logging(args.verbose)
    try:
        config = resolve_config(args)
        run_command(args.command, config, args.config, args.verbose)
    except ConfigError as err:
        log.error(f"config error: {err}")
        return EXIT_CONFIG
    except DataError as err:
        log.error(f"data error: {err}")
        return EXIT_DATA
    except NumericalError as err:
        log.error(f"numerical failure: {err}")
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
