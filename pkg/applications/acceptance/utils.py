"""
Module containing utilities shared by the acceptance runs
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional
import argparse
import logging

import polars as pl

import voxjepa as vj
from voxjepa.cli import main as cli_main

log = logging.getLogger(__name__)


def get_parser(description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description=description,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=vj.resources_root() / "configs" / "desk_scale.yaml",
        help="Run config the acceptance run starts from.",
    )
    parser.add_argument("--out", type=Path, default=Path("runs/acceptance"), help="Run output root.")
    parser.add_argument("--threads", type=int, default=4, help="Worker cap for every stage.")
    parser.add_argument(
        "--skip-pipeline",
        action="store_true",
        help="Reuse stage outputs already under --out instead of rerunning the pipeline.",
    )
    return parser


@dataclass
class Check:
    criterion: str
    value: Optional[float]
    threshold: float
    passed: bool
    note: str = ""


def at_least(criterion: str, value: Optional[float], threshold: float, note: str = "") -> Check:
    ok = value is not None and value >= threshold
    return Check(criterion, value, threshold, ok, note)


def at_most(criterion: str, value: Optional[float], threshold: float, note: str = "") -> Check:
    ok = value is not None and value <= threshold
    return Check(criterion, value, threshold, ok, note)


def run_stages(stages: List[str], config_path: Path, out: Path, threads: int) -> None:
    for stage in stages:
        code = cli_main([stage, "--config", str(config_path), "--out", str(out), "--threads", str(threads)])
        if code != 0:
            raise RuntimeError(f"`voxjepa {stage}` exited with code {code}")


def checks_frame(checks: List[Check]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "criterion": [c.criterion for c in checks],
            "value": [float("nan") if c.value is None else float(c.value) for c in checks],
            "threshold": [c.threshold for c in checks],
            "passed": [c.passed for c in checks],
            "note": [c.note for c in checks],
        }
    )
