import os
import subprocess
import sys
from pathlib import Path
from typing import List

import pytest

DEMO_TIMEOUT_S = 900


def demo_paths() -> List[Path]:
    here = Path(__file__).resolve()
    return sorted(p for p in here.parent.glob("*_demo.py") if p != here)


@pytest.mark.parametrize("demo_path", demo_paths(), ids=[dp.name for dp in demo_paths()])
def test_demo(demo_path: Path, tmp_path: Path):
    # demos run headless in a scratch dir so stray outputs never land in the checkout
    env = dict(os.environ, SHOW_PLOTS="false", PYTEST="true", MPLBACKEND="Agg")
    env["VOXJEPA_OUT_DIR"] = str(tmp_path / "runs")
    rslt = subprocess.run(
        [sys.executable, str(demo_path)],
        cwd=tmp_path,
        env=env,
        capture_output=True,
        text=True,
        timeout=DEMO_TIMEOUT_S,
    )
    assert rslt.returncode == 0, rslt.stderr
