import os
import shutil
import subprocess
from pathlib import Path

import pytest


@pytest.fixture(scope="session")
def care_bin():
    path = os.environ.get("CARE_RL_BIN") or shutil.which("care-rl")
    if not path:
        candidate = Path(__file__).resolve().parents[2] / "build" / "care-rl"
        path = str(candidate) if candidate.exists() else None
    if not path:
        pytest.skip("care-rl binary not found (set CARE_RL_BIN)")
    return path


@pytest.fixture
def run_cli(care_bin):
    def run(*args, env=None):
        full_env = dict(os.environ)
        full_env.pop("CARE_RL_SEED", None)
        if env:
            full_env.update(env)
        return subprocess.run([care_bin, *map(str, args)], capture_output=True, text=True, env=full_env)

    return run


SMALL = [
    "--train-count", "40", "--l1-count", "10", "--l2-count", "10", "--l3-count", "10",
]


@pytest.fixture
def small_data(run_cli, tmp_path):
    out = tmp_path / "data"
    r = run_cli("gen-data", "--seed", "5", "--out", out, *SMALL)
    assert r.returncode == 0, r.stderr
    return out
