"""Shared fixtures: golden regression values recorded at first build."""

import json
from pathlib import Path

import pytest

GOLDEN_PATH = Path(__file__).parent / "golden" / "goldens.json"


@pytest.fixture(scope="session")
def goldens():
    if not GOLDEN_PATH.exists():
        pytest.fail(
            f"{GOLDEN_PATH} missing; run scripts/regen_goldens.py to record it"
        )
    return json.loads(GOLDEN_PATH.read_text(encoding="utf-8"))
