from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ragevolve.agents import PromptState, default_core_text, default_registry


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture()
def baseline_prompts(registry):
    return {
        name: PromptState(role=name, core_text=default_core_text(name))
        for name in registry
    }
