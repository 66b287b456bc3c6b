"""Pytest configuration file."""
# ruff: noqa: F401, F403

import pytest
import torch

# Import all fixtures
from tests.fixtures import *


@pytest.fixture(autouse=True)
def _seed_torch() -> None:
    """Every test starts from the same global torch random state."""
    torch.manual_seed(0)
