from pathlib import Path

import pytest

from odextract.runner import ExperimentConfig, setup

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.yaml"


@pytest.fixture(scope="session")
def reference_cfg() -> ExperimentConfig:
    return ExperimentConfig.load(REFERENCE)


@pytest.fixture(scope="session")
def world_pools(reference_cfg):
    """World and pools of the reference config, repetition seed 0."""
    return setup(reference_cfg, 0)
