import os
from typing import Dict

import pytest

from ct_tools.degrade_tool import DegradeSpec
from ct_tools.multistage_tool import STAGE_CHANNELS
from ct_tools.phantom_tool import FoamSpec
from ct_tools.regressor.model import RegressorSpec
from ct_tools.regressor.train import TrainConfig

SLOW_ENV = "TOMOSTAGE_SLOW"


def pytest_collection_modifyitems(config, items):
    if os.environ.get(SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"slow test; set {SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_foam() -> FoamSpec:
    return FoamSpec(size=16, bubbles=5, r_min=1.0, r_max=3.0, seed=3)


@pytest.fixture
def tiny_degrade() -> DegradeSpec:
    return DegradeSpec(I0=1000.0, P_ring=0.05, P_proj=0.5, P_zinger=0.02, seed=5)


@pytest.fixture
def tiny_specs() -> Dict[str, RegressorSpec]:
    return {name: RegressorSpec(in_channels=c, hidden_layers=1, width=2) for name, c in STAGE_CHANNELS.items()}


def stage_configs(epochs: int, **extra) -> Dict[str, TrainConfig]:
    """Per-stage configs; sinograms are not square, so stage s never rotates."""
    base = dict(epochs=epochs, patience=max(1, epochs), time_budget=60.0, **extra)
    return {
        "p": TrainConfig(**base),
        "s": TrainConfig(rotate=False, **base),
        "r": TrainConfig(**base),
    }


def tiny_config(size: int = 16, n_hq: int = 8, factor: int = 2, epochs: int = 1) -> Dict:
    """Settings file contents for end-to-end runs on tiny data."""
    train = {"epochs": epochs, "patience": max(1, epochs), "time_budget": 60.0}
    return {
        "phantom": {"size": size, "bubbles": 5, "r_min": 1.0, "r_max": 3.0},
        "geometry": {"n_hq": n_hq, "factor": factor},
        "dataset": {"n_train": 1},
        "train": {"p": train, "s": dict(train, rotate=False), "r": train, "post": train},
        "regressor": {"hidden_layers": 1, "width": 2},
        "classical": {"grid": [{"level": 1, "wavelet": "haar", "sigma": 2.0}]},
        "compare": {"seeds": [0], "settings": {"noise": {"P_ring": 0.0, "P_zinger": 0.0}}},
    }
