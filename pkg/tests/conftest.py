from pathlib import Path

import pytest

from topodet.config import ExperimentConfig, config_from_dict
from topodet.dataset import make_toy_benchmark
from topodet.protocol import TaskSchedule
from topodet.topology import generate_random_anchors

FIXTURES = Path(__file__).parent / "fixtures"

# smoke-scale settings shared by the fast pipeline tests; the acceptance file
# runs the full-size benchmark separately
SMOKE_OVERRIDES = {
    "model": {"input_dim": 8, "hidden": [32], "feature_dim": 16, "max_classes": 4},
    "anchors": {"dim": 12},
    "optimizer": {"epochs": 3, "finetune_epochs": 2},
    "exemplars": {"capacity": 20},
}


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def smoke_config() -> ExperimentConfig:
    return config_from_dict(dict(SMOKE_OVERRIDES))


@pytest.fixture(scope="session")
def two_task_schedule() -> TaskSchedule:
    return TaskSchedule.from_lists([["aeroplane", "bicycle"], ["bird", "boat"]])


@pytest.fixture(scope="session")
def smoke_benchmark(two_task_schedule):
    return make_toy_benchmark([list(t) for t in two_task_schedule.tasks],
                              input_dim=8, train_per_class=30,
                              eval_per_class=15, seed=0)


@pytest.fixture(scope="session")
def smoke_bank(two_task_schedule):
    return generate_random_anchors(two_task_schedule.all_names(), dim=12, seed=7)
