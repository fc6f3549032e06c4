import pytest

from madformer.backbone import ModelConfig
from madformer.config import RunConfig
from tests.factories import tiny_model_config, tiny_run_config


@pytest.fixture
def model_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()
