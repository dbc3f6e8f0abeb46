"""
Shared fixtures: a tiny dataset, and isolated settings and service singletons.
"""

from pathlib import Path

import pytest

from patchlab.config import get_settings
from patchlab.core.synthdata import Dataset, generate_dataset
from patchlab.models.configs import DataConfig
from patchlab.services import experiment_service, plot_service, theorem_service
from tests.factories import make_data_config


@pytest.fixture
def tiny_config() -> DataConfig:
    return make_data_config()


@pytest.fixture
def tiny_dataset(tiny_config: DataConfig) -> Dataset:
    return generate_dataset(tiny_config)


@pytest.fixture(autouse=True)
def isolated_services(monkeypatch: pytest.MonkeyPatch, tmp_path: Path):
    """Fresh settings and singletons per test, with the dataset cache under tmp_path."""
    monkeypatch.setenv("PATCHLAB_CACHE_DIR", str(tmp_path / "cache"))
    for name in ("PATCHLAB_SEED", "PATCHLAB_OUTPUT_DIR", "PATCHLAB_THREADS", "PATCHLAB_PLOTS"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    monkeypatch.setattr(experiment_service, "_experiment_service", None)
    monkeypatch.setattr(theorem_service, "_theorem_service", None)
    monkeypatch.setattr(plot_service, "_plot_service", None)
    yield
    get_settings.cache_clear()
