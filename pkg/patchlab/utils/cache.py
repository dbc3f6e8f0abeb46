"""
On-disk cache of generated datasets, keyed by a hash of the DataConfig.
"""

import hashlib
import logging
from collections.abc import Callable
from pathlib import Path

from patchlab.core.synthdata import BundleFormatError, Dataset, load_dataset, save_dataset
from patchlab.models.configs import DataConfig

logger = logging.getLogger(__name__)


def cache_key(config: DataConfig) -> str:
    """Stable key for a data config."""
    payload = config.model_dump_json().encode()
    return hashlib.sha256(payload).hexdigest()[:16]


class DatasetCache:
    """
    Directory of dataset bundles.

    A bundle that fails to load or whose stored config differs from the requested
    one is treated as a miss and overwritten.
    """

    def __init__(self, directory: Path):
        """
        Initialize the cache.

        Args:
            directory: Where bundles live; created on first write.
        """
        self._directory = directory

    @property
    def directory(self) -> Path:
        return self._directory

    def path_for(self, config: DataConfig) -> Path:
        return self._directory / f"dataset-{cache_key(config)}.npz"

    def get(self, config: DataConfig) -> Dataset | None:
        """
        Get a cached dataset.

        Args:
            config: The data config.

        Returns:
            The dataset, or None on a miss.
        """
        path = self.path_for(config)
        if not path.exists():
            return None
        try:
            dataset = load_dataset(path)
        except BundleFormatError as e:
            logger.warning(f"Ignoring unreadable cached bundle {path}: {e.message}")
            return None
        if dataset.config != config:
            logger.warning(f"Cached bundle {path} does not match its key; regenerating")
            return None
        logger.debug(f"Cache hit for {path.name}")
        return dataset

    def put(self, dataset: Dataset) -> Path:
        """Store a dataset under its config's key."""
        return save_dataset(dataset, self.path_for(dataset.config))

    def get_or_create(
        self, config: DataConfig, factory: Callable[[DataConfig], Dataset]
    ) -> Dataset:
        """Return the cached dataset or build, store and return a new one."""
        dataset = self.get(config)
        if dataset is not None:
            return dataset
        logger.debug(f"Cache miss for {self.path_for(config).name}")
        dataset = factory(config)
        self.put(dataset)
        return dataset

