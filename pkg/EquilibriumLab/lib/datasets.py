"""
Small synthetic datasets for training equilibrium models on a desk. Both are fully determined by their seed.
"""

from dataclasses import dataclass

import numpy as np

from EquilibriumLab.lib.errors import ConfigError

DATASETS = ("spirals", "regression")


@dataclass(frozen=True)
class Dataset:
    """
    Features (n, d) and targets: integer class labels for classification, (n, t) reals for regression.
    """

    name: str
    features: np.ndarray
    targets: np.ndarray
    num_classes: int = 0

    @property
    def is_classification(self) -> bool:
        return self.num_classes > 0

    def __len__(self) -> int:
        return self.features.shape[0]

    def batch(self, rng: np.random.Generator, size: int) -> "Dataset":
        """
        Draw a batch of size rows without replacement (the whole set if size >= len(self)).
        """
        if size >= len(self):
            return self
        index = rng.choice(len(self), size=size, replace=False)
        return Dataset(self.name, self.features[index], self.targets[index], self.num_classes)


def two_spirals(n: int, seed: int, noise: float = 0.05, turns: float = 1.5) -> Dataset:
    """
    Two interleaved spirals in the plane, n // 2 points per class (one extra in class 0 for odd n).

    :param n: Number of points.
    :param seed: Seed of the noise and angle draws.
    :param noise: Standard deviation of the gaussian jitter.
    :param turns: Number of revolutions of each arm.
    """
    if n < 2:
        raise ConfigError("samples", f"must be at least 2, got {n!r}")

    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    t = np.sqrt(rng.uniform(0.0, 1.0, n)) * turns * 2 * np.pi
    radius = t / (turns * 2 * np.pi)
    angle = t + np.pi * labels
    points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    points += noise * rng.standard_normal(points.shape)
    return Dataset("spirals", points, labels.astype(np.int64), 2)


def synthetic_regression(n: int, seed: int, dim: int = 2, noise: float = 0.05) -> Dataset:
    """
    Targets sin(w . x) + 0.5 cos(v . x) plus gaussian noise, with inputs uniform on [-1, 1]^dim.
    """
    if n < 1:
        raise ConfigError("samples", f"must be positive, got {n!r}")

    rng = np.random.default_rng(seed)
    features = rng.uniform(-1.0, 1.0, (n, dim))
    w = rng.standard_normal(dim)
    v = rng.standard_normal(dim)
    targets = np.sin(features @ w) + 0.5 * np.cos(features @ v) + noise * rng.standard_normal(n)
    return Dataset("regression", features, targets.reshape(n, 1))


def make_dataset(name: str, n: int, seed: int) -> Dataset:
    if name == "spirals":
        return two_spirals(n, seed)
    if name == "regression":
        return synthetic_regression(n, seed)
    raise ConfigError("dataset", f"must be one of {list(DATASETS)}, got {name!r}")
