"""Procedural image classes used in place of natural-image datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uilab.errors import ValidationError
from uilab.model import Dataset


@dataclass(frozen=True)
class DatasetConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    classes: int = 4
    train_size: int = 512
    test_size: int = 128
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("height", "width", "channels", "classes", "train_size", "test_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"dataset.{name} must be positive")
        if self.classes < 2:
            raise ValidationError("dataset.classes must be >= 2")
        if self.train_size < self.classes:
            raise ValidationError("dataset.train_size must be >= dataset.classes")
        if self.noise_std < 0:
            raise ValidationError("dataset.noise_std must be >= 0")


def class_pattern(k: int, height: int, width: int, channels: int, classes: int) -> np.ndarray:
    """Noise-free template for class k, values in [0, 1], shape (H, W, C).

    0: horizontal stripes, 1: vertical stripes, 2: checkerboard,
    3+: a Gaussian blob whose centre walks a ring indexed by class.
    """
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    if k == 0:
        img = ((rows // 2) % 2 == 0).astype(np.float64)
    elif k == 1:
        img = ((cols // 2) % 2 == 0).astype(np.float64)
    elif k == 2:
        img = (((rows // 2) + (cols // 2)) % 2 == 0).astype(np.float64)
    else:
        n_blob = max(classes - 3, 1)
        angle = 2 * np.pi * (k - 3) / n_blob
        cy = (height - 1) / 2 + 0.28 * height * np.sin(angle)
        cx = (width - 1) / 2 + 0.28 * width * np.cos(angle)
        if n_blob == 1:
            cy, cx = (height - 1) / 2, (width - 1) / 2
        s = 0.18 * min(height, width)
        img = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * s * s))
    img = 0.1 + 0.8 * img
    # per-channel tint so multi-channel images are not trivially grey
    tint = 1.0 - 0.15 * np.arange(channels) / max(channels, 1)
    return img[:, :, None] * tint[None, None, :]


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def gen_dataset(cfg: DatasetConfig) -> tuple[Dataset, Dataset]:
    """Returns ``(train, test)``, balanced, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    templates = np.stack([
        class_pattern(k, cfg.height, cfg.width, cfg.channels, cfg.classes) for k in range(cfg.classes)
    ])

    def make(n):
        labels = _balanced_labels(n, cfg.classes, rng)
        imgs = templates[labels].copy()
        if cfg.noise_std > 0:
            imgs += cfg.noise_std * rng.standard_normal(imgs.shape)
        return Dataset(np.clip(imgs, 0.0, 1.0), labels.astype(np.int64))

    train = make(cfg.train_size)
    test = make(cfg.test_size)
    return train, test
