import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icae.model import CodecModel
from icae.trainer import TrainConfig, train
from icae.transforms import ArchConfig


def synthetic_images(count: int, size: int, seed: int) -> list:
    """Deterministic textured gradients in [0, 1], HxWx3 float32."""
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(count):
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
        base = 0.5 + 0.35 * np.sin(2 * np.pi * (xx / size * rng.uniform(0.5, 2.0) + rng.uniform()))
        base = base + 0.25 * np.cos(2 * np.pi * (yy / size * rng.uniform(0.5, 2.0)))
        img = base[..., None] * rng.uniform(0.4, 1.0, 3)[None, None, :]
        img = img + rng.normal(0.0, 0.05, (size, size, 3))
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return images


@pytest.fixture(scope="session")
def smoke_dataset():
    return synthetic_images(16, 96, seed=42)


SMOKE_CONFIG = dict(
    rd_lambda=0.01,
    learning_rate=1e-4,
    batch_size=8,
    patch_size=64,
    iterations=500,
    seed=0,
    log_interval=1,
)


@pytest.fixture(scope="session")
def smoke_run(smoke_dataset):
    """The toy training run shared by trainer tests and the acceptance gate."""
    cfg = TrainConfig(arch=ArchConfig("baseline", 8, 8), **SMOKE_CONFIG)
    model, curve = train(cfg, smoke_dataset)
    model.freeze()
    return cfg, model, curve


@pytest.fixture()
def tiny_model():
    return CodecModel.build(ArchConfig("baseline", 4, 4), seed=5).freeze()
