import numpy as np
import pytest

from evdetr.config import RunConfig, SensorConfig
from evdetr.model import ModelConfig
from evdetr.simulator import CameraModel
from evdetr.suites import suite_sequences
from evdetr.simulator import write_dataset


MICRO = ModelConfig(
    widths=(2, 2, 2),
    d=4,
    heads=2,
    points=1,
    agg_size=2,
    enc_layers=1,
    dec_layers=1,
    n_queries=2,
    classes=2,
    dropout=0.0,
    ffn_mult=1,
)


@pytest.fixture(scope="session")
def tiny_camera() -> CameraModel:
    return CameraModel(width=64, height=48)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_camera):
    """desk-tiny suite at 64x48: 4 train / 1 val / 3 test sequences of 1 s."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    sequences = suite_sequences("desk-tiny", tiny_camera, seed=7)
    write_dataset(sequences, tiny_camera, root, seed=7)
    return root


@pytest.fixture(scope="session")
def tiny_run_config() -> RunConfig:
    cfg = RunConfig.desk()
    import dataclasses

    return dataclasses.replace(
        cfg,
        sensor=SensorConfig(width=64, height=48),
        model=dataclasses.replace(
            cfg.model, d=16, heads=2, points=2, agg_size=3, enc_layers=1, dec_layers=1, n_queries=6
        ),
    )


def rng_array(seed, shape, scale=1.0, loc=0.0):
    return np.random.default_rng(seed).normal(loc, scale, shape)
