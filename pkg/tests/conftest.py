"""Shared fixtures: a small generated world reused across the test session."""
import numpy as np
import pytest

from ezhoi.config import RunConfig
from ezhoi.data import generate_dataset, load_world

TINY_SEED = 11


def tiny_config(**kw):
    base = dict(n_verbs=4, n_objects=4, n_hoi=12, n_train=60, n_test=30,
                d_v=12, d_t=8, d_a=8, n_layers=3, heads_t=2, heads_v=2,
                d_p=5, patch_px=3, rare_threshold=5,
                n_prompt_layers=2, n_prompt_tokens=2,
                pretrain_steps=240, pretrain_batch=12, pretrain_lr=3e-3,
                batch_size=8, precision=64, seed=TINY_SEED)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("world")
    generate_dataset(tiny_config(), str(path), seed=TINY_SEED)
    return str(path)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_world(tiny_dir):
    return load_world(tiny_dir, "uv")
