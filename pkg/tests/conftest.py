import sys

import pytest

from synthreal.config import TrainConfig, from_dict
from synthreal.toymm import build_datasets
from synthreal.trainer import all_training_ids, pretrain_embedder

TINY = {
    "total_iters": 6,
    "lr_milestones": [2, 4, 5],
    "batch_size": 4,
    "log_every": 0,
    "data": {"image_size": 16, "synth_ids": 6, "synth_per_id": 4, "real_ids": 6, "real_per_id": 4,
             "paired": 8, "heldout_ids": 5, "heldout_per_id": 4, "pretrain_ids": 6, "pretrain_per_id": 4},
    "nets": {"base_channels": 4, "num_residual_blocks": 1, "disc_channels": 4, "bottleneck": 8,
             "embed_channels": 4, "embedding_dim": 8},
    "pretrain": {"iters": 20, "batch_size": 8},
}


def tiny_config(**overrides) -> TrainConfig:
    import copy

    from synthreal.config import set_key

    data = copy.deepcopy(TINY)
    for k, v in overrides.items():
        set_key(data, k.replace("__", "."), v)
    return from_dict(data)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_bundle(tiny_cfg):
    return build_datasets(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_embedder(tiny_cfg, tiny_bundle):
    return pretrain_embedder(tiny_bundle.pretrain, tiny_cfg, all_training_ids(tiny_bundle))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
