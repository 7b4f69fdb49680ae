import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts"))

from utils.numerics import Rng  # noqa: E402
from utils.datastore import EmbeddingTable, InteractionLog, temporal_user_split  # noqa: E402
from generation.basemodels import BaseModel  # noqa: E402
from generation.mapper import GeneratorConfig, build_generator  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs on MovieLens 100K (needs VMREC_ML100K)")


def make_records(n_users=60, n_items=25, min_len=4, max_len=9, seed=7):
    """Synthetic log: user u starts at time 100*u; a few users share their first items."""
    g = np.random.default_rng(seed)
    records = []
    for user in range(1, n_users + 1):
        length = int(g.integers(min_len, max_len + 1))
        if user % 5 == 0:
            head = [1, 2]
        else:
            head = list(g.choice(np.arange(1, n_items + 1), size=2, replace=False))
        tail = list(g.choice(np.arange(1, n_items + 1), size=length - 2, replace=True))
        for step, item in enumerate(head + tail):
            records.append((user, int(item), 100 * user + step))
    return records


def make_base_model(split, dim=8, seed=11, kind="bpr"):
    g = np.random.default_rng(seed)
    users = np.array(split.warm_users, dtype=np.int64)
    items = np.array(sorted(split.train_items), dtype=np.int64)
    return BaseModel(
        kind=kind,
        user_table=EmbeddingTable(users, g.normal(0.0, 1.0, (len(users), dim))),
        item_table=EmbeddingTable(items, g.normal(0.0, 1.0, (len(items), dim))),
        metadata={"kind": kind, "dim": dim},
    )


def tiny_generator_config(dim=8, kind="spike_slab"):
    return GeneratorConfig(dim=dim, heads=2, attn_dim=4, mlp_hidden=(8,), kind=kind)


@pytest.fixture
def toy_log():
    return InteractionLog.from_records(make_records())


@pytest.fixture
def toy_split(toy_log):
    return temporal_user_split(toy_log)


@pytest.fixture
def toy_base(toy_split):
    return make_base_model(toy_split)


@pytest.fixture
def tiny_generator():
    return build_generator(tiny_generator_config(), Rng(3))


@pytest.fixture
def tiny_generator64():
    return build_generator(tiny_generator_config(), Rng(3), torch.float64)


@pytest.fixture
def ml100k_path():
    path = os.environ.get("VMREC_ML100K")
    if not path or not os.path.exists(path):
        pytest.skip("VMREC_ML100K does not point to MovieLens 100K u.data")
    return path
