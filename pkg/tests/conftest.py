from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cbgen.diffusion import make_schedule
from cbgen.energymodel import NetConfig, init_network
from cbgen.synthworld import make_world
from cbgen.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def desk_world():
    return make_world(d=8, seed=0)


@pytest.fixture(scope="session")
def desk_schedule():
    return make_schedule("cosine", T=100)


@pytest.fixture(scope="session")
def small_net_config():
    return NetConfig(d=8, t_scale=100, hidden=64)


@pytest.fixture(scope="session")
def random_net(desk_world, desk_schedule):
    """Untrained net with non-degenerate (random) heads, for gradient tests."""
    cfg = NetConfig(d=8, t_scale=100, hidden=32, time_dim=16, head_init="normal")
    return init_network(desk_world.spec, cfg, seed=7)


@pytest.fixture(scope="session")
def tiny_net():
    """Sub-1k-parameter net with random heads for second-order checks."""
    world = make_world(d=4, concept_names=("A", "B"), seed=1)
    cfg = NetConfig(d=4, t_scale=10, hidden=8, n_hidden_layers=2, time_dim=4, head_init="normal")
    net = init_network(world.spec, cfg, seed=3)
    assert net.params.total_count <= 1000, net.params.total_count
    return world, net


@pytest.fixture(scope="session")
def quick_checkpoint(desk_world, desk_schedule, small_net_config):
    """A briefly trained model: enough steps for steering behavior to show,
    cheap enough to share across the unit-test suite."""
    cfg = TrainConfig(steps=1500, batch_size=128, seed=0, eval_every=1500)
    return train(desk_world, desk_schedule, cfg, small_net_config)


@pytest.fixture(scope="session")
def desk_checkpoint(desk_world, desk_schedule, small_net_config):
    """The full desk-scale training run (d=8, K=4, T=100, 20k steps,
    batch 128).  Built once per session; the acceptance experiment and the
    distribution surrogate both read from it."""
    import time

    cfg = TrainConfig(steps=20_000, batch_size=128, seed=0, eval_every=2000)
    t0 = time.time()
    ckpt = train(desk_world, desk_schedule, cfg, small_net_config)
    ckpt.metrics.append({"train_wall_seconds": time.time() - t0})
    return ckpt
