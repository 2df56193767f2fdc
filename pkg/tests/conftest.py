"""Shared fixtures.

The desk-scale surrogate used by the acceptance suite trains once per
session (several minutes of CPU).  Set ``SOFTROD_TEST_CACHE`` to a directory
to persist and reuse the trained model across sessions during development;
unset it (default ``tests/_cache``) stays valid because training is seeded
and deterministic.
"""

import os
import time

import numpy as np
import pytest

from softrod import rodmodel as rm
from softrod import surrogate as sg
from softrod.training import state_scales_from_trajectory, train

DESK_ROD_KW = dict(n_nodes=4, n_sub=3)
DESK_TRAIN_KW = dict(epochs=int(os.environ.get("SOFTROD_TEST_EPOCHS", 800)),
                     points_per_epoch=20_000, batch_size=250,
                     n_hidden=64, n_ansatz=8, t_s=1.0 / 70.0, lr0=1e-3,
                     sigma_states=0.35, snapshot_frac=0.85, sigma_local=0.12,
                     time_power=0.7, loss_form="defect", val_points=1000)
DESK_SEED = 42


def desk_cache_dir():
    return os.environ.get("SOFTROD_TEST_CACHE",
                          os.path.join(os.path.dirname(__file__), "_cache"))


@pytest.fixture(scope="session")
def desk_params():
    return rm.RodParameters(**DESK_ROD_KW)


@pytest.fixture(scope="session")
def paper_params():
    return rm.RodParameters()


@pytest.fixture(scope="session")
def desk_surrogate(desk_params):
    """Trained desk-scale model plus its training wall time in seconds."""
    cache = os.path.join(desk_cache_dir(), "desk_surrogate.srod")
    if os.path.exists(cache):
        model = sg.SurrogateModel.load(cache)
        model.check_compatible(desk_params)
        return model, 0.0
    cfg = sg.TrainingConfig(**DESK_TRAIN_KW)
    t0 = time.time()
    scale, seed_res = state_scales_from_trajectory(desk_params, cfg.t_s)
    model, _ = train(desk_params, cfg, rng=np.random.default_rng(DESK_SEED),
                     state_scale=scale, snapshots=seed_res.x)
    wall = time.time() - t0
    os.makedirs(os.path.dirname(cache), exist_ok=True)
    model.save(cache)
    return model, wall
