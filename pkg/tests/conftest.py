"""Shared fixtures.

The expensive offline trainings (desk and study presets) run once per cache
key and persist under tests/.test_cache/ as ordinary checkpoint files, so a
clean checkout pays the training cost on the first pytest run only. The key
hashes the run configuration; changing presets or the numerics invalidates
the cache.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np
import pytest

import settlefusion as sf
from settlefusion.numkit import BLOCK_ROWS
from settlefusion.opnet import NetConfig, load_checkpoint, save_checkpoint
from settlefusion.training import TrainConfig, train_lowfi

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".test_cache")
NUMERICS_TAG = f"v2-block{BLOCK_ROWS}"


def _cache_key(run: sf.RunConfig) -> str:
    text = f"{NUMERICS_TAG}|{run!r}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _train_cached(run: sf.RunConfig):
    os.makedirs(CACHE_DIR, exist_ok=True)
    path = os.path.join(CACHE_DIR, f"lf-{run.name}-{_cache_key(run)}.ckpt")
    if os.path.exists(path):
        return load_checkpoint(path)
    model = sf.calibrate_gain(run.ground_model(), run.scenario, run.grid())
    raw = sf.gen_lowfi_dataset(model, run.scenario, run.n_scenarios, run.grid())
    data = sf.assemble_lowfi(raw, sf.fit_norm(raw))
    net = NetConfig(branch_input_dim=2 * run.scenario.n_steps, trunk_input_dim=2,
                    width=run.width, depth=run.depth)
    cfg = TrainConfig(iterations=run.iterations, batch_size=run.batch_size,
                      lr=run.lr, seed=run.train_seed)
    ckpt, _ = train_lowfi(data, net, cfg)
    save_checkpoint(ckpt, path)
    return ckpt


@pytest.fixture(scope="session")
def desk_run() -> sf.RunConfig:
    return sf.desk()


@pytest.fixture(scope="session")
def desk_bundle(desk_run):
    """Calibrated model, raw dataset, and assembled splits for the desk preset."""
    grid = desk_run.grid()
    model = sf.calibrate_gain(desk_run.ground_model(), desk_run.scenario, grid)
    raw = sf.gen_lowfi_dataset(model, desk_run.scenario, desk_run.n_scenarios,
                               grid)
    data = sf.assemble_lowfi(raw, sf.fit_norm(raw))
    return {"run": desk_run, "grid": grid, "model": model, "raw": raw,
            "data": data}


@pytest.fixture(scope="session")
def desk_lf(desk_run):
    """Trained desk low-fidelity checkpoint (disk cached)."""
    return _train_cached(desk_run)


@pytest.fixture(scope="session")
def study_run() -> sf.RunConfig:
    return sf.study()


@pytest.fixture(scope="session")
def study_lf(study_run):
    """Trained study-scale low-fidelity checkpoint (disk cached)."""
    return _train_cached(study_run)


@pytest.fixture(scope="session")
def study_ctx(study_run, study_lf):
    return sf.build_study_context(study_run, study_lf)


def micro_run() -> sf.RunConfig:
    """Tiny configuration for CLI and service tests: seconds, not minutes."""
    import dataclasses
    run = sf.study()
    return dataclasses.replace(
        run, name="micro",
        scenario=dataclasses.replace(run.scenario, seed=11_000, n_steps=8),
        n_scenarios=8, width=8, depth=2, residual_width=8, residual_depth=2,
        iterations=40, online_iterations=30, batch_size=None,
        train_seed=11_001)


@pytest.fixture(scope="session")
def micro_bundle():
    run = micro_run()
    grid = run.grid()
    model = sf.calibrate_gain(run.ground_model(), run.scenario, grid)
    raw = sf.gen_lowfi_dataset(model, run.scenario, run.n_scenarios, grid)
    data = sf.assemble_lowfi(raw, sf.fit_norm(raw))
    net = NetConfig(branch_input_dim=2 * run.scenario.n_steps, trunk_input_dim=2,
                    width=run.width, depth=run.depth)
    cfg = TrainConfig(iterations=run.iterations, batch_size=run.batch_size,
                      lr=run.lr, seed=run.train_seed)
    ckpt, _ = train_lowfi(data, net, cfg)
    return {"run": run, "grid": grid, "model": model, "raw": raw, "data": data,
            "lf": ckpt}
