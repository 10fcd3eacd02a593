import dataclasses
import os

import numpy as np
import pytest

from trisim.cut import CutConfig, train_translator
from trisim.raster import Camera, render, to_gray, write_pgm
from trisim.reward import RewardConfig
from trisim.sim import SimConfig, init_tissue, step


def desk_sim_config(**overrides) -> SimConfig:
    base = dict(grid_nx=9, grid_ny=11, pull_substeps=10, settle_steps=10)
    base.update(overrides)
    return dataclasses.replace(SimConfig(), **base)


def desk_camera(sim: SimConfig, size: int = 64) -> Camera:
    o = np.array(sim.origin)
    return Camera(
        eye=tuple(o + [0.0, 0.17, -0.06]), look_at=tuple(o), resolution=(size, size)
    )


@pytest.fixture(scope="session")
def desk_sim():
    return desk_sim_config()


@pytest.fixture(scope="session")
def desk_cam(desk_sim):
    return desk_camera(desk_sim)


@pytest.fixture(scope="session")
def settled_state(desk_sim):
    s = init_tissue(desk_sim)
    for _ in range(40):
        s = step(s, desk_sim)
    return s


@pytest.fixture(scope="session")
def desk_reward():
    return RewardConfig(eps1=max(1, round(0.005 * 64 * 64)))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, desk_sim, desk_cam, settled_state):
    """A handful of rendered frames in source/ and target/ for translator
    tests; content diversity does not matter here."""
    root = tmp_path_factory.mktemp("dataset")
    rng = np.random.default_rng(11)
    src = root / "source"
    tgt = root / "target"
    src.mkdir()
    tgt.mkdir()
    state = settled_state
    for i in range(10):
        gray = to_gray(render(state, desk_cam))
        noisy = np.clip(
            gray.plane().astype(int) + rng.integers(-20, 20, gray.plane().shape),
            0,
            255,
        ).astype(np.uint8)
        from trisim.raster import ImageBuffer

        write_pgm(str(src / f"{i:04d}.pgm"), ImageBuffer.create(noisy))
        if i < 6:
            write_pgm(str(tgt / f"{i:04d}.pgm"), ImageBuffer.create(255 - noisy))
    return root


@pytest.fixture(scope="session")
def tiny_translator(tmp_path_factory, tiny_dataset):
    """A 2-epoch translator checkpoint (width 4) for embed/policy tests."""
    out = tmp_path_factory.mktemp("translator")
    cfg = CutConfig(
        epochs=2, save_every=2, batch_size=4, width=4, head_hidden=8,
        patches_per_tap=8,
    )
    cks = train_translator(
        str(tiny_dataset / "source"),
        str(tiny_dataset / "target"),
        str(out),
        cfg,
        np.random.default_rng(21),
    )
    return cks[-1].path
