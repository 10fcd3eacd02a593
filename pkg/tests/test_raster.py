import numpy as np
import pytest

from conftest import desk_camera, desk_sim_config
from trisim.errors import ConfigError, ShapeError
from trisim.raster import (
    BACKGROUND_BGR,
    Camera,
    ImageBuffer,
    StyleParams,
    rasterize_screen_triangles,
    read_image,
    render,
    stylize,
    to_gray,
    write_pgm,
    write_ppm,
)
from trisim.reward import RED_BOUNDS, bgr_to_hsv, mask_count
from trisim.sim import init_tissue, step


def test_to_gray_closed_forms():
    img = ImageBuffer.create(
        np.array(
            [[[255, 255, 255], [0, 0, 255], [255, 0, 0]]], dtype=np.uint8
        )
    )
    gray = to_gray(img).plane()
    assert gray[0, 0] == 255  # white
    assert gray[0, 1] == 76  # pure red = round(0.299*255)
    assert gray[0, 2] == 29  # pure blue = round(0.114*255)


def test_to_gray_rejects_single_channel():
    with pytest.raises(ShapeError):
        to_gray(ImageBuffer.create(np.zeros((4, 4), dtype=np.uint8)))


def test_to_gray_idempotent_through_replication():
    rng = np.random.default_rng(0)
    img = ImageBuffer.create(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
    once = to_gray(img).plane()
    replicated = ImageBuffer.create(np.repeat(once[:, :, None], 3, axis=2))
    twice = to_gray(replicated).plane()
    assert np.array_equal(once, twice)


def test_fullscreen_quad_watertight():
    h = w = 96
    color = np.zeros((h, w, 3), dtype=np.uint8)
    zbuf = np.full((h, w), np.inf)
    pts = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    zs = np.ones(4)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    face = np.full((2, 3), 200, dtype=np.uint8)
    rasterize_screen_triangles(color, zbuf, pts, zs, tris, face)
    covered = (color[:, :, 0] == 200).mean()
    assert covered >= 0.999


def test_render_deterministic(settled_state, desk_cam):
    a = render(settled_state, desk_cam)
    b = render(settled_state, desk_cam)
    assert np.array_equal(a.data, b.data)


def test_render_hides_folded_line(desk_sim, desk_cam):
    state = init_tissue(desk_sim)
    img = render(state, desk_cam)
    assert mask_count(bgr_to_hsv(img), RED_BOUNDS) == 0


def test_render_shows_line_on_flat_sheet(desk_sim, desk_cam):
    state = init_tissue(desk_sim)
    nx, ny = desk_sim.grid_nx, desk_sim.grid_ny
    dx = desk_sim.sheet_size[0] / (nx - 1)
    dz = desk_sim.sheet_size[1] / (ny - 1)
    xs = (np.arange(nx) - (nx - 1) / 2.0) * dx
    zs = (np.arange(ny) - (ny - 1) / 2.0) * dz
    gx, gz = np.meshgrid(xs, zs)
    state.positions[:, 0] = gx.ravel() + desk_sim.origin[0]
    state.positions[:, 1] = desk_sim.origin[1]
    state.positions[:, 2] = gz.ravel() + desk_sim.origin[2]
    img = render(state, desk_cam)
    assert mask_count(bgr_to_hsv(img), RED_BOUNDS) > 0


def test_render_rejects_degenerate_camera(settled_state, desk_sim):
    cam = Camera(
        eye=desk_sim.origin, look_at=desk_sim.origin, resolution=(32, 32)
    )
    with pytest.raises(ConfigError):
        render(settled_state, cam)
    cam2 = Camera(
        eye=(0.0, 1.0, 0.0),
        look_at=(0.0, 0.0, 0.0),
        up=(0.0, 1.0, 0.0),
        resolution=(32, 32),
    )
    with pytest.raises(ConfigError):
        render(settled_state, cam2)


def test_stylize_identity_params():
    rng = np.random.default_rng(1)
    img = ImageBuffer.create(rng.integers(0, 256, (32, 32), dtype=np.uint8))
    out = stylize(
        img, StyleParams(gamma=1.0, vignette_strength=0.0, noise_stddev=0.0, blur_radius=0)
    )
    assert np.array_equal(out.plane(), img.plane())


def test_stylize_vignette_darkens_corners():
    img = ImageBuffer.create(np.full((33, 33), 128, dtype=np.uint8))
    out = stylize(
        img,
        StyleParams(gamma=1.0, vignette_strength=0.5, noise_stddev=0.0, blur_radius=0),
    ).plane()
    assert out[0, 0] < out[16, 16]
    assert out[32, 32] < out[16, 16]


def test_stylize_deterministic_and_shape_preserving():
    rng = np.random.default_rng(2)
    img = ImageBuffer.create(rng.integers(0, 256, (24, 40), dtype=np.uint8))
    p = StyleParams(seed=77)
    a, b = stylize(img, p), stylize(img, p)
    assert np.array_equal(a.data, b.data)
    assert (a.width, a.height, a.channels) == (40, 24, 1)


def test_pgm_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    gray = ImageBuffer.create(rng.integers(0, 256, (9, 13), dtype=np.uint8))
    rgb = ImageBuffer.create(rng.integers(0, 256, (7, 5, 3), dtype=np.uint8))
    pgm = tmp_path / "a.pgm"
    ppm = tmp_path / "b.ppm"
    write_pgm(str(pgm), gray)
    write_ppm(str(ppm), rgb)
    assert np.array_equal(read_image(str(pgm)).data, gray.data)
    assert np.array_equal(read_image(str(ppm)).data, rgb.data)


def test_read_image_rejects_unknown_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P9\n3 3\n255\n" + b"\x00" * 9)
    with pytest.raises(ShapeError):
        read_image(str(path))


def test_background_fill(settled_state, desk_cam):
    img = render(settled_state, desk_cam)
    assert tuple(img.data[0, 0]) == BACKGROUND_BGR
