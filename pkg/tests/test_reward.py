import cv2
import numpy as np
import pytest

from trisim.errors import ContractError, ShapeError
from trisim.raster import ImageBuffer
from trisim.reward import (
    RED_BOUNDS,
    GoalReport,
    HsvBounds,
    RewardConfig,
    bgr_to_hsv,
    evaluate_reward,
    inside_triangle,
    mask_count,
    project_to_plane,
)


def _px(b, g, r):
    return bgr_to_hsv(
        ImageBuffer.create(np.array([[[b, g, r]]], dtype=np.uint8))
    ).data[0, 0]


def test_hsv_closed_forms():
    assert tuple(_px(0, 0, 255)) == (0, 255, 255)  # pure red
    h, s, v = _px(128, 128, 128)
    assert (s, v) == (0, 128)  # gray: zero chroma
    assert _px(0, 255, 0)[0] == 60  # pure green: 120 degrees halved


def test_hsv_matches_opencv_within_rounding():
    rng = np.random.default_rng(8)
    img = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
    mine = bgr_to_hsv(ImageBuffer.create(img)).data.astype(int)
    ref = cv2.cvtColor(img, cv2.COLOR_BGR2HSV).astype(int)
    diff = np.abs(mine - ref)
    assert (diff == 0).all(axis=2).mean() > 0.95
    assert diff.max() <= 1  # only rounding-convention disagreements


def test_hsv_rejects_single_channel():
    with pytest.raises(ShapeError):
        bgr_to_hsv(ImageBuffer.create(np.zeros((4, 4), dtype=np.uint8)))


def test_mask_count_full_and_empty():
    rng = np.random.default_rng(1)
    hsv = ImageBuffer.create(rng.integers(0, 180, (10, 12, 3), dtype=np.uint8))
    full = HsvBounds(lower=(0, 0, 0), upper=(179, 255, 255))
    assert mask_count(hsv, full) == 120
    empty = HsvBounds(lower=(200, 250, 250), upper=(255, 255, 255))
    assert mask_count(hsv, empty) == 0


def test_mask_count_constructed_red_fixture():
    img = np.zeros((20, 20, 3), dtype=np.uint8)
    img[:, :, 0] = 200  # blue background
    idx = np.random.default_rng(2).choice(400, 37, replace=False)
    ys, xs = np.unravel_index(idx, (20, 20))
    img[ys, xs] = (0, 0, 255)
    n = mask_count(bgr_to_hsv(ImageBuffer.create(img)), RED_BOUNDS)
    assert n == 37


def test_mask_count_monotone_in_band():
    rng = np.random.default_rng(3)
    hsv = ImageBuffer.create(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
    small = HsvBounds(lower=(10, 40, 40), upper=(60, 200, 200))
    big = HsvBounds(lower=(5, 20, 20), upper=(90, 230, 230))
    assert mask_count(hsv, big) >= mask_count(hsv, small)


def test_project_to_plane_cases():
    a, b, c = np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    q, dist = project_to_plane(np.array([0.2, 0.3, 0.0]), a, b, c)
    assert dist == 0.0
    assert np.allclose(q, [0.2, 0.3, 0.0])
    q, dist = project_to_plane(np.array([0.0, 0.0, 5.0]), a, b, c)
    assert abs(dist - 5.0) < 1e-12
    assert np.allclose(q, [0.0, 0.0, 0.0])


def test_project_to_plane_orthogonality_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, b, c, p = (rng.normal(size=3) for _ in range(4))
        if np.linalg.norm(np.cross(b - a, c - a)) < 1e-6:
            continue
        q, dist = project_to_plane(p, a, b, c)
        assert abs((p - q) @ (b - a)) < 1e-9
        assert abs((p - q) @ (c - a)) < 1e-9
        # distance is minimal over sampled plane points
        for _ in range(10):
            u, v = rng.normal(size=2)
            on_plane = a + u * (b - a) + v * (c - a)
            assert np.linalg.norm(p - on_plane) >= dist - 1e-9


def test_project_rejects_collinear():
    with pytest.raises(ContractError):
        project_to_plane(
            np.zeros(3), np.zeros(3), np.array([1.0, 0, 0]), np.array([2.0, 0, 0])
        )


def _barycentric_inside(q, a, b, c, tol=0.0):
    t = np.stack([b - a, c - a], axis=1)
    coef, *_ = np.linalg.lstsq(t, q - a, rcond=None)
    u, v = coef
    return u >= -tol and v >= -tol and u + v <= 1.0 + tol, (u, v, 1.0 - u - v)


def test_inside_triangle_basics():
    a, b, c = np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    centroid = (a + b + c) / 3.0
    assert inside_triangle(centroid, a, b, c)
    assert inside_triangle(a, a, b, c)  # vertex counts as inside
    assert not inside_triangle(np.array([2.0, 2.0, 0.0]), a, b, c)


def test_inside_triangle_matches_barycentric_oracle():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(2000):
        a, b, c = (rng.normal(size=3) for _ in range(3))
        if np.linalg.norm(np.cross(b - a, c - a)) < 1e-6:
            continue
        u, v = rng.uniform(-0.5, 1.5, size=2)
        q = a + u * (b - a) + v * (c - a)
        ok, coords = _barycentric_inside(q, a, b, c)
        if min(abs(x) for x in coords) <= 1e-9:
            continue  # borderline
        assert inside_triangle(q, a, b, c) == ok
        checked += 1
    assert checked > 1500


def test_inside_triangle_rigid_motion_invariance():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b, c = (rng.normal(size=3) for _ in range(3))
        if np.linalg.norm(np.cross(b - a, c - a)) < 1e-6:
            continue
        u, v = rng.uniform(-0.5, 1.5, size=2)
        q = a + u * (b - a) + v * (c - a)
        base = inside_triangle(q, a, b, c)
        # random rotation (QR of a Gaussian matrix) + translation
        m, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        t = rng.normal(size=3)
        moved = [m @ p + t for p in (q, a, b, c)]
        assert inside_triangle(*moved) == base


def test_inside_triangle_rejects_degenerate():
    with pytest.raises(ContractError):
        inside_triangle(
            np.zeros(3), np.zeros(3), np.array([1.0, 0, 0]), np.array([2.0, 0, 0])
        )


def _frame_with_red(n_red: int) -> ImageBuffer:
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[:, :] = (60, 60, 60)
    flat = img.reshape(-1, 3)
    flat[:n_red] = (0, 0, 255)
    return ImageBuffer.create(img)


GRIPPERS = (
    np.array([-1.0, 0.0, -1.0]),
    np.array([1.0, 0.0, -1.0]),
    np.array([0.0, 0.0, 1.0]),
)


def test_reward_zero_without_visibility():
    cfg = RewardConfig(eps1=10)
    inside_pts = (np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.2]))
    report = evaluate_reward(_frame_with_red(0), inside_pts, GRIPPERS, cfg)
    assert report.reward == 0.0
    assert not report.goal1


def test_reward_half_when_only_visible():
    cfg = RewardConfig(eps1=10)
    outside = (np.array([5.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.2]))
    report = evaluate_reward(_frame_with_red(25), outside, GRIPPERS, cfg)
    assert report.goal1 and not report.goal2
    assert report.reward == 0.5


def test_reward_full_when_positioned():
    cfg = RewardConfig(eps1=10, eps2=0.05)
    pts = (np.array([0.0, 0.01, 0.0]), np.array([0.2, -0.01, 0.0]))
    report = evaluate_reward(_frame_with_red(25), pts, GRIPPERS, cfg)
    assert report.goal1 and report.goal2
    assert report.reward == 1.0


def test_reward_geometry_does_not_rescue_invisibility():
    cfg = RewardConfig(eps1=10, eps2=0.05)
    pts = (np.array([0.0, 0.01, 0.0]), np.array([0.2, -0.01, 0.0]))
    report = evaluate_reward(_frame_with_red(3), pts, GRIPPERS, cfg)
    assert report.goal2 and not report.goal1
    assert report.reward == 0.0


def test_reward_values_are_exact():
    for n_red, expect in ((0, 0.0), (25, 0.5)):
        report = evaluate_reward(
            _frame_with_red(n_red),
            (np.array([5.0, 0, 0]), np.array([5.0, 0, 0.1])),
            GRIPPERS,
            RewardConfig(eps1=10),
        )
        assert report.reward == expect
        assert report.reward in (0.0, 0.5, 1.0)


def test_reward_ties_count_as_satisfied():
    cfg = RewardConfig(eps1=25, eps2=0.05)  # exactly eps1 red pixels
    pts = (np.array([0.0, 0.05, 0.0]), np.array([0.2, -0.05, 0.0]))  # dist == eps2
    report = evaluate_reward(_frame_with_red(25), pts, GRIPPERS, cfg)
    assert report.goal1 and report.goal2
    assert report.reward == 1.0


def test_goal_report_csv_row():
    report = GoalReport(
        n_mask=5,
        goal1=True,
        goal2=False,
        per_endpoint=((True, 0.001), (False, 0.5)),
        reward=0.5,
    )
    row = report.csv_row()
    assert row.startswith("5,1,0,1,0.001000,0,0.500000,")
