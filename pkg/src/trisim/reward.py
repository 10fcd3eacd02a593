"""Triangulation reward: HSV color extraction for the visibility objective
and plane-projection plus triangle-containment geometry for the positioning
objective.

Color handling follows the 8-bit convention: hue is halved into [0, 180),
saturation and value are scaled to [0, 255].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .raster import ImageBuffer

__all__ = [
    "HsvBounds",
    "RewardConfig",
    "GoalReport",
    "bgr_to_hsv",
    "mask_count",
    "project_to_plane",
    "inside_triangle",
    "evaluate_reward",
    "RED_BOUNDS",
]


@dataclass(frozen=True)
class HsvBounds:
    lower: tuple[int, int, int]
    upper: tuple[int, int, int]
    second_band: tuple[tuple[int, int, int], tuple[int, int, int]] | None = None

    def validate(self) -> "HsvBounds":
        bands = [(self.lower, self.upper)]
        if self.second_band is not None:
            bands.append(self.second_band)
        for lo, hi in bands:
            if any(a > b for a, b in zip(lo, hi)):
                raise ContractError("HSV lower bound exceeds upper bound")
        return self


# default band for the pure-red marking, wrapped across the hue seam
RED_BOUNDS = HsvBounds(
    lower=(0, 100, 100),
    upper=(10, 255, 255),
    second_band=((170, 100, 100), (179, 255, 255)),
)


@dataclass(frozen=True)
class RewardConfig:
    eps1: int  # pixel-count threshold for the visibility goal
    eps2: float = 0.01  # meters; plane-distance threshold
    bounds: HsvBounds = RED_BOUNDS

    def validate(self) -> "RewardConfig":
        if self.eps1 < 1:
            raise ContractError("eps1 must be at least 1 pixel")
        if self.eps2 <= 0:
            raise ContractError("eps2 must be positive")
        self.bounds.validate()
        return self


@dataclass(frozen=True)
class GoalReport:
    n_mask: int
    goal1: bool
    goal2: bool
    per_endpoint: tuple[tuple[bool, float], tuple[bool, float]]
    reward: float

    def csv_row(self) -> str:
        e1, e2 = self.per_endpoint
        return (
            f"{self.n_mask},{int(self.goal1)},{int(self.goal2)},"
            f"{int(e1[0])},{e1[1]:.6f},{int(e2[0])},{e2[1]:.6f},{self.reward}"
        )


def bgr_to_hsv(img: ImageBuffer) -> ImageBuffer:
    """Per-pixel HSV in the 8-bit convention (H halved into [0, 180))."""
    if img.channels != 3:
        raise ShapeError("bgr_to_hsv expects a 3-channel image")
    d = img.data.astype(np.float64)
    b, g, r = d[:, :, 0], d[:, :, 1], d[:, :, 2]
    mx = np.maximum(np.maximum(b, g), r)
    mn = np.minimum(np.minimum(b, g), r)
    c = mx - mn

    v = mx
    s = np.where(mx > 0, np.round(c * 255.0 / np.where(mx > 0, mx, 1.0)), 0.0)

    safe_c = np.where(c > 0, c, 1.0)
    h = np.zeros_like(c)
    is_r = (mx == r) & (c > 0)
    is_g = (mx == g) & (c > 0) & ~is_r
    is_b = (c > 0) & ~is_r & ~is_g
    h[is_r] = 30.0 * ((g - b) / safe_c)[is_r]
    h[is_g] = 30.0 * ((b - r) / safe_c)[is_g] + 60.0
    h[is_b] = 30.0 * ((r - g) / safe_c)[is_b] + 120.0
    h = np.round(h)
    h[h < 0] += 180.0
    h[h >= 180.0] -= 180.0

    out = np.stack([h, s, v], axis=2)
    return ImageBuffer.create(np.clip(out, 0, 255).astype(np.uint8))


def mask_count(hsv: ImageBuffer, b: HsvBounds) -> int:
    """Pixels inside the inclusive bounds (union with the wraparound band)."""
    b.validate()
    d = hsv.data.astype(np.int64)

    def in_band(lo, hi):
        m = np.ones(d.shape[:2], dtype=bool)
        for ch in range(3):
            m &= (d[:, :, ch] >= lo[ch]) & (d[:, :, ch] <= hi[ch])
        return m

    mask = in_band(b.lower, b.upper)
    if b.second_band is not None:
        mask |= in_band(*b.second_band)
    return int(mask.sum())


def _cross(ux, uy, uz, vx, vy, vz):
    return uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx


def _check_triangle(a, b, c):
    nx, ny, nz = _cross(
        b[0] - a[0], b[1] - a[1], b[2] - a[2], c[0] - a[0], c[1] - a[1], c[2] - a[2]
    )
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    if norm < 1e-12:
        raise ContractError("triangle vertices are collinear")
    return nx / norm, ny / norm, nz / norm


def project_to_plane(p, a, b, c) -> tuple[np.ndarray, float]:
    """Orthogonal projection of p onto plane(a, b, c) and its distance."""
    p, a, b, c = (np.asarray(v, dtype=np.float64) for v in (p, a, b, c))
    nx, ny, nz = _check_triangle(a, b, c)
    offset = (p[0] - a[0]) * nx + (p[1] - a[1]) * ny + (p[2] - a[2]) * nz
    q = np.array([p[0] - offset * nx, p[1] - offset * ny, p[2] - offset * nz])
    return q, abs(offset)


def inside_triangle(q, a, b, c) -> bool:
    """Cross-product containment test; boundary points count as inside."""
    q, a, b, c = (np.asarray(v, dtype=np.float64) for v in (q, a, b, c))
    _check_triangle(a, b, c)
    v1 = _cross(
        b[0] - a[0], b[1] - a[1], b[2] - a[2], q[0] - b[0], q[1] - b[1], q[2] - b[2]
    )
    v2 = _cross(
        c[0] - b[0], c[1] - b[1], c[2] - b[2], q[0] - c[0], q[1] - c[1], q[2] - c[2]
    )
    v3 = _cross(
        a[0] - c[0], a[1] - c[1], a[2] - c[2], q[0] - a[0], q[1] - a[1], q[2] - a[2]
    )
    d12 = v1[0] * v2[0] + v1[1] * v2[1] + v1[2] * v2[2]
    d13 = v1[0] * v3[0] + v1[1] * v3[1] + v1[2] * v3[2]
    return bool(d12 >= 0.0 and d13 >= 0.0)


def evaluate_reward(
    frame: ImageBuffer,
    endpoints: tuple[np.ndarray, np.ndarray],
    grippers: tuple[np.ndarray, np.ndarray, np.ndarray],
    cfg: RewardConfig,
) -> GoalReport:
    """Score a frame: 0 (line not visible), 0.5 (visible), 1 (visible and
    both endpoints positioned inside the gripper triangle)."""
    cfg.validate()
    a, b, c = (np.asarray(g, dtype=np.float64) for g in grippers)
    _check_triangle(a, b, c)

    n_mask = mask_count(bgr_to_hsv(frame), cfg.bounds)
    goal1 = n_mask >= cfg.eps1

    per_endpoint = []
    for p in endpoints:
        q, dist = project_to_plane(p, a, b, c)
        ok = inside_triangle(q, a, b, c) and dist <= cfg.eps2
        per_endpoint.append((ok, dist))
    goal2 = per_endpoint[0][0] and per_endpoint[1][0]

    if not goal1:
        reward = 0.0
    elif goal2:
        reward = 1.0
    else:
        reward = 0.5
    return GoalReport(
        n_mask=n_mask,
        goal1=goal1,
        goal2=goal2,
        per_endpoint=(per_endpoint[0], per_endpoint[1]),
        reward=reward,
    )
