"""Software rendering of the tissue, grayscale conversion, and the
deterministic stylization filter that synthesizes the pseudo-real domain.

The renderer is a plain z-buffered triangle rasterizer with flat Lambert
shading. Mesh faces are two-sided with separate front/back colors: the
resection line is painted on the sheet's upper face only, so a folded flap
showing its back hides the line without relying on layer occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, ShapeError
from .sim import TissueState

__all__ = [
    "Camera",
    "ImageBuffer",
    "StyleParams",
    "render",
    "to_gray",
    "stylize",
    "rasterize_screen_triangles",
    "write_pgm",
    "write_ppm",
    "read_image",
]

BACKGROUND_BGR = (40, 35, 30)
TISSUE_FRONT_BGR = (150, 160, 210)
TISSUE_BACK_BGR = (135, 140, 185)
LINE_BGR = (0, 0, 255)
GRIPPER_BGR = (120, 120, 120)
GRIPPER_RADIUS = 0.004
_LIGHT_DIR = np.array([0.25, 1.0, 0.35]) / np.linalg.norm([0.25, 1.0, 0.35])


@dataclass(frozen=True)
class Camera:
    eye: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    vertical_fov: float = 50.0
    resolution: tuple[int, int] = (128, 128)  # (width, height)

    def validate(self) -> "Camera":
        if not (0.0 < self.vertical_fov < 180.0):
            raise ConfigError("vertical_fov must be in (0, 180)")
        if self.resolution[0] < 16 or self.resolution[1] < 16:
            raise ConfigError("resolution components must be at least 16")
        fwd = np.asarray(self.look_at, float) - np.asarray(self.eye, float)
        if np.linalg.norm(fwd) < 1e-12:
            raise ConfigError("camera eye and look_at coincide")
        if np.linalg.norm(np.cross(fwd, np.asarray(self.up, float))) < 1e-9:
            raise ConfigError("camera up vector is parallel to the view direction")
        return self

    def basis(self):
        eye = np.asarray(self.eye, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ConfigError("degenerate camera basis")
        right /= nr
        up = np.cross(right, fwd)
        return eye, right, up, fwd


@dataclass
class ImageBuffer:
    width: int
    height: int
    channels: int
    data: np.ndarray  # (H, W, C) uint8, BGR channel order when C == 3

    @staticmethod
    def create(data: np.ndarray) -> "ImageBuffer":
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeError(f"expected (H, W, 1|3) image data, got {data.shape}")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        h, w, c = data.shape
        return ImageBuffer(width=w, height=h, channels=c, data=data)

    def plane(self) -> np.ndarray:
        if self.channels != 1:
            raise ShapeError("plane() expects a 1-channel image")
        return self.data[:, :, 0]


@dataclass(frozen=True)
class StyleParams:
    gamma: float = 1.4
    vignette_strength: float = 0.35
    noise_stddev: float = 6.0
    blur_radius: int = 1
    seed: int = 0

    def validate(self) -> "StyleParams":
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        return self


@njit(cache=True)
def _fill_kernel(color, zbuf, sx, sy, sz, tris, face_bgr):
    h, w = zbuf.shape
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0 = sx[i0], sy[i0]
        x1, y1 = sx[i1], sy[i1]
        x2, y2 = sx[i2], sy[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        inv = 1.0 / area
        xmin = int(max(0.0, np.floor(min(x0, min(x1, x2)))))
        xmax = int(min(w - 1.0, np.ceil(max(x0, max(x1, x2)))))
        ymin = int(max(0.0, np.floor(min(y0, min(y1, y2)))))
        ymax = int(min(h - 1.0, np.ceil(max(y0, max(y1, y2)))))
        z0, z1, z2 = sz[i0], sz[i1], sz[i2]
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                w0 = ((x1 - cx) * (y2 - cy) - (x2 - cx) * (y1 - cy)) * inv
                w1 = ((x2 - cx) * (y0 - cy) - (x0 - cx) * (y2 - cy)) * inv
                w2 = 1.0 - w0 - w1
                if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                    z = w0 * z0 + w1 * z1 + w2 * z2
                    if z < zbuf[py, px]:
                        zbuf[py, px] = z
                        color[py, px, 0] = face_bgr[t, 0]
                        color[py, px, 1] = face_bgr[t, 1]
                        color[py, px, 2] = face_bgr[t, 2]


@njit(cache=True)
def _fill_spheres(color, zbuf, cx, cy, cz, rpx, bgr):
    h, w = zbuf.shape
    for s in range(cx.shape[0]):
        r = rpx[s]
        if r <= 0.0:
            continue
        xmin = int(max(0.0, np.floor(cx[s] - r)))
        xmax = int(min(w - 1.0, np.ceil(cx[s] + r)))
        ymin = int(max(0.0, np.floor(cy[s] - r)))
        ymax = int(min(h - 1.0, np.ceil(cy[s] + r)))
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                dx = px + 0.5 - cx[s]
                dy = py + 0.5 - cy[s]
                q = (dx * dx + dy * dy) / (r * r)
                if q <= 1.0 and cz[s] < zbuf[py, px]:
                    zbuf[py, px] = cz[s]
                    shade = 0.6 + 0.4 * np.sqrt(1.0 - q)
                    color[py, px, 0] = np.uint8(bgr[s, 0] * shade)
                    color[py, px, 1] = np.uint8(bgr[s, 1] * shade)
                    color[py, px, 2] = np.uint8(bgr[s, 2] * shade)


def rasterize_screen_triangles(color, zbuf, pts, zs, tris, face_bgr):
    """Fill triangles given screen-space vertices; exposed for tests."""
    _fill_kernel(
        color,
        zbuf,
        np.ascontiguousarray(pts[:, 0], dtype=np.float64),
        np.ascontiguousarray(pts[:, 1], dtype=np.float64),
        np.ascontiguousarray(zs, dtype=np.float64),
        np.ascontiguousarray(tris, dtype=np.int64),
        np.ascontiguousarray(face_bgr, dtype=np.uint8),
    )


def _mesh_faces(state: TissueState):
    nx, ny = state.grid_shape
    if nx < 2 or ny < 2:
        raise ShapeError("tissue state lacks grid shape metadata")
    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    a = (iy * nx + ix).ravel()
    b = a + 1
    c = b + nx
    d = a + nx
    # wound so the face normal points +y on the flat unfolded sheet
    tris = np.concatenate(
        [np.stack([a, c, b], axis=1), np.stack([a, d, c], axis=1)], axis=0
    )
    # quad rows under the marked segment are painted red on top
    row = state.resection_line.row
    paint_rows = set(state.resection_line.quad_rows)
    if not paint_rows:
        paint_rows = {min(int(row[0]) // nx, ny - 2)}
    ix_lo, ix_hi = int(row[0]) % nx, int(row[-1]) % nx
    quad_rows = np.tile(iy.ravel(), 2)
    quad_cols = np.tile(ix.ravel(), 2)
    on_line = (
        np.isin(quad_rows, list(paint_rows))
        & (quad_cols >= ix_lo)
        & (quad_cols < ix_hi)
    )
    return tris.astype(np.int64), on_line


def render(state: TissueState, cam: Camera) -> ImageBuffer:
    """Project and rasterize the tissue plus gripper spheres (3-channel BGR)."""
    cam.validate()
    eye, right, up, fwd = cam.basis()
    w, h = cam.resolution
    pos = state.positions
    if not np.all(np.isfinite(pos)):
        raise ShapeError("non-finite tissue positions")

    rel = pos - eye
    xc = rel @ right
    yc = rel @ up
    zc = rel @ fwd
    zc = np.maximum(zc, 1e-6)  # tissue is expected in front of the camera
    f = 1.0 / np.tan(np.radians(cam.vertical_fov) / 2.0)
    aspect = w / h
    sx = (xc / zc * f / aspect * 0.5 + 0.5) * w
    sy = (0.5 - yc / zc * f * 0.5) * h

    tris, on_line = _mesh_faces(state)
    v0, v1, v2 = pos[tris[:, 0]], pos[tris[:, 1]], pos[tris[:, 2]]
    normal = np.cross(v1 - v0, v2 - v0)
    nlen = np.linalg.norm(normal, axis=1, keepdims=True)
    normal = normal / np.maximum(nlen, 1e-20)
    centroid = (v0 + v1 + v2) / 3.0
    toward_eye = (eye - centroid) / np.maximum(
        np.linalg.norm(eye - centroid, axis=1, keepdims=True), 1e-20
    )
    front_visible = np.sum(normal * toward_eye, axis=1) >= 0.0

    base = np.where(
        front_visible[:, None],
        np.array(TISSUE_FRONT_BGR, dtype=np.float64),
        np.array(TISSUE_BACK_BGR, dtype=np.float64),
    )
    painted = on_line & front_visible
    base[painted] = np.array(LINE_BGR, dtype=np.float64)

    lambert = np.abs(normal @ _LIGHT_DIR)
    shade = np.clip(0.35 + 0.65 * lambert, 0.0, 1.0)
    shade[painted] = 1.0  # the marking keeps its pure color
    face_bgr = np.clip(np.round(base * shade[:, None]), 0, 255).astype(np.uint8)

    color = np.empty((h, w, 3), dtype=np.uint8)
    color[:, :] = np.array(BACKGROUND_BGR, dtype=np.uint8)
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    pts = np.stack([sx, sy], axis=1)
    rasterize_screen_triangles(color, zbuf, pts, zc, tris, face_bgr)

    g_world = np.stack([g.position for g in state.grippers])
    g_rel = g_world - eye
    gz = np.maximum(g_rel @ fwd, 1e-6)
    gx = (g_rel @ right / gz * f / aspect * 0.5 + 0.5) * w
    gy = (0.5 - g_rel @ up / gz * f * 0.5) * h
    rpx = GRIPPER_RADIUS * f * h / (2.0 * gz)
    g_bgr = np.tile(np.array(GRIPPER_BGR, dtype=np.uint8), (len(g_world), 1))
    _fill_spheres(color, zbuf, gx, gy, gz, rpx, g_bgr)

    return ImageBuffer.create(color)


def to_gray(img: ImageBuffer) -> ImageBuffer:
    """ITU-R 601 luma from BGR samples, rounded and saturated."""
    if img.channels != 3:
        raise ShapeError("to_gray expects a 3-channel image")
    d = img.data.astype(np.float64)
    gray = 0.114 * d[:, :, 0] + 0.587 * d[:, :, 1] + 0.299 * d[:, :, 2]
    return ImageBuffer.create(np.clip(np.round(gray), 0, 255).astype(np.uint8))


def _box_blur(f: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return f
    k = 2 * radius + 1
    padded = np.pad(f, radius, mode="edge")
    # separable box filter via running sums
    c = np.cumsum(padded, axis=0)
    c = np.vstack([np.zeros((1, c.shape[1])), c])
    rows = (c[k:, :] - c[:-k, :]) / k
    c = np.cumsum(rows, axis=1)
    c = np.hstack([np.zeros((c.shape[0], 1)), c])
    return (c[:, k:] - c[:, :-k]) / k


def stylize(img: ImageBuffer, p: StyleParams) -> ImageBuffer:
    """Gamma curve, box blur, radial vignette, then seeded additive noise."""
    if img.channels != 1:
        raise ShapeError("stylize expects a 1-channel image")
    p.validate()
    f = img.plane().astype(np.float64) / 255.0
    f = f ** max(p.gamma, 1e-6)
    f = _box_blur(f, max(int(p.blur_radius), 0))

    h, w = f.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (cy**2 + cx**2)
    strength = float(np.clip(p.vignette_strength, 0.0, 1.0))
    f = f * (1.0 - strength * d2)

    if p.noise_stddev > 0:
        rng = np.random.Generator(np.random.PCG64(p.seed))
        f = f + rng.normal(0.0, p.noise_stddev / 255.0, size=f.shape)

    out = np.clip(np.round(f * 255.0), 0, 255).astype(np.uint8)
    return ImageBuffer.create(out)


# ---- image file I/O ----------------------------------------------------------


def write_pgm(path: str, img: ImageBuffer):
    if img.channels != 1:
        raise ShapeError("PGM holds 1-channel images")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.plane().tobytes())


def write_ppm(path: str, img: ImageBuffer):
    if img.channels != 3:
        raise ShapeError("PPM holds 3-channel images")
    rgb = img.data[:, :, ::-1]  # stored BGR, PPM wants RGB sample order
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_image(path: str) -> ImageBuffer:
    """Read a binary PGM (P5) or PPM (P6) file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ShapeError(f"{path}: only 8-bit images are supported")
    if magic == b"P5":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
        return ImageBuffer.create(data.reshape(h, w))
    if magic == b"P6":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
        rgb = data.reshape(h, w, 3)
        return ImageBuffer.create(rgb[:, :, ::-1])
    raise ShapeError(f"{path}: unsupported image format {magic!r}")
