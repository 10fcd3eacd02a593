"""Position-based-dynamics simulation of a rectangular deformable tissue.

The sheet is a regular particle grid in the x-z plane (y up) connected by
structural and shear distance constraints. Two edge particles are pinned
where the uncontrolled grippers hold the tissue; a third, controlled gripper
executes grasp-and-pull actions. A marked particle row carries the colored
resection line; at initialization the free edge is folded back over so the
marked face points down and the line starts hidden from the camera.

Each step is a semi-implicit Euler prediction followed by Gauss-Seidel
constraint projection. Constraints are processed in breadth-first order from
the pinned particles so corrections propagate across the sheet within one
sweep; the inner loop is JIT-compiled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ConfigError, ContractError, SimulationDivergedError

__all__ = [
    "SimConfig",
    "TissueState",
    "DistanceConstraint",
    "ConstraintSet",
    "GripperState",
    "ResectionLine",
    "Action",
    "as_vec3",
    "init_tissue",
    "step",
    "apply_action",
    "project_distance_constraint",
    "max_strain",
    "kinetic_energy",
    "dump_trajectory_csv",
]


def as_vec3(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ContractError(f"expected a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("vector components must be finite")
    return arr


@dataclass(frozen=True)
class SimConfig:
    grid_nx: int = 17
    grid_ny: int = 21
    sheet_size: tuple[float, float] = (0.08, 0.10)
    origin: tuple[float, float, float] = (0.335, 0.102, 0.465)
    dt: float = 1.0 / 60.0
    solver_iters: int = 20
    gravity: tuple[float, float, float] = (0.0, -9.81, 0.0)
    grasp_radius: float = 0.008
    pull_substeps: int = 30
    settle_steps: int = 30
    damping: float = 0.02
    stiffness: float = 1.0
    workspace_box: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.275, 0.092, 0.395),
        (0.395, 0.162, 0.545),
    )
    # fractions along the pinned edge where the two fixed grippers hold on
    pin_fracs: tuple[float, float] = (0.0, 1.0)
    # row fraction (along z, away from the pinned edge) carrying the line
    line_frac: float = 0.8
    # the marked segment spans this fraction range across the sheet width
    line_span: tuple[float, float] = (0.35, 0.65)
    # physical width of the painted marking
    line_width: float = 0.008
    # row fraction where the free edge is folded back at initialization
    fold_frac: float = 0.65
    floor_enabled: bool = True
    # folded layers rest one tissue thickness apart (stands in for
    # self-collision, which is out of scope)
    tissue_thickness: float = 0.002
    # a grasp closes on the top surface: only candidates within this shell
    # below the highest hit are attached
    grasp_shell: float = 0.001
    # the pull stalls while constraints at the grasp or pins exceed this
    # strain (force-limited forceps)
    pull_strain_limit: float = 0.35

    def validate(self) -> "SimConfig":
        if self.grid_nx < 2 or self.grid_ny < 2:
            raise ConfigError("grid_nx and grid_ny must be at least 2")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.solver_iters < 1:
            raise ConfigError("solver_iters must be at least 1")
        if self.grasp_radius <= 0:
            raise ConfigError("grasp_radius must be positive")
        if not (0.0 <= self.damping < 1.0):
            raise ConfigError("damping must be in [0, 1)")
        if not (0.0 < self.stiffness <= 1.0):
            raise ConfigError("stiffness must be in (0, 1]")
        if self.sheet_size[0] <= 0 or self.sheet_size[1] <= 0:
            raise ConfigError("sheet_size components must be positive")
        if self.pull_substeps < 1 or self.settle_steps < 0:
            raise ConfigError("pull_substeps must be >= 1 and settle_steps >= 0")
        lo, hi = self.workspace_box
        if not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError("workspace_box min must be below max componentwise")
        if not (0.0 < self.fold_frac < self.line_frac < 1.0):
            raise ConfigError("need 0 < fold_frac < line_frac < 1")
        if not (0.0 <= self.line_span[0] < self.line_span[1] <= 1.0):
            raise ConfigError("line_span must be an increasing range in [0, 1]")
        return self


@dataclass(frozen=True)
class DistanceConstraint:
    i: int
    j: int
    rest_length: float
    stiffness: float

    def __post_init__(self):
        if self.i == self.j:
            raise ContractError("constraint endpoints must differ")
        if self.rest_length <= 0:
            raise ContractError("rest_length must be positive")
        if not (0.0 < self.stiffness <= 1.0):
            raise ContractError("stiffness must be in (0, 1]")


@dataclass
class ConstraintSet:
    """Struct-of-arrays constraint storage, ordered for the solver sweep."""

    i: np.ndarray
    j: np.ndarray
    rest: np.ndarray
    stiffness: np.ndarray

    def __len__(self) -> int:
        return len(self.rest)

    def __getitem__(self, n: int) -> DistanceConstraint:
        return DistanceConstraint(
            int(self.i[n]), int(self.j[n]), float(self.rest[n]), float(self.stiffness[n])
        )


@dataclass(frozen=True)
class GripperState:
    id: str  # "A", "B" or "C"
    position: np.ndarray
    controlled: bool


@dataclass(frozen=True)
class ResectionLine:
    row: np.ndarray  # particle indices along the marked row
    endpoints: tuple[int, int]
    quad_rows: tuple[int, ...] = ()  # mesh quad rows painted by the renderer


@dataclass(frozen=True)
class Action:
    p: np.ndarray  # grasp point
    d: np.ndarray  # pull target

    @staticmethod
    def create(p, d) -> "Action":
        return Action(as_vec3(p), as_vec3(d))


@dataclass
class TissueState:
    positions: np.ndarray  # (n, 3)
    velocities: np.ndarray  # (n, 3)
    inv_mass: np.ndarray  # (n,)
    pinned: np.ndarray  # indices with inv_mass == 0 by construction
    pin_anchors: np.ndarray  # (len(pinned), 3) exact pinned positions
    constraints: ConstraintSet
    resection_line: ResectionLine
    grippers: tuple[GripperState, GripperState, GripperState]
    floor_per_particle: np.ndarray  # resting height, offset by fold layer
    grasp_attachment: dict | None = None
    no_op_pull: bool = False
    grid_shape: tuple[int, int] = (0, 0)

    @property
    def n_particles(self) -> int:
        return len(self.positions)

    def copy(self) -> "TissueState":
        return replace(
            self,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            inv_mass=self.inv_mass.copy(),
        )

    def validate(self):
        n = len(self.positions)
        if not (len(self.velocities) == len(self.inv_mass) == n):
            raise ContractError("positions, velocities and inv_mass must align")
        if np.any(self.inv_mass[self.pinned] != 0.0):
            raise ContractError("pinned particles must have inv_mass == 0")
        for e in self.resection_line.endpoints:
            if not (0 <= e < n):
                raise ContractError("resection endpoint index out of range")


def _grid_index(ix: int, iy: int, nx: int) -> int:
    return iy * nx + ix


def init_tissue(cfg: SimConfig) -> TissueState:
    """Build the folded initial sheet with pins, constraints and line row."""
    cfg.validate()
    nx, ny = cfg.grid_nx, cfg.grid_ny
    sx, sy = cfg.sheet_size
    origin = np.array(cfg.origin, dtype=np.float64)

    dx = sx / (nx - 1)
    dz = sy / (ny - 1)
    xs = (np.arange(nx) - (nx - 1) / 2.0) * dx
    zs = (np.arange(ny) - (ny - 1) / 2.0) * dz
    gx, gz = np.meshgrid(xs, zs)  # (ny, nx)
    positions = np.zeros((nx * ny, 3), dtype=np.float64)
    positions[:, 0] = gx.ravel()
    positions[:, 2] = gz.ravel()

    # constraints are built from the flat rest geometry
    ci, cj, rest = [], [], []
    for iy in range(ny):
        for ix in range(nx):
            a = _grid_index(ix, iy, nx)
            if ix + 1 < nx:
                ci.append(a), cj.append(_grid_index(ix + 1, iy, nx)), rest.append(dx)
            if iy + 1 < ny:
                ci.append(a), cj.append(_grid_index(ix, iy + 1, nx)), rest.append(dz)
            if ix + 1 < nx and iy + 1 < ny:
                diag = math.hypot(dx, dz)
                ci.append(a), cj.append(_grid_index(ix + 1, iy + 1, nx)), rest.append(diag)
                b = _grid_index(ix + 1, iy, nx)
                ci.append(b), cj.append(_grid_index(ix, iy + 1, nx)), rest.append(diag)

    # fold the free edge back over the marked row: particles beyond the
    # crease are mirrored, landing face-down one tissue thickness above
    iy_line = int(round(cfg.line_frac * (ny - 1)))
    iy_crease = int(round(cfg.fold_frac * (ny - 1)))
    if not (0 < iy_crease < iy_line < ny):
        raise ConfigError("fold/line rows collapse at this resolution")
    z_crease = zs[iy_crease]
    folded = positions[:, 2] > z_crease + 1e-12
    positions[folded, 2] = 2.0 * z_crease - positions[folded, 2]
    positions[folded, 1] += cfg.tissue_thickness

    # pins sit on the near edge (iy = 0)
    pin_ix = sorted({int(round(f * (nx - 1))) for f in cfg.pin_fracs})
    if len(pin_ix) != 2:
        raise ConfigError("pin_fracs must name two distinct particles")
    pinned = np.array([_grid_index(ix, 0, nx) for ix in pin_ix], dtype=np.int64)

    # recenter so the initial particle mean sits exactly at the origin
    positions += origin - positions.mean(axis=0)

    inv_mass = np.ones(nx * ny, dtype=np.float64)
    inv_mass[pinned] = 0.0

    ci = np.array(ci, dtype=np.int64)
    cj = np.array(cj, dtype=np.int64)
    rest = np.array(rest, dtype=np.float64)
    order = _solver_order(nx * ny, ci, cj, pinned)
    constraints = ConstraintSet(
        i=ci[order],
        j=cj[order],
        rest=rest[order],
        stiffness=np.full(len(order), cfg.stiffness, dtype=np.float64),
    )

    ix0 = int(round(cfg.line_span[0] * (nx - 1)))
    ix1 = int(round(cfg.line_span[1] * (nx - 1)))
    if ix1 <= ix0:
        raise ConfigError("line_span collapses at this resolution")
    line_row = np.array(
        [_grid_index(ix, iy_line, nx) for ix in range(ix0, ix1 + 1)], dtype=np.int64
    )
    # paint every quad row whose band overlaps the marking's physical width,
    # centered on the line row (resolution-independent strip)
    half_w = cfg.line_width / 2.0
    z_line = iy_line * dz
    quad_rows = tuple(
        iy
        for iy in range(ny - 1)
        if iy * dz < z_line + half_w and (iy + 1) * dz > z_line - half_w
    )
    line = ResectionLine(
        row=line_row,
        endpoints=(int(line_row[0]), int(line_row[-1])),
        quad_rows=quad_rows,
    )

    anchors = positions[pinned].copy()
    park = positions[_grid_index(nx // 2, ny - 1, nx)] + np.array([0.0, 0.02, 0.0])
    grippers = (
        GripperState("A", anchors[0].copy(), False),
        GripperState("B", anchors[1].copy(), False),
        GripperState("C", park, True),
    )

    if cfg.floor_enabled:
        base_y = float(positions[~folded, 1].min())
        floor = np.full(nx * ny, base_y, dtype=np.float64)
        floor[folded] = base_y + cfg.tissue_thickness
    else:
        floor = np.full(nx * ny, -np.inf, dtype=np.float64)

    state = TissueState(
        positions=positions,
        velocities=np.zeros_like(positions),
        inv_mass=inv_mass,
        pinned=pinned,
        pin_anchors=anchors,
        constraints=constraints,
        resection_line=line,
        grippers=grippers,
        floor_per_particle=floor,
        grid_shape=(nx, ny),
    )
    state.validate()
    return state


def _solver_order(n: int, ci: np.ndarray, cj: np.ndarray, pinned: np.ndarray):
    """Order constraints by hop distance from the pins (BFS), so one sweep
    carries corrections from the anchors across the whole sheet."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in zip(ci, cj):
        adj[a].append(int(b))
        adj[b].append(int(a))
    dist = np.full(n, n, dtype=np.int64)
    queue = list(int(p) for p in pinned)
    dist[pinned] = 0
    head = 0
    while head < len(queue):
        u = queue[head]
        head += 1
        for v in adj[u]:
            if dist[v] > dist[u] + 1:
                dist[v] = dist[u] + 1
                queue.append(v)
    key = np.minimum(dist[ci], dist[cj])
    return np.argsort(key, kind="stable")


@njit(cache=True)
def _solve_kernel(pos, inv_mass, ci, cj, rest, kf, iters, floor):
    nc = ci.shape[0]
    for _ in range(iters):
        for n in range(nc):
            i = ci[n]
            j = cj[n]
            wi = inv_mass[i]
            wj = inv_mass[j]
            wsum = wi + wj
            if wsum == 0.0:
                continue
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            if d < 1e-12:
                continue
            s = kf[n] * (d - rest[n]) / (d * wsum)
            pos[i, 0] -= wi * s * dx
            pos[i, 1] -= wi * s * dy
            pos[i, 2] -= wi * s * dz
            pos[j, 0] += wj * s * dx
            pos[j, 1] += wj * s * dy
            pos[j, 2] += wj * s * dz
        for p in range(pos.shape[0]):
            if inv_mass[p] > 0.0 and pos[p, 1] < floor[p]:
                pos[p, 1] = floor[p]


def project_distance_constraint(
    p_i: np.ndarray,
    p_j: np.ndarray,
    w_i: float,
    w_j: float,
    rest_length: float,
    stiffness_factor: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Single PBD projection of one distance constraint (returns new positions)."""
    p_i = as_vec3(p_i).copy()
    p_j = as_vec3(p_j).copy()
    wsum = w_i + w_j
    if wsum == 0.0:
        return p_i, p_j
    delta = p_i - p_j
    d = math.sqrt(float(delta @ delta))
    if d < 1e-12:
        return p_i, p_j
    s = stiffness_factor * (d - rest_length) / (d * wsum)
    return p_i - w_i * s * delta, p_j + w_j * s * delta


def _stiffness_factor(stiffness: np.ndarray, iters: int) -> np.ndarray:
    # per-iteration factor so the effective stiffness is iteration-independent
    return np.where(stiffness >= 1.0, 1.0, 1.0 - (1.0 - stiffness) ** (1.0 / iters))


def step(state: TissueState, cfg: SimConfig) -> TissueState:
    """Advance one time step; pinned and grasped particles stay prescribed."""
    out = state.copy()
    pos, vel, w = out.positions, out.velocities, out.inv_mass
    free = w > 0.0
    gravity = np.array(cfg.gravity, dtype=np.float64)
    vel[free] = (vel[free] + gravity * cfg.dt) * (1.0 - cfg.damping)
    vel[~free] = 0.0
    before = pos.copy()
    pos[free] += vel[free] * cfg.dt

    con = out.constraints
    kf = _stiffness_factor(con.stiffness, cfg.solver_iters)
    _solve_kernel(
        pos, w, con.i, con.j, con.rest, kf, cfg.solver_iters, out.floor_per_particle
    )

    vel[free] = (pos[free] - before[free]) / cfg.dt
    pos[out.pinned] = out.pin_anchors
    if not np.all(np.isfinite(pos)):
        raise SimulationDivergedError("non-finite particle positions after step")
    return out


def _attach(state: TissueState, grasp_point: np.ndarray, cfg: SimConfig):
    """Forceps close on the top surface: candidates within grasp_radius are
    kept only if they sit within grasp_shell of the highest candidate."""
    free = state.inv_mass > 0.0
    dist = np.linalg.norm(state.positions - grasp_point, axis=1)
    hits = np.flatnonzero((dist <= cfg.grasp_radius) & free)
    if len(hits) == 0:
        return hits
    y_top = state.positions[hits, 1].max()
    return hits[state.positions[hits, 1] >= y_top - cfg.grasp_shell]


def _load_strain(state: TissueState, grabbed: np.ndarray) -> float:
    """Largest strain on constraints touching the grasp or the pins."""
    con = state.constraints
    hot = np.zeros(state.n_particles, dtype=bool)
    hot[grabbed] = True
    hot[state.pinned] = True
    sel = hot[con.i] | hot[con.j]
    if not np.any(sel):
        return 0.0
    d = np.linalg.norm(state.positions[con.i[sel]] - state.positions[con.j[sel]], axis=1)
    return float(np.max((d - con.rest[sel]) / con.rest[sel]))


def apply_action(state: TissueState, a: Action, cfg: SimConfig) -> TissueState:
    """Teleport the controlled gripper to a.p, grasp, pull to a.d, settle.

    The gripper advances linearly toward a.d but stalls while the tissue at
    the grasp or at the pins is stretched past pull_strain_limit, standing in
    for the force limit of real forceps."""
    lo = np.array(cfg.workspace_box[0])
    hi = np.array(cfg.workspace_box[1])
    for point, name in ((a.p, "grasp point"), (a.d, "pull target")):
        v = as_vec3(point)
        if np.any(v < lo) or np.any(v > hi):
            raise ContractError(f"{name} outside the workspace box")

    out = state.copy()
    grabbed = _attach(out, a.p, cfg)
    no_op = len(grabbed) == 0

    saved_w = out.inv_mass[grabbed].copy()
    offsets = out.positions[grabbed] - a.p
    out.inv_mass[grabbed] = 0.0

    reached = 0
    g_pos = as_vec3(a.p).copy()
    for _ in range(cfg.pull_substeps):
        if _load_strain(out, grabbed) <= cfg.pull_strain_limit:
            reached += 1
        g_pos = a.p + (a.d - a.p) * (reached / cfg.pull_substeps)
        out.positions[grabbed] = g_pos + offsets
        out.velocities[grabbed] = 0.0
        out.grasp_attachment = {"C": grabbed} if not no_op else None
        out = step(out, cfg)

    out.inv_mass[grabbed] = saved_w
    out.grasp_attachment = None
    for _ in range(cfg.settle_steps):
        out = step(out, cfg)

    # the gripper holds where the pull actually ended (it may have stalled)
    grippers = list(out.grippers)
    grippers[2] = replace(grippers[2], position=g_pos.copy())
    out.grippers = (grippers[0], grippers[1], grippers[2])
    out.no_op_pull = no_op
    return out


def max_strain(state: TissueState) -> float:
    """Largest relative constraint-length violation."""
    con = state.constraints
    d = np.linalg.norm(state.positions[con.i] - state.positions[con.j], axis=1)
    return float(np.max(np.abs(d - con.rest) / con.rest))


def kinetic_energy(state: TissueState) -> float:
    w = state.inv_mass
    mass = np.where(w > 0, 1.0 / np.where(w > 0, w, 1.0), 0.0)
    return float(0.5 * np.sum(mass * np.sum(state.velocities**2, axis=1)))


def dump_trajectory_csv(path: str, trajectory: list[TissueState]):
    """Write (step, particle index, x, y, z) rows for debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,particle,x,y,z\n")
        for t, st in enumerate(trajectory):
            for p, (x, y, z) in enumerate(st.positions):
                fh.write(f"{t},{p},{x:.9f},{y:.9f},{z:.9f}\n")
