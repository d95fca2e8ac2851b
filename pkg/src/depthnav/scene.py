"""Procedural obstacle worlds, ray-cast depth rendering, and collision queries.

A Scene is an immutable set of geometric primitives (spheres, axis-aligned
boxes, vertical cylinders) inside an axis-aligned bounding volume. Depth is
rendered by closed-form ray intersection; per-pixel values are z-depths
(distance along the optical axis), the convention of stereo camera output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .depthproc import DepthImage
from .dynamics import quat_normalize, quat_to_rotmat

KINDS = ("sphere", "box", "cylinder")

_MAX_PLACEMENT_TRIES = 200


@dataclass
class Primitive:
    """One obstacle. dims holds [radius] for spheres, half-extents [hx, hy, hz]
    for boxes, and [radius, half_height] for vertical cylinders."""

    kind: str
    center: np.ndarray
    dims: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=float)
        self.dims = np.asarray(self.dims, dtype=float)
        expected = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        if self.dims.shape != (expected,):
            raise ValueError(f"{self.kind} needs {expected} dims, got {self.dims.shape}")
        if np.any(self.dims <= 0.0):
            raise ValueError("primitive dimensions must be strictly positive")

    def extent(self) -> np.ndarray:
        """Componentwise half-extent of the axis-aligned bounding box."""
        if self.kind == "sphere":
            r = self.dims[0]
            return np.array([r, r, r])
        if self.kind == "box":
            return self.dims.copy()
        r, h = self.dims
        return np.array([r, r, h])

    def xy_radius(self) -> float:
        """Radius of the bounding circle in the horizontal plane."""
        if self.kind == "sphere":
            return float(self.dims[0])
        if self.kind == "box":
            return float(np.hypot(self.dims[0], self.dims[1]))
        return float(self.dims[0])


@dataclass
class CameraModel:
    """Pinhole depth camera. Rays pass through ((u - cx)/fx, (v - cy)/fy, 1)
    in the camera frame (z forward, x right, y down); no half-pixel offset."""

    width: int = 80
    height: int = 48
    fx: float = 60.0
    fy: float = 60.0
    cx: float = 40.0
    cy: float = 24.0
    max_depth: float = 12.0
    baseline: float = 0.1

    def __post_init__(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError("camera resolution must be at least 16x16")
        if self.max_depth <= 0.0:
            raise ValueError("max_depth must be positive")
        if not 0.0 < self.baseline < 1.0:
            raise ValueError("baseline must be in (0, 1) meters")


@dataclass
class Scene:
    """Immutable obstacle world; shareable across parallel rollout workers."""

    primitives: list[Primitive]
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    seed: int
    clearance: float = 1.0
    start_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    goal_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.bounds_min = np.asarray(self.bounds_min, dtype=float)
        self.bounds_max = np.asarray(self.bounds_max, dtype=float)
        self.start_center = np.asarray(self.start_center, dtype=float)
        self.goal_center = np.asarray(self.goal_center, dtype=float)
        if not np.all(self.bounds_min < self.bounds_max):
            raise ValueError("bounds_min must be strictly below bounds_max componentwise")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class PrimitiveDims:
    """Sampling ranges for obstacle shapes. Cylinders are full-height columns
    (tree trunks) so the drone has to fly around them, not over."""

    kind_weights: tuple[float, float, float] = (0.25, 0.15, 0.6)  # sphere, box, cylinder
    sphere_radius: tuple[float, float] = (0.15, 0.5)
    box_half_extent: tuple[float, float] = (0.1, 0.45)
    cylinder_radius: tuple[float, float] = (0.08, 0.35)


def generate_scene(
    seed: int,
    density: float,
    bounds: tuple[np.ndarray, np.ndarray],
    clearance: float,
    dims: PrimitiveDims | None = None,
) -> Scene:
    """Sample a reproducible obstacle world.

    The primitive count is Poisson with mean density * ground area. Start and
    goal anchors sit near the low-x and high-x faces; no primitive may
    intersect the vertical clearance column around either anchor, and every
    primitive must lie fully inside the bounds. Raises ValueError when
    rejection sampling cannot satisfy the constraints.
    """
    if density < 0.0:
        raise ValueError("density must be non-negative")
    if clearance <= 0.0:
        raise ValueError("clearance must be positive")
    dims = dims or PrimitiveDims()
    bmin = np.asarray(bounds[0], dtype=float)
    bmax = np.asarray(bounds[1], dtype=float)
    if not np.all(bmin < bmax):
        raise ValueError("bounds_min must be strictly below bounds_max componentwise")

    extent = bmax - bmin
    x_inset = min(max(1.5 * clearance, 1.0), 0.25 * extent[0])
    z_mid = 0.5 * (bmin[2] + bmax[2])
    start_center = np.array([bmin[0] + x_inset, 0.5 * (bmin[1] + bmax[1]), z_mid])
    goal_center = np.array([bmax[0] - x_inset, 0.5 * (bmin[1] + bmax[1]), z_mid])

    rng = np.random.default_rng(seed)
    area = extent[0] * extent[1]
    count = int(rng.poisson(density * area))

    weights = np.asarray(dims.kind_weights, dtype=float)
    weights = weights / weights.sum()

    primitives: list[Primitive] = []
    for _ in range(count):
        placed = False
        for _attempt in range(_MAX_PLACEMENT_TRIES):
            kind = KINDS[rng.choice(3, p=weights)]
            if kind == "sphere":
                d = np.array([rng.uniform(*dims.sphere_radius)])
            elif kind == "box":
                d = rng.uniform(dims.box_half_extent[0], dims.box_half_extent[1], size=3)
            else:
                # full-height column centered at mid-z
                r = rng.uniform(*dims.cylinder_radius)
                d = np.array([r, 0.5 * extent[2] - 1e-6])
            prim_extent = Primitive(kind, np.zeros(3), d).extent()
            lo = bmin + prim_extent
            hi = bmax - prim_extent
            if np.any(lo >= hi):
                continue
            center = rng.uniform(lo, hi)
            if kind == "cylinder":
                center[2] = z_mid
            prim = Primitive(kind, center, d)
            r_xy = prim.xy_radius()
            d_start = np.hypot(*(center[:2] - start_center[:2]))
            d_goal = np.hypot(*(center[:2] - goal_center[:2]))
            if d_start < clearance + r_xy or d_goal < clearance + r_xy:
                continue
            primitives.append(prim)
            placed = True
            break
        if not placed:
            raise ValueError(
                "rejection sampling failed: cannot place a primitive inside bounds "
                "clear of the start/goal clearance discs (bounds too small or "
                "clearance too large for the requested density)"
            )

    return Scene(
        primitives=primitives,
        bounds_min=bmin,
        bounds_max=bmax,
        seed=seed,
        clearance=clearance,
        start_center=start_center,
        goal_center=goal_center,
    )


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def _ray_sphere(origin, dirs, center, radius):
    """Smallest positive ray parameter per ray, inf for misses."""
    oc = origin - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * (dirs @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2.0 * a)
    t_far = (-b + sq) / (2.0 * a)
    t = np.where(t_near > 0.0, t_near, t_far)
    return np.where(hit & (t > 0.0), t, np.inf)


def _ray_box(origin, dirs, center, half_extents):
    lo = center - half_extents
    hi = center + half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.max(np.minimum(t1, t2), axis=-1)
    tmax = np.min(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0.0)
    t = np.where(tmin > 0.0, tmin, tmax)
    return np.where(hit & (t > 0.0), t, np.inf)


def _ray_cylinder(origin, dirs, center, radius, half_height):
    ox, oy, oz = origin - center
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a * c
    side_ok = (disc >= 0.0) & (a > 0.0)
    sq = np.sqrt(np.where(side_ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ts1 = (-b - sq) / (2.0 * a)
        ts2 = (-b + sq) / (2.0 * a)
    best = np.full(dirs.shape[:-1], np.inf)
    for ts in (ts1, ts2):
        z = oz + ts * dz
        ok = side_ok & (ts > 0.0) & (np.abs(z) <= half_height)
        best = np.where(ok & (ts < best), ts, best)
    with np.errstate(divide="ignore", invalid="ignore"):
        for zcap in (-half_height, half_height):
            tc = (zcap - oz) / dz
            px = ox + tc * dx
            py = oy + tc * dy
            ok = (dz != 0.0) & (tc > 0.0) & (px * px + py * py <= radius * radius)
            best = np.where(ok & (tc < best), tc, best)
    return best


def raycast_depth(scene: Scene, camera_pose: tuple[np.ndarray, np.ndarray], camera: CameraModel) -> DepthImage:
    """Render a z-depth image of the scene from a camera pose.

    camera_pose is (position, quaternion world<-camera). Ray parameters are
    measured so that t equals the camera-frame z coordinate of the hit, hence
    values are z-depths. Misses and hits beyond max_depth read max_depth; all
    pixels are valid.
    """
    position = np.asarray(camera_pose[0], dtype=float)
    q = quat_normalize(np.asarray(camera_pose[1], dtype=float))
    rot = quat_to_rotmat(q)

    u = (np.arange(camera.width) - camera.cx) / camera.fx
    v = (np.arange(camera.height) - camera.cy) / camera.fy
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)  # (H, W, 3), z = 1
    dirs = dirs_cam @ rot.T

    t_best = np.full((camera.height, camera.width), np.inf)
    for prim in scene.primitives:
        if prim.kind == "sphere":
            t = _ray_sphere(position, dirs, prim.center, prim.dims[0])
        elif prim.kind == "box":
            t = _ray_box(position, dirs, prim.center, prim.dims)
        else:
            t = _ray_cylinder(position, dirs, prim.center, prim.dims[0], prim.dims[1])
        t_best = np.minimum(t_best, t)

    depth = np.minimum(t_best, camera.max_depth).astype(np.float32)
    valid = np.ones_like(depth, dtype=bool)
    return DepthImage(depth=depth, valid=valid)


# ---------------------------------------------------------------------------
# distance and collision queries
# ---------------------------------------------------------------------------

def primitive_signed_distance(prim: Primitive, position: np.ndarray) -> float:
    """Exact signed distance from a point to the primitive surface."""
    p = np.asarray(position, dtype=float) - prim.center
    if prim.kind == "sphere":
        return float(np.linalg.norm(p) - prim.dims[0])
    if prim.kind == "box":
        q = np.abs(p) - prim.dims
        outside = np.linalg.norm(np.maximum(q, 0.0))
        inside = min(float(np.max(q)), 0.0)
        return float(outside + inside)
    radius, half_height = prim.dims
    d_xy = float(np.hypot(p[0], p[1])) - radius
    d_z = abs(float(p[2])) - half_height
    outside = float(np.hypot(max(d_xy, 0.0), max(d_z, 0.0)))
    inside = min(max(d_xy, d_z), 0.0)
    return outside + inside


def scene_signed_distance(scene: Scene, position: np.ndarray) -> float:
    """Signed distance to the nearest primitive surface (inf if none)."""
    if not scene.primitives:
        return np.inf
    return min(primitive_signed_distance(prim, position) for prim in scene.primitives)


def check_collision(scene: Scene, position: np.ndarray, drone_radius: float) -> bool:
    """True iff the drone sphere touches a primitive or a bounding wall.

    Strict inequality: a drone exactly drone_radius away is collision-free.
    """
    if drone_radius <= 0.0:
        raise ValueError("drone_radius must be positive")
    p = np.asarray(position, dtype=float)
    if np.any(p < scene.bounds_min + drone_radius) or np.any(p > scene.bounds_max - drone_radius):
        return True
    return scene_signed_distance(scene, p) < drone_radius


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_FORMAT_TAG = "DEPTHNAV-SCENE v1"


def save_scene(scene: Scene, path: str) -> None:
    """Versioned one-primitive-per-line text format, exact float round-trip."""
    lines = [_FORMAT_TAG]
    lines.append(f"seed {scene.seed}")
    lines.append("bounds " + " ".join(repr(float(x)) for x in np.concatenate([scene.bounds_min, scene.bounds_max])))
    lines.append(f"clearance {scene.clearance!r}")
    lines.append("start " + " ".join(repr(float(x)) for x in scene.start_center))
    lines.append("goal " + " ".join(repr(float(x)) for x in scene.goal_center))
    for prim in scene.primitives:
        vals = " ".join(repr(float(x)) for x in np.concatenate([prim.center, prim.dims]))
        lines.append(f"primitive {prim.kind} {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scene(path: str) -> Scene:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _FORMAT_TAG:
        raise ValueError(f"not a {_FORMAT_TAG} file: {path}")
    header: dict[str, list[float]] = {}
    seed = 0
    primitives: list[Primitive] = []
    for line in lines[1:]:
        parts = line.split()
        key = parts[0]
        if key == "seed":
            seed = int(parts[1])
        elif key in ("bounds", "clearance", "start", "goal"):
            header[key] = [float(x) for x in parts[1:]]
        elif key == "primitive":
            kind = parts[1]
            vals = np.array([float(x) for x in parts[2:]])
            primitives.append(Primitive(kind, vals[:3], vals[3:]))
        else:
            raise ValueError(f"unknown scene record {key!r}")
    bounds = header["bounds"]
    return Scene(
        primitives=primitives,
        bounds_min=np.array(bounds[:3]),
        bounds_max=np.array(bounds[3:]),
        seed=seed,
        clearance=header["clearance"][0],
        start_center=np.array(header["start"]),
        goal_center=np.array(header["goal"]),
    )
