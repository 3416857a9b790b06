"""Procedural scene synthesis: analytic primitives, ray casting, Lambertian
rendering, pixel-grid LiDAR sampling, and the z-drift noise model.

Scenes live in a world frame with +y up and the ground at y=0. The camera
looks down +z from a configurable height; the camera frame follows the usual
computer-vision convention (x right, y down, z forward), so the lower image
rows see the ground. Frames store everything in the camera frame with the
sensor at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyFrameError
from .geometry import CameraIntrinsics, PointCloud

RAY_T_MIN = 1e-9
AMBIENT = 0.2

# Rotation taking camera axes (x right, y down, z forward) to world axes
# (y up): a half turn about z.
_CAM_TO_WORLD = np.diag([-1.0, -1.0, 1.0])


@dataclass
class CameraPose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: _CAM_TO_WORLD.copy())
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.6, 0.0]))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def dirs_to_world(self, dirs_cam: np.ndarray) -> np.ndarray:
        return dirs_cam @ self.rotation.T

    def points_to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        return (pts_world - self.translation) @ self.rotation

    def dirs_to_camera(self, dirs_world: np.ndarray) -> np.ndarray:
        return dirs_world @ self.rotation


# ---------------------------------------------------------------------------
# primitives; each intersects a batch of rays and reports analytic normals
# ---------------------------------------------------------------------------

@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > RAY_T_MIN), t, np.inf)
        normals = np.broadcast_to(self.normal, dirs.shape)
        return t, normals


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > RAY_T_MIN, t_near, t_far)
        t = np.where((disc >= 0.0) & (t > RAY_T_MIN), t, np.inf)
        with np.errstate(invalid="ignore"):
            p = origins + dirs * t[..., None]
            normals = (p - self.center) / self.radius
        return t, normals


@dataclass
class Box:
    """Axis-aligned box between corners lo and hi."""

    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - origins) / dirs
            t2 = (self.hi - origins) / dirs
        t_near = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
        t_far = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
        enter = t_near.max(axis=-1)
        exit_ = t_far.min(axis=-1)
        hit = (enter <= exit_) & (exit_ > RAY_T_MIN)
        t = np.where(enter > RAY_T_MIN, enter, exit_)
        t = np.where(hit & (t > RAY_T_MIN), t, np.inf)
        axis = np.argmax(t_near, axis=-1)
        normals = np.zeros_like(dirs)
        rows = np.arange(normals.reshape(-1, 3).shape[0])
        flat_n = normals.reshape(-1, 3)
        flat_axis = axis.reshape(-1)
        flat_dirs = dirs.reshape(-1, 3)
        flat_n[rows, flat_axis] = -np.sign(flat_dirs[rows, flat_axis])
        return t, normals

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass
class Cylinder:
    """Capped cylinder with a vertical (+y) axis."""

    base: np.ndarray  # center of the bottom cap
    radius: float
    height: float
    albedo: np.ndarray

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        rel = origins - self.base
        ox, oy, oz = rel[..., 0], rel[..., 1], rel[..., 2]
        dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]

        a = dx * dx + dz * dz
        b = ox * dx + oz * dz
        c = ox * ox + oz * oz - self.radius**2
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_near = (-b - sq) / a
            t_far = (-b + sq) / a
        t_side = np.where(t_near > RAY_T_MIN, t_near, t_far)
        y_side = oy + t_side * dy
        side_ok = (disc >= 0.0) & (a > 1e-16) & (t_side > RAY_T_MIN) & \
                  (y_side >= 0.0) & (y_side <= self.height)
        t_side = np.where(side_ok, t_side, np.inf)

        best_t = t_side
        best_kind = np.where(side_ok, 1, 0)  # 1 side, 2 bottom, 3 top
        for cap_y, kind in ((0.0, 2), (self.height, 3)):
            with np.errstate(divide="ignore", invalid="ignore"):
                t_cap = (cap_y - oy) / dy
                xc = ox + t_cap * dx
                zc = oz + t_cap * dz
                cap_ok = (np.abs(dy) > 1e-16) & (t_cap > RAY_T_MIN) & \
                         (xc * xc + zc * zc <= self.radius**2)
            t_cap = np.where(cap_ok, t_cap, np.inf)
            closer = t_cap < best_t
            best_t = np.where(closer, t_cap, best_t)
            best_kind = np.where(closer, kind, best_kind)

        with np.errstate(invalid="ignore"):
            p = rel + dirs * best_t[..., None]
        radial = p.copy()
        radial[..., 1] = 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            radial = radial / np.maximum(np.linalg.norm(radial, axis=-1, keepdims=True), 1e-30)
        normals = np.where(
            (best_kind == 1)[..., None], radial,
            np.where((best_kind == 2)[..., None],
                     np.broadcast_to([0.0, -1.0, 0.0], dirs.shape),
                     np.broadcast_to([0.0, 1.0, 0.0], dirs.shape)),
        )
        return best_t, normals


Primitive = Plane | Sphere | Box | Cylinder


@dataclass
class DirectionalLight:
    direction: np.ndarray  # unit vector pointing from surfaces toward the light
    intensity: float = 0.85

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)


@dataclass
class Scene:
    primitives: list
    light: DirectionalLight
    camera: CameraPose = field(default_factory=CameraPose)
    sky_top: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.55, 0.85]))
    sky_horizon: np.ndarray = field(default_factory=lambda: np.array([0.75, 0.80, 0.88]))

    def __post_init__(self):
        if not self.primitives:
            raise ContractError("a scene needs at least one primitive")


@dataclass
class Hit:
    t: float
    position: np.ndarray  # world frame
    normal: np.ndarray  # world frame, oriented toward the ray origin
    primitive: int


def raycast_batch(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: (t, normals, primitive index); misses have t=inf.

    Normals are oriented toward the ray origins.
    """
    best_t = np.full(dirs.shape[:-1], np.inf)
    best_n = np.zeros_like(dirs)
    best_id = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        t, n = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_id = np.where(closer, idx, best_id)
    flip = np.sum(best_n * dirs, axis=-1) > 0.0
    best_n = np.where(flip[..., None], -best_n, best_n)
    return best_t, best_n, best_id


def raycast(scene: Scene, origin: np.ndarray, direction: np.ndarray) -> Hit | None:
    """Single-ray convenience wrapper; direction must be unit length."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ContractError("ray direction must be unit length")
    origin = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    t, n, pid = raycast_batch(scene, origin, direction.reshape(1, 3))
    if not np.isfinite(t[0]):
        return None
    return Hit(
        t=float(t[0]),
        position=origin[0] + direction * t[0],
        normal=n[0],
        primitive=int(pid[0]),
    )


def _pixel_dirs_cam(intr: CameraIntrinsics, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions through pixel centers (u, v)."""
    d = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _shade(scene: Scene, normals: np.ndarray, albedo: np.ndarray) -> np.ndarray:
    lambert = np.maximum(np.sum(normals * scene.light.direction, axis=-1), 0.0)
    return np.clip(albedo * (scene.light.intensity * lambert[..., None] + AMBIENT), 0.0, 1.0)


def render_image(scene: Scene, intr: CameraIntrinsics) -> np.ndarray:
    """Lambertian-shaded [H,W,3] image in [0,1], quantized to 8-bit levels.

    Quantization happens here so that the PPM files on disk round-trip the
    in-memory image bit-exactly.
    """
    vs, us = np.meshgrid(
        np.arange(intr.height, dtype=np.float64),
        np.arange(intr.width, dtype=np.float64),
        indexing="ij",
    )
    dirs_cam = _pixel_dirs_cam(intr, us, vs)
    dirs_world = scene.camera.dirs_to_world(dirs_cam.reshape(-1, 3))
    origins = np.broadcast_to(scene.camera.translation, dirs_world.shape)
    t, normals, pid = raycast_batch(scene, origins, dirs_world)

    albedos = np.zeros((len(scene.primitives) + 1, 3))
    for i, prim in enumerate(scene.primitives):
        albedos[i] = prim.albedo
    shaded = _shade(scene, normals, albedos[pid])

    # horizon gradient background for miss rays
    frac = (vs / max(intr.height - 1, 1)).reshape(-1, 1)
    background = scene.sky_top * (1.0 - frac) + scene.sky_horizon * frac
    img = np.where(np.isfinite(t)[:, None], shaded, background)
    img = img.reshape(intr.height, intr.width, 3)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class PixelRect:
    """Half-open pixel rectangle [u0, u1) x [v0, v1)."""

    u0: int
    v0: int
    u1: int
    v1: int

    def validate(self, intr: CameraIntrinsics) -> None:
        if not (0 <= self.u0 < self.u1 <= intr.width and 0 <= self.v0 < self.v1 <= intr.height):
            raise ContractError(f"mask region {self} outside image {intr.width}x{intr.height}")


def sample_lidar(
    scene: Scene,
    intr: CameraIntrinsics,
    mask_region: PixelRect,
    stride_u: int,
    stride_v: int,
):
    """Cast one ray per masked pixel; hits become camera-frame points.

    Returns (PointCloud, proj_map [N,2], normals_gt [N,3]); points are evenly
    spaced on the image, not in 3D. Raises EmptyFrameError when nothing is
    hit.
    """
    mask_region.validate(intr)
    if stride_u < 1 or stride_v < 1:
        raise ContractError(f"strides must be >= 1, got ({stride_u}, {stride_v})")
    us = np.arange(mask_region.u0, mask_region.u1, stride_u, dtype=np.float64)
    vs = np.arange(mask_region.v0, mask_region.v1, stride_v, dtype=np.float64)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    uu = uu.ravel()
    vv = vv.ravel()
    dirs_cam = _pixel_dirs_cam(intr, uu, vv)
    dirs_world = scene.camera.dirs_to_world(dirs_cam)
    origins = np.broadcast_to(scene.camera.translation, dirs_world.shape)
    t, normals_world, _ = raycast_batch(scene, origins, dirs_world)
    hit = np.isfinite(t)
    if not np.any(hit):
        raise EmptyFrameError("no LiDAR rays hit any surface; scene is misconfigured")
    points_cam = dirs_cam[hit] * t[hit][:, None]
    normals_cam = scene.camera.dirs_to_camera(normals_world[hit])
    proj_map = np.stack([uu[hit], vv[hit]], axis=1)
    return PointCloud(points_cam), proj_map, normals_cam


def add_noise(points: PointCloud, level: float, rng: np.random.Generator) -> PointCloud:
    """Gaussian drift on z only, std = level times the frame's median depth.

    level 0 returns an identical cloud without consuming randomness.
    """
    if level < 0:
        raise ContractError(f"noise level must be >= 0, got {level}")
    pts = points.points.copy()
    if level > 0:
        depth_scale = float(np.median(pts[:, 2]))
        pts[:, 2] += rng.normal(0.0, level * depth_scale, size=pts.shape[0])
    return PointCloud(pts, None if points.normals is None else points.normals.copy())


# ---------------------------------------------------------------------------
# procedural layouts
# ---------------------------------------------------------------------------

def make_random_scene(
    rng: np.random.Generator,
    forward_offset: float = 0.0,
    enclosed: bool = False,
    depth_range: tuple[float, float] = (4.0, 30.0),
) -> Scene:
    """Ground plane plus 5 to 20 boxes/cylinders/spheres along a travel path.

    `forward_offset` slides object placements to mimic frames collected while
    driving forward. `enclosed` adds a far wall so every forward ray hits
    geometry (useful for full-coverage LiDAR sampling).
    """
    def color(lo=0.15, hi=0.9):
        return rng.uniform(lo, hi, size=3)

    ground = Plane(
        point=[0.0, 0.0, 0.0],
        normal=[0.0, 1.0, 0.0],
        albedo=rng.uniform(0.35, 0.55) * np.array([0.95, 1.0, 0.9]),
    )
    prims: list = [ground]
    z_lo, z_hi = depth_range
    n_obj = int(rng.integers(5, 21))
    for _ in range(n_obj):
        kind = rng.choice(["box", "box", "cylinder", "sphere"])
        x = rng.uniform(-14.0, 14.0)
        z = rng.uniform(z_lo, z_hi) + forward_offset
        if kind == "box":
            w = rng.uniform(0.8, 4.0)
            h = rng.uniform(1.0, 5.0)
            d = rng.uniform(0.8, 4.0)
            prims.append(Box(lo=[x - w / 2, 0.0, z - d / 2], hi=[x + w / 2, h, z + d / 2],
                             albedo=color()))
        elif kind == "cylinder":
            prims.append(Cylinder(base=[x, 0.0, z], radius=rng.uniform(0.15, 0.6),
                                  height=rng.uniform(2.0, 5.0), albedo=color()))
        else:
            r = rng.uniform(0.3, 1.2)
            prims.append(Sphere(center=[x, r, z], radius=r, albedo=color()))
    if enclosed:
        prims.append(Plane(point=[0.0, 0.0, z_hi + 6.0 + forward_offset],
                           normal=[0.0, 0.0, -1.0], albedo=color(0.3, 0.7)))
    light = DirectionalLight(direction=[0.35, 1.0, -0.25])
    return Scene(primitives=prims, light=light)
