"""Point-cloud containers, pinhole projection, neighbor queries, PCA plane
fitting, and angle-error metrics.

Normals are disambiguated everywhere with the same convention: they face the
sensor, i.e. dot(n, origin - p) >= 0. The angle metric folds sign away, but
the training loss does not, so orientation has to be applied uniformly to
fitted normals, ground truth, and learned predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateNeighborhoodError

UNIT_TOL = 1e-9


@dataclass
class PointCloud:
    """N 3D points in meters, optionally with per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ContractError("point cloud contains non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape[0] != self.points.shape[0]:
                raise ContractError(
                    f"{self.normals.shape[0]} normals for {self.points.shape[0]} points"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > UNIT_TOL):
                worst = float(np.abs(lengths - 1.0).max())
                raise ContractError(f"normals are not unit length (worst deviation {worst:.2e})")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ContractError(f"image size must be positive, got {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


@dataclass
class Neighborhood:
    """Fixed-length neighbor index list around one center point."""

    center: int
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


def project(point: np.ndarray, intr: CameraIntrinsics) -> tuple[float, float] | None:
    """Pinhole projection; None when behind the camera or outside the image."""
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= 0.0:
        return None
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    if not (0.0 <= u < intr.width and 0.0 <= v < intr.height):
        return None
    return (u, v)


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: (uv [N,2], valid mask). Invalid rows hold NaN."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * points[:, 0] / z + intr.cx
        v = intr.fy * points[:, 1] / z + intr.cy
    valid = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    uv = np.stack([u, v], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def unproject(u: float, v: float, z: float, intr: CameraIntrinsics) -> np.ndarray:
    """Invert the pinhole map at a known depth."""
    return np.array([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z])


class NeighborIndex:
    """Uniform hash grid over a cloud, cell size equal to the query radius.

    Candidate cells are the 3x3x3 block around the query cell, so any point
    within `radius` of the query point is guaranteed to be scanned.
    """

    def __init__(self, cloud: PointCloud, radius: float):
        if radius <= 0:
            raise ContractError(f"query radius must be positive, got {radius}")
        self.cloud = cloud
        self.radius = float(radius)
        self._cells: dict[tuple[int, int, int], list[int]] = {}
        keys = np.floor(cloud.points / self.radius).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self._cells.setdefault(key, []).append(i)

    def in_radius(self, center: int) -> np.ndarray:
        """All indices (center included) within radius of the center point."""
        p = self.cloud.points[center]
        base = np.floor(p / self.radius).astype(np.int64)
        candidates: list[int] = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    cell = (base[0] + di, base[1] + dj, base[2] + dk)
                    candidates.extend(self._cells.get(cell, ()))
        cand = np.array(sorted(candidates), dtype=np.int64)
        d2 = np.sum((self.cloud.points[cand] - p) ** 2, axis=1)
        return cand[d2 <= self.radius * self.radius]

    def query(self, center: int, count: int, rng: np.random.Generator) -> Neighborhood:
        return radius_knn(self.cloud, center, self.radius, count, rng, index=self)


def radius_knn(
    cloud: PointCloud,
    center: int,
    radius: float,
    count: int,
    rng: np.random.Generator,
    index: NeighborIndex | None = None,
) -> Neighborhood:
    """Random sample of `count` in-radius neighbors, padded with the center.

    When more than `count` points lie within the radius, a uniform sample
    without replacement is drawn; when fewer, the center index fills the
    remaining slots.
    """
    if count < 1:
        raise ContractError(f"neighbor count must be >= 1, got {count}")
    if index is None:
        index = NeighborIndex(cloud, radius)
    hits = index.in_radius(center)
    if hits.size > count:
        chosen = rng.choice(hits, size=count, replace=False)
        chosen.sort()
    elif hits.size < count:
        chosen = np.concatenate([hits, np.full(count - hits.size, center, dtype=np.int64)])
    else:
        chosen = hits
    return Neighborhood(center=center, indices=chosen)


# ---------------------------------------------------------------------------
# symmetric 3x3 eigen-analysis and plane fitting
# ---------------------------------------------------------------------------

def _eigenvector_for(m: np.ndarray, lam: float) -> np.ndarray:
    """Null-space direction of (m - lam I) via the largest row cross product."""
    a = m - lam * np.eye(3)
    crosses = np.array([
        np.cross(a[0], a[1]),
        np.cross(a[0], a[2]),
        np.cross(a[1], a[2]),
    ])
    norms = np.linalg.norm(crosses, axis=1)
    best = int(np.argmax(norms))
    if norms[best] < 1e-30:
        # Eigenvalue with multiplicity >= 2: any direction orthogonal to the
        # remaining eigenvector works; pick deterministically.
        return np.zeros(3)
    return crosses[best] / norms[best]


def symmetric_eigen3(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors (columns) of a symmetric 3x3.

    Closed-form trigonometric eigenvalues plus cross-product eigenvectors;
    no iterative solver involved.
    """
    m = np.asarray(m, dtype=np.float64)
    scale = np.abs(m).max()
    if scale == 0.0:
        return np.zeros(3), np.eye(3)
    a = m / scale
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = np.trace(a) / 3.0
    if p1 < 1e-30:
        vals = np.sort(np.diag(a))
        order = np.argsort(np.diag(a), kind="stable")
        vecs = np.eye(3)[:, order]
        return vals * scale, vecs
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    lam_hi = q + 2.0 * p * np.cos(phi)
    lam_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    lam_mid = 3.0 * q - lam_hi - lam_lo
    vals = np.array([lam_lo, lam_mid, lam_hi])

    v_lo = _eigenvector_for(a, lam_lo)
    v_hi = _eigenvector_for(a, lam_hi)
    if np.linalg.norm(v_lo) == 0.0 and np.linalg.norm(v_hi) > 0.0:
        # Two smallest eigenvalues coincide: complete a basis around v_hi.
        axis = np.eye(3)[int(np.argmin(np.abs(v_hi)))]
        v_lo = np.cross(v_hi, axis)
        v_lo /= np.linalg.norm(v_lo)
    elif np.linalg.norm(v_hi) == 0.0 and np.linalg.norm(v_lo) > 0.0:
        axis = np.eye(3)[int(np.argmin(np.abs(v_lo)))]
        v_hi = np.cross(v_lo, axis)
        v_hi /= np.linalg.norm(v_hi)
    elif np.linalg.norm(v_lo) == 0.0 and np.linalg.norm(v_hi) == 0.0:
        return vals * scale, np.eye(3)  # fully degenerate (scaled identity)
    v_mid = np.cross(v_hi, v_lo)
    v_mid /= np.linalg.norm(v_mid)
    vecs = np.stack([v_lo, v_mid, v_hi], axis=1)
    return vals * scale, vecs


@dataclass
class PlaneFit:
    normal: np.ndarray
    eigenvalues: np.ndarray  # ascending
    ambiguous: bool  # two smallest eigenvalues effectively tied


def fit_plane(points: np.ndarray) -> PlaneFit:
    """Least-squares plane normal of distinct points via covariance analysis."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 3), axis=0)
    if pts.shape[0] < 3:
        raise DegenerateNeighborhoodError(
            f"plane fit needs >= 3 distinct points, got {pts.shape[0]}"
        )
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    vals, vecs = symmetric_eigen3(cov)
    spread = max(vals[2], 1e-30)
    ambiguous = (vals[1] - vals[0]) <= 1e-9 * spread
    return PlaneFit(normal=vecs[:, 0], eigenvalues=vals, ambiguous=ambiguous)


def pca_normal(
    cloud: PointCloud,
    nbr: Neighborhood,
    sensor_origin: np.ndarray | None = None,
) -> np.ndarray:
    """Unit normal of the neighborhood's least-squares plane, facing the sensor.

    Padding duplicates are removed first and do not count toward the three
    distinct points required; degenerate neighborhoods raise, and callers
    fall back to the view direction.
    """
    fit = fit_plane(cloud.points[nbr.indices])
    return orient_toward(fit.normal, cloud.points[nbr.center], sensor_origin)


def orient_toward(
    normal: np.ndarray,
    point: np.ndarray,
    sensor_origin: np.ndarray | None = None,
) -> np.ndarray:
    """Flip a normal if needed so dot(n, origin - point) >= 0."""
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=np.float64)
    if float(np.dot(normal, origin - point)) < 0.0:
        return -normal
    return normal


def view_direction(point: np.ndarray, sensor_origin: np.ndarray | None = None) -> np.ndarray:
    """Unit vector from a point toward the sensor (PCA fallback prediction)."""
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=np.float64)
    d = origin - np.asarray(point, dtype=np.float64)
    n = np.linalg.norm(d)
    if n == 0.0:
        raise ContractError("point coincides with the sensor origin")
    return d / n


# ---------------------------------------------------------------------------
# angle metrics
# ---------------------------------------------------------------------------

def angle_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Sign-invariant angle between two directions, in [0, pi/2] radians."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    np_pred = np.linalg.norm(pred)
    np_gt = np.linalg.norm(gt)
    if np_pred == 0.0 or np_gt == 0.0:
        raise ContractError("angle_error is undefined for zero vectors")
    c = abs(float(np.dot(pred, gt))) / (np_pred * np_gt)
    return float(np.arccos(min(c, 1.0)))


def angle_errors(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized per-row angle_error."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 3)
    if preds.shape != gts.shape:
        raise ContractError(f"shape mismatch: {preds.shape} vs {gts.shape}")
    pn = np.linalg.norm(preds, axis=1)
    gn = np.linalg.norm(gts, axis=1)
    if np.any(pn == 0.0) or np.any(gn == 0.0):
        raise ContractError("angle_error is undefined for zero vectors")
    c = np.abs(np.sum(preds * gts, axis=1)) / (pn * gn)
    return np.arccos(np.minimum(c, 1.0))


def mean_angle_error(preds: np.ndarray, gts: np.ndarray) -> float:
    """Arithmetic mean of per-point angle errors, in radians."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    if preds.shape[0] < 1:
        raise ContractError("mean_angle_error needs at least one pair")
    return float(np.mean(angle_errors(preds, gts)))
