"""Independent geometric oracles shared by scene and acceptance tests."""

import numpy as np

from hgtnormals import scene as scn


def _complete_basis(direction):
    """Two unit vectors orthogonal to `direction` (and to each other)."""
    d = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(d, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(d, t1)
    return t1, t2


def surface_tangents(prim, point, tol=1e-6):
    """Two tangent directions of the primitive's surface at a hit point.

    Derived from each primitive's own geometry (never from the normal the
    ray caster returned), so dotting them with the returned normal is an
    independent orthogonality check.
    """
    if isinstance(prim, scn.Plane):
        return _complete_basis(prim.normal)
    if isinstance(prim, scn.Sphere):
        radial = point - prim.center
        return _complete_basis(radial)
    if isinstance(prim, scn.Box):
        for axis in range(3):
            if abs(point[axis] - prim.lo[axis]) < tol or abs(point[axis] - prim.hi[axis]) < tol:
                others = [i for i in range(3) if i != axis]
                return np.eye(3)[others[0]], np.eye(3)[others[1]]
        raise AssertionError(f"point {point} is not on a face of {prim}")
    if isinstance(prim, scn.Cylinder):
        rel = point - prim.base
        if abs(rel[1]) < tol or abs(rel[1] - prim.height) < tol:
            r2 = rel[0] ** 2 + rel[2] ** 2
            if r2 < (prim.radius - tol) ** 2:  # strictly inside a cap
                return np.eye(3)[0], np.eye(3)[2]
        radial = np.array([rel[0], 0.0, rel[2]])
        axis = np.array([0.0, 1.0, 0.0])
        t2 = np.cross(axis, radial)
        t2 /= np.linalg.norm(t2)
        return axis, t2
    raise AssertionError(f"unknown primitive type {type(prim)}")
