"""Half-space systems to drawable polygons."""

from __future__ import annotations

import numpy as np

FEAS_EPS = 1e-9


class RegionError(ValueError):
    """The half-space system does not bound a drawable polygon."""


def halfspaces_to_polygon(a_matrix, b_vector, tol: float = FEAS_EPS) -> np.ndarray:
    """Vertices of {x in R^2 : A x <= b}, ordered around the centroid.

    Vertices come from pairwise line intersections filtered by feasibility.
    Raises RegionError for empty or unbounded regions (a bounded region
    needs the constraint normals to positively span the plane, i.e. no
    angular gap of pi or more between consecutive normals).
    """
    a = np.asarray(a_matrix, dtype=float)
    b = np.asarray(b_vector, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"expected (m, 2) normals and (m,) offsets, got {a.shape}, {b.shape}")

    rows = np.linalg.norm(a, axis=1)
    live = rows > 0
    if not live.any():
        raise RegionError("all rows are zero: region is empty or the whole plane")
    angles = np.sort(np.arctan2(a[live, 1], a[live, 0]))
    gaps = np.diff(np.concatenate([angles, angles[:1] + 2 * np.pi]))
    if gaps.max() >= np.pi - 1e-12:
        raise RegionError("normals leave an open half-plane: region unbounded")

    m = a.shape[0]
    points = []
    for i in range(m):
        for j in range(i + 1, m):
            mat = np.array([a[i], a[j]])
            det = np.linalg.det(mat)
            if abs(det) < 1e-12:
                continue
            v = np.linalg.solve(mat, np.array([b[i], b[j]]))
            if np.all(a @ v <= b + tol):
                points.append(v)
    if not points:
        raise RegionError("no feasible vertex: region is empty")

    pts = np.unique(np.round(np.asarray(points), 12), axis=0)
    if pts.shape[0] < 3:
        raise RegionError(f"only {pts.shape[0]} distinct vertices: degenerate region")
    centroid = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - centroid[1], pts[:, 0] - centroid[0]))
    return pts[order]
