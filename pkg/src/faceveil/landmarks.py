"""Delaunay triangulation of 2-d landmark sets, Laplacian (differential)
coordinates, and the landmark smoothness loss.

The triangulation is built once from the original landmarks and reused for
the edited ones, so differential coordinates stay in correspondence.
Collinear or duplicate inputs are rejected outright rather than perturbed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .nets import FrozenMlp
from .tensorcore import Node


class DegenerateGeometryError(ValueError):
    pass


class UntrainedRegressorError(RuntimeError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2-d landmark coordinates in pixel units, plus the index
    subset the smoothness loss is applied to."""

    points: np.ndarray
    selected: tuple[int, ...] = ()
    image_size: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be (K, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        sel = tuple(int(i) for i in self.selected)
        if len(set(sel)) != len(sel):
            raise ValueError("selected indices must be unique")
        if sel and (min(sel) < 0 or max(sel) >= len(pts)):
            raise ValueError("selected indices out of range")
        if self.image_size is not None:
            hi = self.image_size - 1
            if np.any(pts < 0.0) or np.any(pts > hi):
                raise ValueError("landmarks outside the image rectangle")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "selected", sel)

    def __len__(self):
        return len(self.points)


@dataclass
class Triangulation:
    triangles: list[tuple[int, int, int]]
    neighbors: dict[int, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.neighbors:
            nb: dict[int, set[int]] = {}
            for a, b, c in self.triangles:
                for u, v in ((a, b), (b, c), (c, a)):
                    nb.setdefault(u, set()).add(v)
                    nb.setdefault(v, set()).add(u)
            self.neighbors = {i: frozenset(s) for i, s in nb.items()}


def circumcircle(p1: np.ndarray, p2: np.ndarray, p3: np.ndarray):
    """Center and squared radius, or None when the points are collinear."""
    ax, ay = p1
    bx, by = p2
    cx, cy = p3
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        return None
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    center = np.array([ux, uy])
    r2 = float((p1[0] - ux) ** 2 + (p1[1] - uy) ** 2)
    return center, r2


def _triangle_area(p1, p2, p3) -> float:
    return 0.5 * abs((p2[0] - p1[0]) * (p3[1] - p1[1]) - (p3[0] - p1[0]) * (p2[1] - p1[1]))


def delaunay(points) -> Triangulation:
    """Incremental Bowyer-Watson construction with a super-triangle that is
    removed at the end."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (K, 2), got {pts.shape}")
    n = len(pts)
    if n < 3:
        raise DegenerateGeometryError("need at least 3 points")
    seen = set()
    for p in pts:
        key = (float(p[0]), float(p[1]))
        if key in seen:
            raise DegenerateGeometryError(f"duplicate point {key}")
        seen.add(key)
    span = pts.max(axis=0) - pts.min(axis=0)
    scale = max(float(span.max()), 1.0)
    if all(_triangle_area(pts[0], pts[1], pts[k]) < 1e-12 * scale * scale for k in range(2, n)):
        raise DegenerateGeometryError("all points are collinear")

    # super-triangle comfortably containing every point
    center = pts.mean(axis=0)
    m = 20.0 * scale
    sup = np.array([
        [center[0] - 2.0 * m, center[1] - m],
        [center[0] + 2.0 * m, center[1] - m],
        [center[0], center[1] + 2.0 * m],
    ])
    allpts = np.vstack([pts, sup])
    s0, s1, s2 = n, n + 1, n + 2

    tris: list[tuple[int, int, int]] = [(s0, s1, s2)]
    circles = {(s0, s1, s2): circumcircle(allpts[s0], allpts[s1], allpts[s2])}

    for ip in range(n):
        p = allpts[ip]
        bad = []
        for tri in tris:
            cc = circles[tri]
            if cc is None:
                continue
            ctr, r2 = cc
            d2 = float((p[0] - ctr[0]) ** 2 + (p[1] - ctr[1]) ** 2)
            if d2 < r2 * (1.0 - 1e-12):
                bad.append(tri)
        bad_set = set(bad)
        boundary = []
        for tri in bad:
            a, b, c = tri
            for edge in ((a, b), (b, c), (c, a)):
                shared = False
                for other in bad:
                    if other is tri:
                        continue
                    if edge[0] in other and edge[1] in other:
                        shared = True
                        break
                if not shared:
                    boundary.append(edge)
        tris = [t for t in tris if t not in bad_set]
        for u, v in boundary:
            newtri = (u, v, ip)
            tris.append(newtri)
            circles[newtri] = circumcircle(allpts[u], allpts[v], allpts[ip])

    final = [t for t in tris if s0 not in t and s1 not in t and s2 not in t]
    for a, b, c in final:
        if _triangle_area(pts[a], pts[b], pts[c]) < 1e-12 * scale * scale:
            raise DegenerateGeometryError("triangulation produced a zero-area triangle")
    final = [tuple(sorted(t)) for t in final]
    return Triangulation(triangles=sorted(final))


def laplacian_coords(points: np.ndarray, neighbors: dict[int, frozenset[int]], i: int) -> np.ndarray:
    """Landmark i minus the arithmetic mean of its neighbors."""
    pts = np.asarray(points, dtype=np.float64)
    nbrs = neighbors.get(i)
    if not nbrs:
        raise DegenerateGeometryError(f"vertex {i} has no neighbors")
    idx = sorted(nbrs)
    return pts[i] - pts[idx].mean(axis=0)


def laplacian_loss(v_o: LandmarkSet, v_p: LandmarkSet, tri: Triangulation) -> float:
    """Mean over the selected subset of the l2 distance between original and
    edited differential coordinates."""
    if len(v_o) != len(v_p):
        raise ValueError("landmark sets must have identical length and ordering")
    sel = v_o.selected if v_o.selected else tuple(range(len(v_o)))
    total = 0.0
    for i in sel:
        d_o = laplacian_coords(v_o.points, tri.neighbors, i)
        d_p = laplacian_coords(v_p.points, tri.neighbors, i)
        total += float(np.linalg.norm(d_o - d_p))
    return total / len(sel)


def differential_matrix(tri: Triangulation, selected, n_points: int) -> np.ndarray:
    """Constant matrix mapping flattened (x0,y0,x1,y1,...) coordinates to the
    stacked differential coordinates of the selected landmarks."""
    sel = tuple(selected)
    mat = np.zeros((2 * len(sel), 2 * n_points))
    for row, i in enumerate(sel):
        nbrs = sorted(tri.neighbors.get(i, ()))
        if not nbrs:
            raise DegenerateGeometryError(f"selected vertex {i} has no neighbors")
        for axis in range(2):
            r = 2 * row + axis
            mat[r, 2 * i + axis] = 1.0
            for j in nbrs:
                mat[r, 2 * j + axis] = -1.0 / len(nbrs)
    return mat


def laplacian_loss_node(v_o_points: np.ndarray, v_p_coords: Node, tri: Triangulation,
                        selected) -> Node:
    """Differentiable smoothness loss for a batch of predicted coordinate
    rows (n, 2K); the original landmarks and triangulation are fixtures."""
    sel = tuple(selected)
    v_o_points = np.asarray(v_o_points, dtype=np.float64)
    k = len(v_o_points)
    if v_p_coords.value.ndim != 2 or v_p_coords.value.shape[1] != 2 * k:
        raise tc.ShapeError(f"expected (n, {2 * k}) predicted coordinates")
    n = v_p_coords.value.shape[0]
    dmat = differential_matrix(tri, sel, k)
    delta_o = dmat @ v_o_points.ravel()
    diff = tc.sub(tc.matmul(v_p_coords, tc.const(dmat.T)), tc.const(np.tile(delta_o, (n, 1))))
    total = None
    for j in range(len(sel)):
        pick = np.zeros((2 * len(sel), 2))
        pick[2 * j, 0] = 1.0
        pick[2 * j + 1, 1] = 1.0
        norms = tc.rownorm(tc.matmul(diff, tc.const(pick)))
        term = tc.asum(norms)
        total = term if total is None else tc.add(total, term)
    return tc.scale(total, 1.0 / (len(sel) * n))


class LandmarkRegressor:
    """Frozen image -> 2K coordinate map.  Predicts residuals from a mean
    template; refuses to run until the preparation stage has marked it as
    trained (with its achieved held-out error)."""

    def __init__(self, net: FrozenMlp, n_landmarks: int, trained_px_error: float | None = None):
        self.net = net
        self.n_landmarks = n_landmarks
        self.trained_px_error = trained_px_error

    @property
    def trained(self) -> bool:
        return self.trained_px_error is not None

    def coords_np(self, x: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise UntrainedRegressorError("landmark regressor has not been trained")
        return self.net.forward_np(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    def coords_node(self, x: Node) -> Node:
        if not self.trained:
            raise UntrainedRegressorError("landmark regressor has not been trained")
        return self.net.forward_node(x)


def regress_landmarks(x: np.ndarray, reg: LandmarkRegressor, selected=()) -> LandmarkSet:
    coords = reg.coords_np(x)[0]
    return LandmarkSet(points=coords.reshape(-1, 2), selected=tuple(selected))
