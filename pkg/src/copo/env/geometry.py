"""Planar geometry kernels: oriented boxes, ray casting, polylines, spatial hashing."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Hashable, Iterable

import numpy as np


def box_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle in counter-clockwise order, shape (4, 2)."""
    c, s = math.cos(heading), math.sin(heading)
    lx, ly = 0.5 * length * c, 0.5 * length * s
    wx, wy = -0.5 * width * s, 0.5 * width * c
    return np.array([[x + lx + wx, y + ly + wy], [x - lx + wx, y - ly + wy],
                     [x - lx - wx, y - ly - wy], [x + lx - wx, y + ly - wy]])


def _project(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    p = corners @ axis
    return float(p.min()), float(p.max())


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given by their corners.

    Touching edges count as overlap, which keeps the relation symmetric and
    conservative for spawn checks.
    """
    for corners in (a, b):
        for k in range(2):
            edge = corners[k + 1] - corners[k]
            axis = np.array([-edge[1], edge[0]])
            amin, amax = _project(a, axis)
            bmin, bmax = _project(b, axis)
            if amax < bmin or bmax < amin:
                return False
    return True


NEXT_CORNER = np.array([1, 2, 3, 0])


def box_edges(corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return corners, corners[NEXT_CORNER]


def ray_segment_hits(origin: np.ndarray, directions: np.ndarray,
                     seg_a: np.ndarray, seg_b: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each ray to the nearest segment, capped at ``max_range``.

    ``directions`` is (R, 2) of unit vectors; segments are (S, 2) endpoint arrays.
    """
    n_rays = directions.shape[0]
    if seg_a.shape[0] == 0:
        return np.full(n_rays, max_range)
    e = seg_b - seg_a                      # (S, 2)
    w = seg_a - origin                     # (S, 2)
    dx, dy = directions[:, 0:1], directions[:, 1:2]   # (R, 1)
    denom = dx * e[None, :, 1] - dy * e[None, :, 0]   # cross(d, e), (R, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * dy - w[None, :, 1] * dx) / denom
    valid = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def ray_box_distance(origin: np.ndarray, direction: np.ndarray, corners: np.ndarray) -> float:
    """Entry distance of a single ray into a convex quad (slab method in box frame); inf on miss."""
    center = corners.mean(axis=0)
    ax = corners[0] - corners[1]
    ay = corners[0] - corners[3]
    hl, hw = 0.5 * np.linalg.norm(ax), 0.5 * np.linalg.norm(ay)
    ux, uy = ax / (2 * hl), ay / (2 * hw)
    o = origin - center
    lo, hi = 0.0, np.inf
    for u, half in ((ux, hl), (uy, hw)):
        p = float(o @ u)
        d = float(direction @ u)
        if abs(d) < 1e-15:
            if abs(p) > half:
                return np.inf
            continue
        t1, t2 = (-half - p) / d, (half - p) / d
        if t1 > t2:
            t1, t2 = t2, t1
        lo, hi = max(lo, t1), min(hi, t2)
        if lo > hi:
            return np.inf
    return lo


def project_to_polyline(point: np.ndarray, polyline: np.ndarray,
                        cum_len: np.ndarray | None = None) -> tuple[float, float, float, int]:
    """Nearest-point projection.

    Returns (arc_length, signed_lateral_offset, distance, segment_index). The
    lateral offset is positive to the left of the direction of travel.
    """
    a = polyline[:-1]
    b = polyline[1:]
    seg = b - a
    seg_len2 = np.einsum("ij,ij->i", seg, seg)
    t = np.clip(np.einsum("ij,ij->i", point - a, seg) / seg_len2, 0.0, 1.0)
    proj = a + t[:, None] * seg
    d2 = np.sum((proj - point) ** 2, axis=1)
    k = int(np.argmin(d2))
    if cum_len is None:
        cum_len = polyline_arclength(polyline)
    seg_len = np.sqrt(seg_len2[k])
    s = float(cum_len[k] + t[k] * seg_len)
    rel = point - a[k]
    lateral = float((seg[k, 0] * rel[1] - seg[k, 1] * rel[0]) / seg_len)
    return s, lateral, float(np.sqrt(d2[k])), k


def polyline_arclength(polyline: np.ndarray) -> np.ndarray:
    seg = np.diff(polyline, axis=0)
    return np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])


def polyline_point(polyline: np.ndarray, cum_len: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    """Point and tangent heading at arc length ``s`` (clamped to the polyline)."""
    s = float(np.clip(s, 0.0, cum_len[-1]))
    k = int(np.searchsorted(cum_len, s, side="right") - 1)
    k = min(max(k, 0), len(polyline) - 2)
    seg = polyline[k + 1] - polyline[k]
    seg_len = cum_len[k + 1] - cum_len[k]
    frac = 0.0 if seg_len == 0 else (s - cum_len[k]) / seg_len
    return polyline[k] + frac * seg, float(np.arctan2(seg[1], seg[0]))


def points_to_polyline_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Unsigned distance from each of (N, 2) points to a polyline."""
    a = polyline[:-1][None]
    seg = (polyline[1:] - polyline[:-1])[None]
    rel = points[:, None, :] - a
    t = np.clip(np.sum(rel * seg, axis=2) / np.sum(seg * seg, axis=2), 0.0, 1.0)
    d = rel - t[..., None] * seg
    return np.sqrt(np.min(np.sum(d * d, axis=2), axis=1))


def wrap_angle(a: float | np.ndarray) -> float | np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi


class SpatialHash:
    """Uniform grid broad phase keyed by integer cell coordinates."""

    def __init__(self, cell_size: float):
        self.cell_size = float(cell_size)
        self._cells: dict[tuple[int, int], list[Hashable]] = defaultdict(list)

    def _cell(self, x: float, y: float) -> tuple[int, int]:
        return int(np.floor(x / self.cell_size)), int(np.floor(y / self.cell_size))

    def insert_point(self, key: Hashable, x: float, y: float) -> None:
        self._cells[self._cell(x, y)].append(key)

    def insert_extent(self, key: Hashable, xmin: float, ymin: float, xmax: float, ymax: float) -> None:
        i0, j0 = self._cell(xmin, ymin)
        i1, j1 = self._cell(xmax, ymax)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                self._cells[(i, j)].append(key)

    def query_radius(self, x: float, y: float, radius: float) -> list[Hashable]:
        """Candidate keys in every cell touched by the square bounding the disc."""
        i0, j0 = self._cell(x - radius, y - radius)
        i1, j1 = self._cell(x + radius, y + radius)
        out: list[Hashable] = []
        seen = set()
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for key in self._cells.get((i, j), ()):
                    if key not in seen:
                        seen.add(key)
                        out.append(key)
        return out

    def candidate_pairs(self) -> Iterable[tuple[Hashable, Hashable]]:
        """Unordered key pairs sharing at least one cell, each reported once."""
        seen = set()
        for members in self._cells.values():
            n = len(members)
            for p in range(n):
                for q in range(p + 1, n):
                    a, b = members[p], members[q]
                    if a == b:
                        continue
                    pair = (a, b) if repr(a) < repr(b) else (b, a)
                    if pair not in seen:
                        seen.add(pair)
                        yield pair


def radius_neighbors(points: np.ndarray, radius: float) -> list[np.ndarray]:
    """For each point, sorted indices of the other points within ``radius`` (inclusive).

    Uses a hash grid with cell size ``radius``; infinite radius degenerates to all-pairs.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    if n == 0:
        return []
    if not np.isfinite(radius):
        idx = np.arange(n)
        return [idx[idx != i] for i in range(n)]
    r2 = radius * radius
    grid = SpatialHash(max(radius, 1e-9))
    for i in range(n):
        grid.insert_point(i, points[i, 0], points[i, 1])
    out = []
    for i in range(n):
        cand = np.array(sorted(j for j in grid.query_radius(points[i, 0], points[i, 1], radius) if j != i),
                        dtype=int)
        if cand.size:
            d = points[cand] - points[i]
            cand = cand[d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] <= r2]
        out.append(cand)
    return out
