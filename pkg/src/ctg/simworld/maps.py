"""Procedural road maps on a 1 m drivable grid.

All roads are divided: each direction has its own 5 m carriageway (4 m lane
plus shoulder) and the two are separated by a 2 m non-drivable median, so
lane centres of opposing traffic are 7 m apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from ..stl.signal import DistanceField

CARRIAGEWAY_HALF = 2.5
LANE_OFFSET = 3.5
GRID = 256


@dataclass
class SceneMap:
    """Drivable grid plus lane geometry.

    ``drivable[i, j]`` covers world x in [j, j+1), y in [i, i+1) (cell size 1 m,
    origin at 0). ``routes`` are the polylines agents may follow; ``lanes`` are
    the drawable centrelines that generated the drivable area.
    """

    archetype: str
    drivable: np.ndarray
    lanes: list[np.ndarray]
    routes: list[np.ndarray]
    stop_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    stop_lines: list[tuple[int, float]] = field(default_factory=list)  # (route index, arc length)
    cell: float = 1.0
    lane_dir: np.ndarray = None
    sdf: DistanceField = None

    def __post_init__(self) -> None:
        self.drivable = np.asarray(self.drivable, bool)
        if self.lane_dir is None:
            self.lane_dir = _lane_direction(self.drivable.shape, self.lanes, self.drivable)
        if self.sdf is None:
            self.sdf = signed_distance(self.drivable, self.cell)

    @property
    def shape(self) -> tuple[int, int]:
        return self.drivable.shape

    def cell_index(self, x, y):
        j = np.floor(np.asarray(x) / self.cell).astype(int)
        i = np.floor(np.asarray(y) / self.cell).astype(int)
        return i, j

    def is_drivable(self, x, y) -> np.ndarray:
        i, j = self.cell_index(x, y)
        h, w = self.shape
        inside = (i >= 0) & (i < h) & (j >= 0) & (j < w)
        out = np.zeros(np.shape(i), bool)
        out[inside] = self.drivable[i[inside], j[inside]]
        return out


def signed_distance(drivable: np.ndarray, cell: float = 1.0) -> DistanceField:
    """Distance from each drivable cell centre to the nearest non-drivable cell centre.

    Non-drivable cells get minus the distance to the nearest drivable cell.
    Everything outside the grid counts as non-drivable.
    """
    padded = np.pad(drivable, 1, constant_values=False)
    inside = distance_transform_edt(padded) * cell
    outside = distance_transform_edt(~padded) * cell
    values = (inside - outside)[1:-1, 1:-1]
    return DistanceField(values, (0.0, 0.0), cell)


def _segment_distance(px: np.ndarray, py: np.ndarray, line: np.ndarray):
    """Distance from points to a polyline and the direction of the nearest segment."""
    best = np.full(px.shape, np.inf)
    heading = np.zeros(px.shape)
    a = line[:-1]
    b = line[1:]
    for (ax, ay), (bx, by) in zip(a, b):
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        if L2 == 0:
            continue
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
        d = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
        closer = d < best
        best = np.where(closer, d, best)
        heading = np.where(closer, np.arctan2(dy, dx), heading)
    return best, heading


def _cell_centres(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _rasterize(shape, lanes, half_width=CARRIAGEWAY_HALF) -> np.ndarray:
    cx, cy = _cell_centres(shape)
    out = np.zeros(shape, bool)
    for lane in lanes:
        # restrict work to the lane's bounding box
        lo = np.floor(lane.min(axis=0) - half_width - 1).astype(int)
        hi = np.ceil(lane.max(axis=0) + half_width + 1).astype(int)
        j0, i0 = max(lo[0], 0), max(lo[1], 0)
        j1, i1 = min(hi[0], shape[1]), min(hi[1], shape[0])
        if j0 >= j1 or i0 >= i1:
            continue
        d, _ = _segment_distance(cx[i0:i1, j0:j1], cy[i0:i1, j0:j1], lane)
        out[i0:i1, j0:j1] |= d <= half_width
    return out


def _lane_direction(shape, lanes, drivable) -> np.ndarray:
    """Per-cell world heading (cos, sin) of the nearest lane; zero off-road."""
    cx, cy = _cell_centres(shape)
    best = np.full(shape, np.inf)
    heading = np.zeros(shape)
    for lane in lanes:
        d, h = _segment_distance(cx, cy, lane) if lane.shape[0] < 64 else _coarse(cx, cy, lane)
        closer = d < best
        best = np.where(closer, d, best)
        heading = np.where(closer, h, heading)
    out = np.stack([np.cos(heading), np.sin(heading)], axis=0)
    return np.where(drivable[None], out, 0.0)


def _coarse(cx, cy, lane):
    # long lanes: resample to at most 64 segments, plenty for a 1 m direction field
    idx = np.linspace(0, lane.shape[0] - 1, 65).round().astype(int)
    return _segment_distance(cx, cy, lane[np.unique(idx)])


# ------------------------------------------------------------------ builders


def _line(p0, p1, step=1.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(np.ceil(np.linalg.norm(p1 - p0) / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return p0 + t * (p1 - p0)


def _arc(center, radius, a0, a1, step=0.5) -> np.ndarray:
    n = max(int(np.ceil(abs(a1 - a0) * radius / step)), 2)
    a = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def _join(*parts) -> np.ndarray:
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


def straight_map(size: int = GRID) -> SceneMap:
    c = size / 2
    east = _line((0.0, c - LANE_OFFSET), (float(size), c - LANE_OFFSET))
    west = _line((float(size), c + LANE_OFFSET), (0.0, c + LANE_OFFSET))
    lanes = [east, west]
    return SceneMap("straight", _rasterize((size, size), lanes), lanes, [east, west])


def ring_map(size: int = GRID, radius: float = 70.0, laps: int = 3) -> SceneMap:
    c = np.array([size / 2, size / 2])
    inner = radius - LANE_OFFSET
    outer = radius + LANE_OFFSET
    ccw_loop = _arc(c, inner, 0.0, 2 * np.pi)
    cw_loop = _arc(c, outer, 0.0, -2 * np.pi)
    lanes = [ccw_loop, cw_loop]
    drivable = _rasterize((size, size), lanes)
    # routes wind round several times so agents never run out of path
    ccw = _arc(c, inner, 0.0, 2 * np.pi * laps)
    cw = _arc(c, outer, 0.0, -2 * np.pi * laps)
    return SceneMap("curve", drivable, lanes, [ccw, cw])


def intersection_map(size: int = GRID, turn_radius: float = 8.0) -> SceneMap:
    c = size / 2
    r = turn_radius
    east = _line((0.0, c - LANE_OFFSET), (float(size), c - LANE_OFFSET))
    west = _line((float(size), c + LANE_OFFSET), (0.0, c + LANE_OFFSET))
    south = _line((c - LANE_OFFSET, float(size)), (c - LANE_OFFSET, 0.0))
    north = _line((c + LANE_OFFSET, 0.0), (c + LANE_OFFSET, float(size)))
    # right turns: eastbound -> southbound, westbound -> northbound
    turn_es = _arc((c - LANE_OFFSET - r, c - LANE_OFFSET - r), r, np.pi / 2, 0.0)
    turn_wn = _arc((c + LANE_OFFSET + r, c + LANE_OFFSET + r), r, -np.pi / 2, -np.pi)
    lanes = [east, west, south, north, turn_es, turn_wn]
    drivable = _rasterize((size, size), lanes)
    box = np.zeros_like(drivable)
    lo, hi = int(np.floor(c - LANE_OFFSET - CARRIAGEWAY_HALF)), int(np.ceil(c + LANE_OFFSET + CARRIAGEWAY_HALF))
    box[lo:hi, lo:hi] = True
    drivable |= box
    route_es = _join(_line((0.0, c - LANE_OFFSET), (c - LANE_OFFSET - r, c - LANE_OFFSET)), turn_es,
                     _line((c - LANE_OFFSET, c - LANE_OFFSET - r), (c - LANE_OFFSET, 0.0)))
    route_wn = _join(_line((float(size), c + LANE_OFFSET), (c + LANE_OFFSET + r, c + LANE_OFFSET)), turn_wn,
                     _line((c + LANE_OFFSET, c + LANE_OFFSET + r), (c + LANE_OFFSET, float(size))))
    routes = [east, west, route_es, route_wn]
    stop_x = c - LANE_OFFSET - CARRIAGEWAY_HALF - 2.0  # stop line before the junction
    stop_boxes = [
        (stop_x - 10.0, c - LANE_OFFSET, 10.0, 10.0),
        (size - stop_x + 10.0, c + LANE_OFFSET, 10.0, 10.0),
    ]
    # arc length of the stop line along each route
    stop_lines = [(0, stop_x), (1, size - (size - stop_x)), (2, stop_x), (3, size - (size - stop_x))]
    return SceneMap("intersection", drivable, lanes, routes, stop_boxes, stop_lines)


ARCHETYPES = {"straight": straight_map, "curve": ring_map, "intersection": intersection_map}


def build_map(archetype: str) -> SceneMap:
    try:
        return ARCHETYPES[archetype]()
    except KeyError:
        raise ValueError(f"unknown map archetype {archetype!r}; choose from {sorted(ARCHETYPES)}") from None
