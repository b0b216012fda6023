"""Synthetic road scenes with analytic 2D occlusion.

The road layout is a union of axis-aligned rectangles. Everything outside the
layout is a solid building block, so a scan point is visible only when the
straight segment from the sensor to it stays on the road.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from terrex.cloud import ROAD_LABEL, PointCloud, VoxelGeometry, VoxelGrid
from terrex.errors import ConfigError

BUILDING_LABEL = 50
KINDS = ("t-intersection", "l-corner", "straight")


@dataclass(frozen=True)
class SceneParams:
    road_width: float = 3.0
    arm_length: float = 16.0
    resolution: float = 0.5
    point_spacing: float = 0.35
    sensor_xy: Optional[tuple] = None
    sensor_range: float = 60.0
    noise: float = 0.01
    wall_height: float = 1.5

    def validate(self):
        if self.road_width <= 0 or self.arm_length <= self.road_width:
            raise ConfigError("scene needs road_width > 0 and arm_length > road_width")
        if self.resolution <= 0 or self.point_spacing <= 0 or self.sensor_range <= 0:
            raise ConfigError("resolution, point_spacing and sensor_range must be positive")


def layout(kind: str, p: SceneParams) -> np.ndarray:
    """Road rectangles as rows ``(xmin, ymin, xmax, ymax)``."""
    W, L = p.road_width, p.arm_length
    if kind == "straight":
        return np.array([[0.0, 0.0, 2 * L, W]])
    if kind == "l-corner":
        return np.array([[0.0, 0.0, L, W], [L - W, 0.0, L, L]])
    if kind == "t-intersection":
        return np.array([[0.0, 0.0, L, W], [L - W, W / 2 - L, L, W / 2 + L]])
    raise ConfigError(f"unknown scene kind {kind!r}; expected one of {KINDS}")


def default_sensor(p: SceneParams) -> tuple:
    return (1.5, p.road_width / 2)


def in_layout(rects: np.ndarray, xy: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0:1], xy[:, 1:2]
    return np.any((x >= rects[:, 0]) & (x <= rects[:, 2])
                  & (y >= rects[:, 1]) & (y <= rects[:, 3]), axis=1)


def visible(rects: np.ndarray, sensor, xy: np.ndarray, max_range: float) -> np.ndarray:
    """Exact test that each sensor->point segment lies inside the rectangle union.

    Each rectangle clips the segment to a parameter interval (Liang-Barsky);
    the point is visible when the union of those intervals covers [0, 1].
    """
    s = np.asarray(sensor, dtype=np.float64)
    d = xy - s
    n = len(xy)
    lo = np.zeros((n, len(rects)))
    hi = np.ones((n, len(rects)))
    for r, (x0, y0, x1, y1) in enumerate(rects):
        t0 = np.zeros(n)
        t1 = np.ones(n)
        for axis, (a, b) in enumerate(((x0, x1), (y0, y1))):
            da = d[:, axis]
            sa = s[axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (a - sa) / da
                tb = (b - sa) / da
            still = da == 0
            outside = still & ((sa < a) | (sa > b))
            tmin = np.where(still, -np.inf, np.minimum(ta, tb))
            tmax = np.where(still, np.inf, np.maximum(ta, tb))
            t0 = np.maximum(t0, tmin)
            t1 = np.minimum(t1, np.where(outside, -np.inf, tmax))
        lo[:, r] = t0
        hi[:, r] = t1
    # sweep intervals in order of start; coverage must be gap-free from 0 to 1
    order = np.argsort(lo, axis=1)
    lo = np.take_along_axis(lo, order, axis=1)
    hi = np.take_along_axis(hi, order, axis=1)
    reach = np.zeros(n)
    ok = np.ones(n, dtype=bool)
    for r in range(len(rects)):
        valid = hi[:, r] >= lo[:, r]
        gap = valid & (lo[:, r] > reach + 1e-12)
        ok &= ~(gap & (reach < 1.0))
        reach = np.where(valid, np.maximum(reach, hi[:, r]), reach)
    ok &= reach >= 1.0 - 1e-12
    return ok & (np.hypot(d[:, 0], d[:, 1]) <= max_range)


def _grid(rects: np.ndarray, p: SceneParams):
    res = p.resolution
    pad = 2 * res
    lo = rects[:, :2].min(axis=0) - pad
    hi = rects[:, 2:].max(axis=0) + pad
    nx = int(np.ceil((hi[0] - lo[0]) / res))
    ny = int(np.ceil((hi[1] - lo[1]) / res))
    nz = 3
    geom = VoxelGeometry((nx, ny, nz), (lo[0], lo[1], -res / 2), res)
    cx = lo[0] + (np.arange(nx) + 0.5) * res
    cy = lo[1] + (np.arange(ny) + 0.5) * res
    X, Y = np.meshgrid(cx, cy, indexing="ij")
    road = in_layout(rects, np.stack([X.ravel(), Y.ravel()], axis=1)).reshape(nx, ny)
    wall = ndimage.binary_dilation(road, structure=np.ones((3, 3), dtype=bool)) & ~road
    occ = np.zeros((nx, ny, nz), dtype=bool)
    lab = np.zeros((nx, ny, nz), dtype=np.uint32)
    occ[:, :, 0] = road
    lab[:, :, 0][road] = ROAD_LABEL
    occ[wall, :] = True
    lab[wall, :] = BUILDING_LABEL
    return VoxelGrid.from_dense(geom, occ, lab)


def synth_scene(kind: str, params: SceneParams = SceneParams(), seed: int = 0):
    """Return ``(scan, grid)``: a labeled partial scan and the full labeled grid."""
    params.validate()
    rects = layout(kind, params)
    rng = np.random.default_rng(seed)
    sensor = params.sensor_xy or default_sensor(params)
    if not in_layout(rects, np.asarray([sensor], dtype=np.float64))[0]:
        raise ConfigError("sensor must stand on the road")

    s = params.point_spacing
    xmin, ymin = rects[:, :2].min(axis=0)
    xmax, ymax = rects[:, 2:].max(axis=0)
    gx, gy = np.meshgrid(np.arange(xmin + s / 2, xmax, s),
                         np.arange(ymin + s / 2, ymax, s), indexing="ij")
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    xy = xy + rng.uniform(-s / 4, s / 4, size=xy.shape)
    xy = xy[in_layout(rects, xy)]
    xy = xy[visible(rects, sensor, xy, params.sensor_range)]
    road = np.column_stack([xy, rng.normal(0.0, params.noise, len(xy))])

    # building faces along the road edge, pulled slightly onto the road so the
    # visibility test sees them
    edge = []
    for x0, y0, x1, y1 in rects:
        for t in np.arange(x0 + s / 2, x1, s):
            edge += [(t, y0 + 1e-3), (t, y1 - 1e-3)]
        for t in np.arange(y0 + s / 2, y1, s):
            edge += [(x0 + 1e-3, t), (x1 - 1e-3, t)]
    edge = np.asarray(edge)
    # faces shared by two rectangles are open road, not walls
    probe_out = [edge + off for off in ((2e-3, 0), (-2e-3, 0), (0, 2e-3), (0, -2e-3))]
    on_boundary = np.zeros(len(edge), dtype=bool)
    for q in probe_out:
        on_boundary |= ~in_layout(rects, q)
    edge = edge[on_boundary]
    edge = edge[visible(rects, sensor, edge, params.sensor_range)]
    heights = np.arange(0.5, params.wall_height + 1e-9, 0.5)
    walls = np.array([(x, y, z) for x, y in edge for z in heights]).reshape(-1, 3)

    pts = np.concatenate([road, walls])
    labels = np.concatenate([np.full(len(road), ROAD_LABEL),
                             np.full(len(walls), BUILDING_LABEL)])
    return PointCloud(pts, labels), _grid(rects, params)


def default_params(kind: str) -> SceneParams:
    """Per-kind defaults; the straight road needs a short sensor range to hide anything."""
    if kind == "straight":
        return SceneParams(sensor_range=SceneParams().arm_length)
    layout(kind, SceneParams())
    return SceneParams()
