"""Training-sample construction: road isolation, buffered target set, BEV masks.

A sample pairs the road points the sensor saw (X) with the ground-truth road
points it could not see (Y). Y is the ground truth minus everything within
``d_y`` of X. Masks are pixel-space polygons in a bird's-eye view; they come
from an external segmenter when available, otherwise from grid clustering.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from terrex.cloud import (
    ROAD_LABEL,
    Aabb,
    PointCloud,
    VoxelGeometry,
    VoxelGrid,
    crop,
    filter_by_label,
    read_native_cloud,
    voxel_centroids,
    write_native_cloud,
)
from terrex.errors import ConfigError, FormatError, SampleRejected
from terrex.sampling import KdIndex

SAMPLE_VERSION = 1
MASK_SOURCES = ("auto", "precomputed", "fallback")

# pixel-space tolerance for "on the polygon boundary"
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class BevProjection:
    origin_xy: tuple
    meters_per_pixel: float
    width: int
    height: int

    def __post_init__(self):
        if not self.meters_per_pixel > 0:
            raise ConfigError("meters_per_pixel must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("BEV image must be at least 1x1 pixels")
        object.__setattr__(self, "origin_xy", tuple(float(v) for v in self.origin_xy))
        object.__setattr__(self, "meters_per_pixel", float(self.meters_per_pixel))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def to_pixel(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, np.shape(pts)[-1])
        ox, oy = self.origin_xy
        return np.stack([(pts[:, 0] - ox) / self.meters_per_pixel,
                         (pts[:, 1] - oy) / self.meters_per_pixel], axis=1)

    @classmethod
    def covering(cls, lo_xy, hi_xy, mpp: float = 0.1) -> "BevProjection":
        w = max(1, math.ceil((hi_xy[0] - lo_xy[0]) / mpp))
        h = max(1, math.ceil((hi_xy[1] - lo_xy[1]) / mpp))
        return cls((float(lo_xy[0]), float(lo_xy[1])), mpp, w, h)


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class BevMaskSet:
    projection: BevProjection
    polygons: tuple = ()

    def __post_init__(self):
        polys = []
        for p in self.polygons:
            arr = np.array(p, dtype=np.float64).reshape(-1, 2)
            if len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
                arr = arr[:-1]
            if len(arr) < 3:
                raise ConfigError("mask polygon needs at least 3 vertices")
            if _polygon_area(arr) == 0.0:
                raise ConfigError("mask polygon has zero area")
            arr.flags.writeable = False
            polys.append(arr)
        object.__setattr__(self, "polygons", tuple(polys))

    def __eq__(self, other):
        if not isinstance(other, BevMaskSet):
            return NotImplemented
        return (self.projection == other.projection
                and len(self.polygons) == len(other.polygons)
                and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                        for a, b in zip(self.polygons, other.polygons)))

    __hash__ = None

    def contains(self, pts) -> np.ndarray:
        return points_in_masks(self, pts)


def _in_polygon(uv: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd test with the boundary counted as inside."""
    u, v = uv[:, 0], uv[:, 1]
    inside = np.zeros(len(uv), dtype=bool)
    on_edge = np.zeros(len(uv), dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(poly, nxt):
        cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1)
        seg = math.hypot(x2 - x1, y2 - y1)
        on_edge |= ((np.abs(cross) <= _EDGE_EPS * max(seg, 1.0))
                    & (u >= min(x1, x2) - _EDGE_EPS) & (u <= max(x1, x2) + _EDGE_EPS)
                    & (v >= min(y1, y2) - _EDGE_EPS) & (v <= max(y1, y2) + _EDGE_EPS))
        if y1 == y2:
            continue
        straddle = (y1 > v) != (y2 > v)
        xint = x1 + (x2 - x1) * (v - y1) / (y2 - y1)
        inside ^= straddle & (u < xint)
    return inside | on_edge


def points_in_masks(masks: BevMaskSet, pts) -> np.ndarray:
    """Vectorised mask membership for an ``(n, 2|3)`` array; z is ignored."""
    uv = masks.projection.to_pixel(pts)
    hit = np.zeros(len(uv), dtype=bool)
    for poly in masks.polygons:
        hit |= _in_polygon(uv, poly)
    return hit


def point_in_masks(masks: BevMaskSet, p) -> bool:
    return bool(points_in_masks(masks, np.asarray(p, dtype=np.float64)[None, :])[0])


# -------------------------------------------------------------- fallback masks


def _trace_loops(region: np.ndarray) -> list:
    """Boundary loops of a boolean (x, y) raster, in cell-corner coordinates.

    Edges are oriented counter-clockwise around the region. At a corner where
    two cells touch only diagonally the rightmost turn is taken, so a
    diagonally joined region becomes one loop.
    """
    pad = np.pad(region, 1)
    out = {}
    xs, ys = np.nonzero(region)
    for i, j in zip((xs + 1).tolist(), (ys + 1).tolist()):
        ci, cj = i - 1, j - 1
        if not pad[i, j - 1]:
            out.setdefault((ci, cj), []).append((ci + 1, cj))
        if not pad[i + 1, j]:
            out.setdefault((ci + 1, cj), []).append((ci + 1, cj + 1))
        if not pad[i, j + 1]:
            out.setdefault((ci + 1, cj + 1), []).append((ci, cj + 1))
        if not pad[i - 1, j]:
            out.setdefault((ci, cj + 1), []).append((ci, cj))

    loops = []
    while out:
        start = min(out)
        loop = [start]
        prev = start
        cur = out[start].pop()
        if not out[start]:
            del out[start]
        while cur != start:
            loop.append(cur)
            choices = out[cur]
            if len(choices) == 1:
                nxt = choices.pop()
            else:
                din = (cur[0] - prev[0], cur[1] - prev[1])

                def turn(c):
                    dout = (c[0] - cur[0], c[1] - cur[1])
                    return din[0] * dout[1] - din[1] * dout[0]  # <0 right turn

                nxt = min(choices, key=turn)
                choices.remove(nxt)
            if not choices:
                del out[cur]
            prev, cur = cur, nxt
        loops.append(_drop_collinear(loop))
    return loops


def _drop_collinear(loop: list) -> list:
    keep = []
    n = len(loop)
    for k in range(n):
        a, b, c = loop[k - 1], loop[k], loop[(k + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    return keep


def fallback_cluster_masks(Y: PointCloud, cell: float,
                           projection: BevProjection) -> BevMaskSet:
    """Rasterise Y, take 8-connected components, dilate one cell, outline each."""
    if len(Y) == 0:
        raise ConfigError("cannot cluster an empty target cloud")
    if not cell > 0:
        raise ConfigError("cluster cell size must be positive")
    ox, oy = projection.origin_xy
    pts = Y.as_float64()
    gi = np.floor((pts[:, 0] - ox) / cell).astype(np.int64)
    gj = np.floor((pts[:, 1] - oy) / cell).astype(np.int64)
    # two cells of margin: one for dilation, one so traced loops stay interior
    i0, j0 = gi.min() - 2, gj.min() - 2
    raster = np.zeros((gi.max() - i0 + 3, gj.max() - j0 + 3), dtype=bool)
    raster[gi - i0, gj - j0] = True

    eight = np.ones((3, 3), dtype=bool)
    comp, n = ndimage.label(raster, structure=eight)
    scale = cell / projection.meters_per_pixel
    polygons = []
    for c in range(1, n + 1):
        region = ndimage.binary_dilation(comp == c, structure=eight)
        region = ndimage.binary_fill_holes(region)
        for loop in _trace_loops(region):
            poly = [((a + i0) * scale, (b + j0) * scale) for a, b in loop]
            polygons.append(poly)
    return BevMaskSet(projection, tuple(polygons))


# -------------------------------------------------------------------- samples


@dataclass(frozen=True)
class DatasetConfig:
    d_y: float = 1.0
    road_labels: tuple = (ROAD_LABEL,)
    crop: Optional[Aabb] = None
    mask_source: str = "auto"
    cluster_cell: float = 0.5
    bev_mpp: float = 0.1
    planar_buffer: bool = False
    geometry: VoxelGeometry = field(default_factory=VoxelGeometry)

    def __post_init__(self):
        if not self.d_y >= 0:
            raise ConfigError("d_y must be non-negative")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")
        if not self.cluster_cell > 0 or not self.bev_mpp > 0:
            raise ConfigError("cluster_cell and bev_mpp must be positive")
        object.__setattr__(self, "road_labels", tuple(int(v) for v in self.road_labels))


@dataclass(frozen=True, eq=False)
class TrainingSample:
    input_cloud: PointCloud
    target_cloud: PointCloud
    masks: BevMaskSet
    d_y: float
    seed: int = 0
    source_id: str = ""

    def __eq__(self, other):
        if not isinstance(other, TrainingSample):
            return NotImplemented
        return (self.input_cloud == other.input_cloud
                and self.target_cloud == other.target_cloud
                and self.masks == other.masks
                and self.d_y == other.d_y
                and self.seed == other.seed
                and self.source_id == other.source_id)

    __hash__ = None


def buffered_difference(G: PointCloud, X: PointCloud, d_y: float,
                        planar: bool = False) -> PointCloud:
    """Points of G at distance >= d_y from every point of X.

    Points coinciding with some x are always dropped, so X and the result are
    disjoint even when ``d_y == 0``. With ``planar`` distances ignore z.
    """
    if d_y < 0:
        raise ConfigError("d_y must be non-negative")
    if len(X) == 0 or len(G) == 0:
        return G
    g = G.as_float64()
    x = X.as_float64()
    if planar:
        g = g.copy()
        x = x.copy()
        g[:, 2] = 0.0
        x[:, 2] = 0.0
    dist = KdIndex(PointCloud(x)).nearest_distances(g)
    return G.select((dist >= d_y) & (dist > 0.0))


def default_projection(box_lo, box_hi, mpp: float) -> BevProjection:
    return BevProjection.covering(box_lo[:2], box_hi[:2], mpp)


def build_sample_from_gt(scan: PointCloud, G: PointCloud, cfg: DatasetConfig,
                         masks: Optional[BevMaskSet] = None, box: Optional[Aabb] = None,
                         seed: int = 0, source_id: str = "") -> TrainingSample:
    """Like :func:`build_sample` with the ground-truth road points already extracted."""
    if not scan.is_labeled:
        raise ConfigError("scan must carry semantic labels")
    X = filter_by_label(scan, cfg.road_labels)
    box = cfg.crop or box
    if box is not None:
        X = crop(X, box)
        G = crop(G, box)
    if len(X) == 0:
        raise SampleRejected(f"{source_id or 'scan'}: no road points in input")
    Y = buffered_difference(G, X, cfg.d_y, planar=cfg.planar_buffer)
    if len(Y) == 0:
        raise SampleRejected(f"{source_id or 'scan'}: empty target after buffering")
    if masks is None or cfg.mask_source == "fallback":
        if cfg.mask_source == "precomputed":
            raise FormatError(f"{source_id or 'scan'}: precomputed masks required")
        if box is not None:
            lo, hi = box.min, box.max
        else:
            both = np.concatenate([X.as_float64(), G.as_float64()])
            lo = both.min(axis=0) - 2 * cfg.cluster_cell
            hi = both.max(axis=0) + 2 * cfg.cluster_cell
        proj = default_projection(lo, hi, cfg.bev_mpp)
        masks = fallback_cluster_masks(Y, cfg.cluster_cell, proj)
    return TrainingSample(PointCloud(X.points), PointCloud(Y.points), masks,
                          float(cfg.d_y), int(seed), source_id)


def build_sample(scan: PointCloud, grid: VoxelGrid, cfg: DatasetConfig,
                 masks: Optional[BevMaskSet] = None, seed: int = 0,
                 source_id: str = "") -> TrainingSample:
    """Assemble X (road scan points), Y (buffered unseen road) and masks.

    Raises :class:`SampleRejected` when X or Y is empty; callers skip the scan.
    """
    if grid.labels is None:
        raise ConfigError("voxel grid must carry semantic labels")
    G = voxel_centroids(grid, cfg.road_labels)
    return build_sample_from_gt(scan, G, cfg, masks, box=grid.geometry.bounds(),
                                seed=seed, source_id=source_id)


# ------------------------------------------------------------------------ I/O


def masks_to_json(masks: BevMaskSet) -> dict:
    p = masks.projection
    return {
        "projection": {
            "origin_xy": list(p.origin_xy),
            "meters_per_pixel": p.meters_per_pixel,
            "width": p.width,
            "height": p.height,
        },
        "polygons": [poly.tolist() for poly in masks.polygons],
    }


def masks_from_json(doc: dict) -> BevMaskSet:
    try:
        p = doc["projection"]
        proj = BevProjection(tuple(p["origin_xy"]), p["meters_per_pixel"],
                             p["width"], p["height"])
        return BevMaskSet(proj, tuple(doc["polygons"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed masks document: {exc}") from exc


def write_masks(masks: BevMaskSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(masks_to_json(masks), fh)
        fh.write("\n")


def read_masks(path) -> BevMaskSet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"missing mask file {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return masks_from_json(doc)


SAMPLE_FILES = {"input": "input.tepc", "target": "target.tepc", "masks": "masks.json"}


def write_sample(sample: TrainingSample, path) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": SAMPLE_VERSION,
        "d_y": sample.d_y,
        "seed": sample.seed,
        "source_id": sample.source_id,
        "files": dict(SAMPLE_FILES),
    }
    write_native_cloud(sample.input_cloud, os.path.join(path, SAMPLE_FILES["input"]))
    write_native_cloud(sample.target_cloud, os.path.join(path, SAMPLE_FILES["target"]))
    write_masks(sample.masks, os.path.join(path, SAMPLE_FILES["masks"]))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sample(path) -> TrainingSample:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: no manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: {exc}") from exc
    if manifest.get("version") != SAMPLE_VERSION:
        raise FormatError(f"{mpath}: unsupported sample version {manifest.get('version')!r}")
    try:
        files = manifest["files"]
        parts = {k: os.path.join(path, files[k]) for k in SAMPLE_FILES}
        d_y, seed, source_id = manifest["d_y"], manifest["seed"], manifest["source_id"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: missing field {exc}") from exc
    for k, p in parts.items():
        if not os.path.isfile(p):
            raise FormatError(f"{path}: missing {k} file {files[k]}")
    return TrainingSample(read_native_cloud(parts["input"]),
                          read_native_cloud(parts["target"]),
                          read_masks(parts["masks"]), float(d_y), int(seed),
                          str(source_id))


def list_sample_dirs(root) -> list:
    """Sample directories directly under ``root`` (or ``root`` itself), sorted."""
    if os.path.isfile(os.path.join(root, "manifest.json")):
        return [root]
    return sorted(os.path.join(root, d) for d in os.listdir(root)
                  if os.path.isfile(os.path.join(root, d, "manifest.json")))


def read_samples(paths: Sequence) -> list:
    return [read_sample(p) for p in paths]
