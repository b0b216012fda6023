"""Point cloud and voxel grid containers plus their on-disk formats.

Native cloud format ("TEPC", little-endian)::

    0..3   magic b"TEPC"
    4      version (1)
    5      flags, bit 0 = labels present
    6..7   reserved, zero
    8..11  uint32 point count N
    ...    N * 3 float32 coordinates (x, y, z interleaved)
    ...    N uint32 labels, only when flagged

KITTI-style inputs (velodyne scans, per-point labels, packed voxel grids)
are read but never written.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from terrex.errors import ConfigError, FormatError, LengthError, ValidationError

TEPC_MAGIC = b"TEPC"
TEPC_VERSION = 1
_HEADER = struct.Struct("<4sBBHI")

ROAD_LABEL = 40

# Display colours: blue input, green prediction, teal ground truth.
BLUE = (0, 0, 255)
GREEN = (0, 255, 0)
TEAL = (0, 128, 128)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class PointCloud:
    """Ordered set of 3D points stored as float32, with optional uint32 labels."""

    __slots__ = ("points", "labels")

    def __init__(self, points, labels=None):
        pts = np.array(points, dtype=np.float32).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValidationError("point cloud contains non-finite coordinates")
        lab = None
        if labels is not None:
            lab = np.array(labels, dtype=np.uint32).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise LengthError(
                    f"{lab.shape[0]} labels for {pts.shape[0]} points"
                )
            lab = _frozen(lab)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "labels", lab)

    def __setattr__(self, name, value):
        raise AttributeError("PointCloud is immutable")

    @classmethod
    def empty(cls, labeled: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0) if labeled else None)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.points.shape != other.points.shape:
            return False
        if self.points.tobytes() != other.points.tobytes():
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    __hash__ = None

    def __repr__(self) -> str:
        tag = ", labeled" if self.labels is not None else ""
        return f"PointCloud(n={len(self)}{tag})"

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def as_float64(self) -> np.ndarray:
        return self.points.astype(np.float64)

    def select(self, mask_or_index) -> "PointCloud":
        lab = None if self.labels is None else self.labels[mask_or_index]
        return PointCloud(self.points[mask_or_index], lab)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, labels)

    def concat(self, other: "PointCloud") -> "PointCloud":
        pts = np.concatenate([self.points, other.points])
        if self.labels is not None and other.labels is not None:
            return PointCloud(pts, np.concatenate([self.labels, other.labels]))
        return PointCloud(pts)


@dataclass(frozen=True)
class Aabb:
    min: tuple
    max: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ConfigError("Aabb corners must be 3-vectors")
        if any(a > b for a, b in zip(lo, hi)):
            raise ConfigError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        lo = np.asarray(self.min)
        hi = np.asarray(self.max)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass(frozen=True)
class VoxelGeometry:
    """Grid layout. Defaults follow the SemanticKITTI voxel convention."""

    dims: tuple = (256, 256, 32)
    origin: tuple = (0.0, -25.6, -2.0)
    resolution: float = 0.2

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigError(f"invalid voxel dims {self.dims}")
        if not self.resolution > 0:
            raise ConfigError("voxel resolution must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def bounds(self) -> Aabb:
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.dims) * self.resolution
        return Aabb(tuple(lo), tuple(hi))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    geometry: VoxelGeometry
    occupancy: np.ndarray
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool).reshape(-1)
        if occ.shape[0] != self.geometry.size:
            raise LengthError(
                f"occupancy has {occ.shape[0]} entries, dims need {self.geometry.size}"
            )
        object.__setattr__(self, "occupancy", _frozen(occ.copy()))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.uint32).reshape(-1)
            if lab.shape[0] != self.geometry.size:
                raise LengthError(
                    f"labels have {lab.shape[0]} entries, dims need {self.geometry.size}"
                )
            object.__setattr__(self, "labels", _frozen(lab.copy()))

    @classmethod
    def from_dense(cls, geometry: VoxelGeometry, occupancy, labels=None) -> "VoxelGrid":
        """Build from arrays shaped ``dims`` (x-major linearization)."""
        occ = np.asarray(occupancy, dtype=bool).reshape(geometry.dims)
        lab = None if labels is None else np.asarray(labels).reshape(geometry.dims)
        return cls(geometry, occ.ravel(order="C"),
                   None if lab is None else lab.ravel(order="C"))

    def count(self) -> int:
        return int(self.occupancy.sum())


# --------------------------------------------------------------------- native


def write_native_cloud(cloud: PointCloud, path) -> None:
    flags = 1 if cloud.labels is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TEPC_MAGIC, TEPC_VERSION, flags, 0, len(cloud)))
        fh.write(cloud.points.astype("<f4").tobytes())
        if flags:
            fh.write(cloud.labels.astype("<u4").tobytes())


def read_native_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_native_cloud(raw, name=str(path))


def decode_native_cloud(raw: bytes, name: str = "<bytes>") -> PointCloud:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{name}: too short for a TEPC header")
    magic, version, flags, reserved, n = _HEADER.unpack_from(raw)
    if magic != TEPC_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != TEPC_VERSION:
        raise FormatError(f"{name}: unsupported TEPC version {version}")
    if flags & ~1 or reserved:
        raise FormatError(f"{name}: reserved header bits set")
    labeled = bool(flags & 1)
    expected = _HEADER.size + 12 * n + (4 * n if labeled else 0)
    if len(raw) != expected:
        raise LengthError(f"{name}: header declares {n} points, "
                          f"expected {expected} bytes, got {len(raw)}")
    off = _HEADER.size
    pts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    labels = None
    if labeled:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 12 * n)
    return PointCloud(pts, labels)


# ---------------------------------------------------------------------- kitti


def read_kitti_velodyne(path) -> PointCloud:
    raw = open(path, "rb").read()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3])


def read_kitti_labels(path, cloud: PointCloud) -> PointCloud:
    raw = open(path, "rb").read()
    if len(raw) != 4 * len(cloud):
        raise LengthError(
            f"{path}: {len(raw)} bytes of labels for {len(cloud)} points"
        )
    codes = np.frombuffer(raw, dtype="<u4") & 0xFFFF
    return cloud.with_labels(codes)


def read_kitti_voxels(bin_path, label_path=None,
                      geometry: VoxelGeometry = VoxelGeometry()) -> VoxelGrid:
    n = geometry.size
    raw = open(bin_path, "rb").read()
    if len(raw) != (n + 7) // 8:
        raise FormatError(
            f"{bin_path}: {len(raw)} bytes, dims {geometry.dims} need {(n + 7) // 8}"
        )
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="big")[:n]
    labels = None
    if label_path is not None:
        lraw = open(label_path, "rb").read()
        if len(lraw) != 2 * n:
            raise FormatError(
                f"{label_path}: {len(lraw)} bytes, dims {geometry.dims} need {2 * n}"
            )
        labels = np.frombuffer(lraw, dtype="<u2")
    return VoxelGrid(geometry, bits.astype(bool), labels)


def write_kitti_voxels(grid: VoxelGrid, bin_path, label_path=None) -> None:
    """Inverse of :func:`read_kitti_voxels`; used to build fixtures."""
    with open(bin_path, "wb") as fh:
        fh.write(np.packbits(grid.occupancy, bitorder="big").tobytes())
    if label_path is not None:
        if grid.labels is None:
            raise ConfigError("grid has no labels to write")
        with open(label_path, "wb") as fh:
            fh.write(grid.labels.astype("<u2").tobytes())


def write_kitti_velodyne(cloud: PointCloud, path, label_path=None) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())
    if label_path is not None:
        with open(label_path, "wb") as fh:
            fh.write(cloud.labels.astype("<u4").tobytes())


# ----------------------------------------------------------------- operations


def voxel_centroids(grid: VoxelGrid, label_filter: Optional[Iterable[int]] = None) -> PointCloud:
    """One point per occupied voxel at its centre. Labels carried if present."""
    keep = grid.occupancy.copy()
    if label_filter is not None:
        if grid.labels is None:
            raise ConfigError("label filter requested on an unlabeled voxel grid")
        keep &= np.isin(grid.labels, np.fromiter(label_filter, dtype=np.int64))
    flat = np.flatnonzero(keep)
    idx = np.stack(np.unravel_index(flat, grid.geometry.dims), axis=1)
    pts = (np.asarray(grid.geometry.origin)
           + (idx + 0.5) * grid.geometry.resolution)
    labels = None if grid.labels is None else grid.labels[flat]
    return PointCloud(pts, labels)


def filter_by_label(cloud: PointCloud, labels: Iterable[int]) -> PointCloud:
    if cloud.labels is None:
        raise ConfigError("cannot filter an unlabeled cloud by label")
    wanted = np.fromiter(labels, dtype=np.int64)
    return cloud.select(np.isin(cloud.labels, wanted))


def crop(cloud: PointCloud, box: Aabb) -> PointCloud:
    """Closed-box crop: boundary points are kept."""
    return cloud.select(box.contains(cloud.points))


# ------------------------------------------------------------------------ ply


def write_ply(path, parts: Sequence[tuple]) -> int:
    """Write ASCII PLY from ``(cloud, (r, g, b))`` pairs; returns vertex count."""
    n = sum(len(c) for c, _ in parts)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for cloud, (r, g, b) in parts:
        for x, y, z in cloud.points.tolist():
            lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return n


def read_ply_count(path) -> int:
    with open(path) as fh:
        for line in fh:
            if line.startswith("element vertex"):
                return int(line.split()[2])
            if line.startswith("end_header"):
                break
    raise FormatError(f"{path}: no vertex element")


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
