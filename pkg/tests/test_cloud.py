import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from terrex.cloud import (
    Aabb,
    PointCloud,
    VoxelGeometry,
    VoxelGrid,
    crop,
    filter_by_label,
    read_kitti_labels,
    read_kitti_velodyne,
    read_kitti_voxels,
    read_native_cloud,
    read_ply_count,
    voxel_centroids,
    write_kitti_voxels,
    write_native_cloud,
    write_ply,
)
from terrex.errors import ConfigError, FormatError, LengthError, ValidationError

finite32 = st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False)


def test_empty_cloud_is_header_only(tmp_path):
    p = tmp_path / "e.tepc"
    write_native_cloud(PointCloud.empty(), p)
    assert p.stat().st_size == 12
    assert p.read_bytes()[:8] == b"TEPC\x01\x00\x00\x00"
    assert len(read_native_cloud(p)) == 0


def test_single_point_size(tmp_path):
    p = tmp_path / "one.tepc"
    write_native_cloud(PointCloud([[1, 2, 3]]), p)
    assert p.stat().st_size == 24


def test_labels_set_flag_and_append_block(tmp_path):
    p = tmp_path / "lab.tepc"
    c = PointCloud(np.zeros((3, 3)), [40, 44, 40])
    write_native_cloud(c, p)
    raw = p.read_bytes()
    assert raw[5] == 1
    assert len(raw) == 12 + 36 + 12
    assert read_native_cloud(p) == c


def test_random_round_trip_bit_exact(tmp_path, rng):
    c = PointCloud(rng.normal(size=(100, 3)) * 50)
    p = tmp_path / "r.tepc"
    write_native_cloud(c, p)
    back = read_native_cloud(p)
    assert back.points.tobytes() == c.points.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 40), st.just(3)), elements=finite32),
       st.booleans())
def test_round_trip_property(tmp_path_factory, pts, labeled):
    labels = np.arange(len(pts)) * 7 if labeled else None
    c = PointCloud(pts, labels)
    p = tmp_path_factory.mktemp("rt") / "c.tepc"
    write_native_cloud(c, p)
    assert read_native_cloud(p) == c


def test_truncated_payload_is_length_error(tmp_path):
    p = tmp_path / "t.tepc"
    p.write_bytes(struct.pack("<4sBBHI", b"TEPC", 1, 0, 0, 5) + b"\0" * 48)
    with pytest.raises(LengthError):
        read_native_cloud(p)


@pytest.mark.parametrize("header", [
    struct.pack("<4sBBHI", b"XEPC", 1, 0, 0, 0),
    struct.pack("<4sBBHI", b"TEPC", 2, 0, 0, 0),
    b"TEP",
])
def test_bad_header_is_format_error(tmp_path, header):
    p = tmp_path / "b.tepc"
    p.write_bytes(header)
    with pytest.raises(FormatError):
        read_native_cloud(p)


def test_nan_rejected_everywhere(tmp_path):
    with pytest.raises(ValidationError):
        PointCloud([[0, np.nan, 0]])
    p = tmp_path / "nan.tepc"
    p.write_bytes(struct.pack("<4sBBHI", b"TEPC", 1, 0, 0, 1)
                  + np.array([0, np.nan, 0], "<f4").tobytes())
    with pytest.raises(ValidationError):
        read_native_cloud(p)
    v = tmp_path / "nan.bin"
    v.write_bytes(np.array([np.nan, 0, 0, 0], "<f4").tobytes())
    with pytest.raises(ValidationError):
        read_kitti_velodyne(v)


def test_cloud_is_immutable():
    c = PointCloud([[1, 2, 3]])
    with pytest.raises(ValueError):
        c.points[0, 0] = 5
    with pytest.raises(AttributeError):
        c.points = None


# ---------------------------------------------------------------- KITTI


def test_velodyne_two_records(tmp_path):
    p = tmp_path / "v.bin"
    p.write_bytes(np.array([1, 2, 3, 0.5, 4, 5, 6, 0.1], "<f4").tobytes())
    c = read_kitti_velodyne(p)
    assert c.points.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_velodyne_empty_and_bad_size(tmp_path):
    p = tmp_path / "v.bin"
    p.write_bytes(b"")
    assert len(read_kitti_velodyne(p)) == 0
    p.write_bytes(b"\0" * 17)
    with pytest.raises(FormatError):
        read_kitti_velodyne(p)


@pytest.mark.parametrize("n", [0, 1, 5, 33])
def test_velodyne_count_is_size_over_16(tmp_path, n):
    p = tmp_path / "v.bin"
    p.write_bytes(np.ones(4 * n, "<f4").tobytes())
    assert len(read_kitti_velodyne(p)) == p.stat().st_size // 16


def test_labels_mask_instance_bits(tmp_path):
    cloud = PointCloud(np.zeros((2, 3)))
    p = tmp_path / "l.label"
    p.write_bytes(np.array([0x00000028, 0x00050028], "<u4").tobytes())
    assert read_kitti_labels(p, cloud).labels.tolist() == [40, 40]


def test_labels_length_mismatch(tmp_path):
    p = tmp_path / "l.label"
    p.write_bytes(np.zeros(3, "<u4").tobytes())
    with pytest.raises(LengthError):
        read_kitti_labels(p, PointCloud(np.zeros((4, 3))))


SMALL = VoxelGeometry((4, 5, 6), (0.0, 0.0, 0.0), 0.2)


def test_voxels_all_zero(tmp_path):
    p = tmp_path / "v.bin"
    p.write_bytes(b"\0" * 15)
    assert read_kitti_voxels(p, geometry=SMALL).count() == 0


def test_voxels_msb_first(tmp_path):
    p = tmp_path / "v.bin"
    p.write_bytes(b"\x80" + b"\0" * 14)
    g = read_kitti_voxels(p, geometry=SMALL)
    assert g.count() == 1 and g.occupancy[0]


def test_voxels_x_major_linearisation(tmp_path):
    # voxel (1, 2, 3) -> 1*5*6 + 2*6 + 3 = 45 -> byte 5, bit 0x80 >> 5
    raw = bytearray(15)
    raw[5] = 0x80 >> 5
    p = tmp_path / "v.bin"
    p.write_bytes(bytes(raw))
    c = voxel_centroids(read_kitti_voxels(p, geometry=SMALL))
    np.testing.assert_array_equal(c.points, np.float32([[0.3, 0.5, 0.7]]))


def test_voxels_wrong_size(tmp_path):
    p = tmp_path / "v.bin"
    p.write_bytes(b"\0" * 14)
    with pytest.raises(FormatError):
        read_kitti_voxels(p, geometry=SMALL)
    p.write_bytes(b"\0" * 15)
    lab = tmp_path / "v.label"
    lab.write_bytes(b"\0" * 10)
    with pytest.raises(FormatError):
        read_kitti_voxels(p, lab, SMALL)


def test_voxel_write_read_round_trip(tmp_path, rng):
    occ = rng.random(SMALL.size) < 0.3
    lab = rng.integers(0, 60, SMALL.size)
    g = VoxelGrid(SMALL, occ, lab)
    write_kitti_voxels(g, tmp_path / "g.bin", tmp_path / "g.label")
    back = read_kitti_voxels(tmp_path / "g.bin", tmp_path / "g.label", SMALL)
    assert np.array_equal(back.occupancy, g.occupancy)
    assert np.array_equal(back.labels, g.labels)


def test_centroid_formula():
    geo = VoxelGeometry((2, 2, 2), (0, 0, 0), 0.2)
    occ = np.zeros(8, bool)
    occ[0] = True
    c = voxel_centroids(VoxelGrid(geo, occ))
    np.testing.assert_array_equal(c.points, np.float32([[0.1, 0.1, 0.1]]))


def test_centroids_empty_grid():
    geo = VoxelGeometry((2, 2, 2), (0, 0, 0), 0.2)
    assert len(voxel_centroids(VoxelGrid(geo, np.zeros(8, bool)))) == 0


def test_centroids_label_filter_by_hand():
    geo = VoxelGeometry((2, 1, 1), (0, 0, 0), 1.0)
    g = VoxelGrid(geo, [True, True], [40, 50])
    c = voxel_centroids(g, {40})
    assert c.points.tolist() == [[0.5, 0.5, 0.5]]
    assert c.labels.tolist() == [40]


def test_centroids_filter_needs_labels():
    geo = VoxelGeometry((1, 1, 1), (0, 0, 0), 1.0)
    with pytest.raises(ConfigError):
        voxel_centroids(VoxelGrid(geo, [True]), {40})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.sampled_from([40, 44, 48])), min_size=24, max_size=24),
       st.sets(st.sampled_from([40, 44, 48])))
def test_centroid_count_is_popcount(cells, wanted):
    geo = VoxelGeometry((2, 3, 4), (0, 0, 0), 0.5)
    occ = [o for o, _ in cells]
    lab = [lab for _, lab in cells]
    g = VoxelGrid(geo, occ, lab)
    expected = sum(1 for o, lab in cells if o and lab in wanted)
    assert len(voxel_centroids(g, wanted)) == expected


# ----------------------------------------------------------- filter / crop


def test_filter_by_label():
    c = PointCloud(np.arange(9).reshape(3, 3), [40, 44, 40])
    assert filter_by_label(c, {40}).points.tolist() == [[0, 1, 2], [6, 7, 8]]
    assert len(filter_by_label(c, set())) == 0
    assert len(filter_by_label(c, {99})) == 0
    with pytest.raises(ConfigError):
        filter_by_label(PointCloud(np.zeros((1, 3))), {40})


UNIT = Aabb((0, 0, 0), (1, 1, 1))


@pytest.mark.parametrize("pt,kept", [((0.5, 0.5, 0.5), True), ((1.5, 0, 0), False),
                                     ((1, 1, 1), True), ((0, 0, 0), True)])
def test_crop_closed_box(pt, kept):
    assert len(crop(PointCloud([pt]), UNIT)) == int(kept)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 30), st.just(3)),
              elements=st.floats(-2, 3, width=32)))
def test_crop_idempotent(pts):
    c = PointCloud(pts)
    once = crop(c, UNIT)
    assert crop(once, UNIT) == once


def test_aabb_rejects_inverted():
    with pytest.raises(ConfigError):
        Aabb((1, 0, 0), (0, 1, 1))


def test_ply_counts_and_colors(tmp_path):
    a = PointCloud(np.zeros((3, 3)))
    b = PointCloud(np.ones((2, 3)))
    p = tmp_path / "x.ply"
    assert write_ply(p, [(a, (0, 0, 255)), (b, (0, 255, 0))]) == 5
    lines = p.read_text().splitlines()
    assert read_ply_count(p) == 5
    assert "property uchar red" in lines
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == 5
    assert body[0].endswith("0 0 255") and body[-1].endswith("0 255 0")
