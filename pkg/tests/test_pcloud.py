import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnetpc.pcloud import (
    PlyError,
    RawPointCloud,
    SparseTensor,
    format_ply,
    lex_keys,
    load_ply,
    parse_ply,
    raster_coords,
    raster_index,
    to_global,
    to_local,
    voxelize,
    write_ply,
)

ASCII3 = b"""ply
format ascii 1.0
comment three points
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
0 0 0 10 20 30
1.5 2.25 3 255 0 7
4 5 6 1 2 3
"""


def binary_ply(rows, endian="<"):
    fmt = "binary_little_endian" if endian == "<" else "binary_big_endian"
    head = (f"ply\nformat {fmt} 1.0\nelement vertex {len(rows)}\nproperty float x\n"
            "property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
            "property uchar blue\nend_header\n").encode()
    return head + b"".join(struct.pack(endian + "fffBBB", *r) for r in rows)


ROWS = [(0, 0, 0, 10, 20, 30), (1.5, 2.25, 3, 255, 0, 7), (4, 5, 6, 1, 2, 3)]


class TestPlyParsing:
    def test_ascii_three_points(self):
        pc = parse_ply(ASCII3)
        assert len(pc) == 3 and pc.has_color
        assert pc.xyz[1].tolist() == [1.5, 2.25, 3.0]
        assert pc.colors[1].tolist() == [255, 0, 7]

    @pytest.mark.parametrize("endian", ["<", ">"])
    def test_binary_matches_ascii(self, endian):
        a = parse_ply(ASCII3)
        b = parse_ply(binary_ply(ROWS, endian))
        np.testing.assert_array_equal(a.xyz, b.xyz)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_empty_vertex_element(self):
        pc = parse_ply(b"ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\n"
                       b"property float y\nproperty float z\nend_header\n")
        assert len(pc) == 0 and not pc.has_color

    def test_geometry_only(self):
        pc = parse_ply(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\n"
                       b"property int y\nproperty int z\nend_header\n1 2 3\n")
        assert not pc.has_color and pc.xyz.tolist() == [[1, 2, 3]]

    def test_trailing_face_element_is_ignored(self):
        data = ASCII3.replace(b"end_header", b"element face 1\nproperty list uchar int vertex_indices\nend_header")
        data += b"3 0 1 2\n"
        assert len(parse_ply(data)) == 3

    @pytest.mark.parametrize("data,fragment", [
        (b"plx\n", "magic"),
        (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n", "end_header"),
        (b"ply\nformat weird 1.0\nend_header\n", "format"),
        (ASCII3.replace(b"4 5 6 1 2 3\n", b""), "truncated"),
        (ASCII3.replace(b"255 0 7", b"256 0 7"), "uchar"),
        (ASCII3.replace(b"uchar red", b"float red"), "uchar"),
        (binary_ply(ROWS)[:-4], "truncated"),
        (ASCII3.replace(b"property float z\n", b""), "lacks"),
    ])
    def test_malformed(self, data, fragment):
        with pytest.raises(PlyError, match=fragment):
            parse_ply(data)

    def test_error_carries_offset(self):
        with pytest.raises(PlyError) as info:
            parse_ply(binary_ply(ROWS)[:-4])
        assert info.value.offset > 0

    def test_write_then_load(self, tmp_path, rng):
        coords = np.unique(rng.integers(0, 50, (40, 3)), axis=0)
        coords = coords[np.argsort(lex_keys(coords))]
        cloud = SparseTensor(coords, rng.integers(0, 256, (len(coords), 3)), (8, 8, 8), (5, -3, 2))
        for binary in (False, True):
            path = tmp_path / f"c{binary}.ply"
            write_ply(path, cloud, binary=binary)
            back = load_ply(path)
            np.testing.assert_array_equal(back.xyz, coords + (5, -3, 2))
            np.testing.assert_array_equal(back.colors, cloud.features)


class TestVoxelize:
    def test_single_point(self):
        st_ = voxelize(RawPointCloud(np.zeros((1, 3)), np.array([[10, 20, 30]], np.uint8)), 10)
        assert st_.coords.tolist() == [[0, 0, 0]] and st_.features.tolist() == [[10, 20, 30]]

    def test_coincident_points_mean_rounds_half_up(self):
        pc = RawPointCloud(np.array([[3.2, 1, 1], [3.9, 1.5, 1.1]]),
                           np.array([[10, 10, 10], [11, 11, 11]], np.uint8))
        st_ = voxelize(pc, 4)
        assert st_.coords.tolist() == [[3, 1, 1]] and st_.features.tolist() == [[11, 11, 11]]

    def test_mean_oracle_many_duplicates(self, rng):
        xyz = rng.integers(0, 4, (500, 3)).astype(float) + rng.random((500, 3)) * 0.99
        col = rng.integers(0, 256, (500, 3)).astype(np.uint8)
        st_ = voxelize(RawPointCloud(xyz, col), 3)
        vox = np.floor(xyz).astype(int)
        for c, f in zip(st_.coords, st_.features):
            sel = np.all(vox == c, axis=1)
            mean = col[sel].astype(float).mean(axis=0)
            assert f.tolist() == np.floor(mean + 0.5).astype(int).tolist()

    def test_sorted_output(self):
        xyz = np.array([[3, 0, 0], [0, 0, 2], [0, 1, 0], [0, 0, 1]], float)
        st_ = voxelize(RawPointCloud(xyz, np.zeros((4, 3), np.uint8)), 4)
        assert st_.coords.tolist() == [[0, 0, 1], [0, 0, 2], [0, 1, 0], [3, 0, 0]]
        st_.validate()

    def test_shift_records_offset(self):
        pc = RawPointCloud(np.array([[100.5, -7.2, 30.0], [101.0, -6.0, 31.9]]), np.zeros((2, 3), np.uint8))
        st_ = voxelize(pc, 3, shift=True)
        assert st_.offset == (100, -8, 30)
        assert st_.coords.tolist() == [[0, 0, 0], [1, 2, 1]]

    def test_out_of_range_raises(self):
        with pytest.raises(IndexError):
            voxelize(RawPointCloud(np.array([[16.0, 0, 0]]), np.zeros((1, 3), np.uint8)), 4)
        with pytest.raises(IndexError):
            voxelize(RawPointCloud(np.array([[-0.5, 0, 0]]), np.zeros((1, 3), np.uint8)), 4)

    def test_geometry_only_cloud(self):
        st_ = voxelize(RawPointCloud(np.array([[1.0, 2, 3]]), np.zeros((1, 3), np.uint8), has_color=False), 3)
        assert st_.geometry_only and st_.features.shape == (1, 0)

    @given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31), st.integers(0, 31)), min_size=1, max_size=60))
    def test_revoxelizing_written_cloud_is_fixed_point(self, pts):
        xyz = np.array(pts, float)
        first = voxelize(RawPointCloud(xyz, np.full((len(xyz), 3), 9, np.uint8)), 5)
        again = voxelize(parse_ply(format_ply(first)), 5)
        assert again.equals(first)
        assert format_ply(again) == format_ply(first)


class TestRasterAndBlocks:
    def test_examples(self):
        assert raster_index((0, 0, 0), 4) == 0
        assert raster_index((0, 0, 3), 4) == 3
        assert raster_index((1, 2, 3), 4) == 27

    def test_nested_loop_enumeration(self):
        d = 4
        order = [(x, y, z) for x in range(d) for y in range(d) for z in range(d)]
        assert [raster_index(c, d) for c in order] == list(range(d ** 3))
        np.testing.assert_array_equal(raster_coords(np.arange(d ** 3), d), np.array(order))

    def test_out_of_block(self):
        with pytest.raises(IndexError):
            raster_index((4, 0, 0), 4)

    def test_to_global(self):
        assert to_global((64, 0, 0), (1, 2, 3), 64).tolist() == [65, 2, 3]
        assert to_global((0, 0, 0), (5, 6, 7), 64).tolist() == [5, 6, 7]
        with pytest.raises(IndexError):
            to_global((0, 0, 0), (64, 0, 0), 64)
        with pytest.raises(IndexError):
            to_global((1024, 0, 0), (0, 0, 0), 64, n=10)

    def test_local_global_roundtrip(self, rng):
        d = 64
        origins = rng.integers(0, 16, (1000, 3)) * d
        local = rng.integers(0, d, (1000, 3))
        g = to_global(origins, local, d)
        np.testing.assert_array_equal(to_local(origins, g, d), local)
