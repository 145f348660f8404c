import io
import struct

import numpy as np
import pytest

from ldmap.grids import (BINARY, REAL, CoordinateField, VolumeFormatError,
                         VolumeGrid, load_volume, make_coordinate_field,
                         read_volume, save_volume, write_volume)


def roundtrip(grid):
    buf = io.BytesIO()
    write_volume(grid, buf)
    buf.seek(0)
    return read_volume(buf)


class TestVolumeGrid:
    def test_binary_validation(self):
        with pytest.raises(ValueError):
            VolumeGrid.binary(np.array([[0, 2]], dtype=np.uint8))

    def test_real_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            VolumeGrid.real(np.array([[np.nan, 0.0]], dtype=np.float32))

    def test_axis_count(self):
        with pytest.raises(ValueError):
            VolumeGrid.binary(np.zeros(4, dtype=np.uint8))
        with pytest.raises(ValueError):
            VolumeGrid.binary(np.zeros((2, 2, 2, 2), dtype=np.uint8))

    def test_data_is_read_only(self):
        g = VolumeGrid.binary(np.zeros((3, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            g.data[0, 0] = 1

    def test_equality_by_value(self):
        a = VolumeGrid.binary(np.eye(3, dtype=np.uint8))
        b = VolumeGrid.binary(np.eye(3, dtype=np.uint8))
        assert a == b


class TestCoordinateField:
    def test_three_point_axis(self):
        f = make_coordinate_field([3])
        assert np.allclose(f.channels[0], [-1.0, 0.0, 1.0])

    def test_two_by_two_channel0(self):
        f = make_coordinate_field([2, 2])
        assert np.allclose(f.channels[0], [[-1.0, -1.0], [1.0, 1.0]])

    def test_five_point_value(self):
        f = make_coordinate_field([5])
        assert f.channels[0][3] == pytest.approx(0.5)

    def test_degenerate_axis(self):
        with pytest.raises(ValueError):
            make_coordinate_field([1, 8])

    def test_channel_count_matches_axes(self):
        f = make_coordinate_field([4, 6, 8])
        assert f.channels.shape == (3, 4, 6, 8)

    def test_monotone_and_antisymmetric(self):
        for dims in [(7,), (4, 9), (3, 5, 8)]:
            f = make_coordinate_field(dims)
            for axis, n in enumerate(dims):
                ramp = np.moveaxis(f.channels[axis], axis, 0).reshape(n, -1)[:, 0]
                assert (np.diff(ramp) > 0).all()
                assert np.allclose(ramp + ramp[::-1], 0.0, atol=1e-6)
                assert ramp[0] == -1.0 and ramp[-1] == 1.0


class TestSerialization:
    def test_known_binary_layout(self):
        g = VolumeGrid.binary(np.array([[1, 0], [0, 1]], dtype=np.uint8))
        buf = io.BytesIO()
        n = write_volume(g, buf)
        blob = buf.getvalue()
        assert n == len(blob)
        expected = b"VOL1" + struct.pack("<B", 2) + struct.pack("<2I", 2, 2) \
            + struct.pack("<B", 0) + bytes([1, 0, 0, 1])
        assert blob == expected

    def test_known_real_payload(self):
        g = VolumeGrid.real(np.array([[0.5]], dtype=np.float32))
        buf = io.BytesIO()
        write_volume(g, buf)
        assert buf.getvalue()[-4:] == struct.pack("<f", 0.5)

    def test_roundtrip_random_binary(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            ndim = rng.integers(2, 4)
            dims = tuple(int(d) for d in rng.integers(1, 9, ndim))
            g = VolumeGrid.binary((rng.random(dims) < 0.5).astype(np.uint8))
            assert roundtrip(g) == g

    def test_roundtrip_random_real(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            ndim = rng.integers(2, 4)
            dims = tuple(int(d) for d in rng.integers(1, 9, ndim))
            g = VolumeGrid.real(rng.standard_normal(dims).astype(np.float32))
            assert roundtrip(g) == g

    def test_bad_magic(self):
        with pytest.raises(VolumeFormatError):
            read_volume(io.BytesIO(b"NOPE" + bytes(16)))

    def test_truncated_header(self):
        with pytest.raises(VolumeFormatError):
            read_volume(io.BytesIO(b"VOL1\x02\x02\x00"))

    def test_truncated_payload(self):
        g = VolumeGrid.binary(np.ones((4, 4), dtype=np.uint8))
        buf = io.BytesIO()
        write_volume(g, buf)
        clipped = buf.getvalue()[:-3]
        with pytest.raises(VolumeFormatError):
            read_volume(io.BytesIO(clipped))

    def test_bad_dtype_byte(self):
        blob = b"VOL1" + struct.pack("<B", 2) + struct.pack("<2I", 1, 1) \
            + struct.pack("<B", 7) + bytes([0])
        with pytest.raises(VolumeFormatError):
            read_volume(io.BytesIO(blob))

    def test_bad_binary_payload_value(self):
        blob = b"VOL1" + struct.pack("<B", 2) + struct.pack("<2I", 1, 2) \
            + struct.pack("<B", 0) + bytes([0, 3])
        with pytest.raises(VolumeFormatError):
            read_volume(io.BytesIO(blob))

    def test_file_helpers(self, tmp_path):
        g = VolumeGrid.real(np.arange(6, dtype=np.float32).reshape(2, 3))
        path = tmp_path / "x.vol"
        save_volume(g, path)
        assert load_volume(path) == g
