import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psrnet import grid
from psrnet.errors import DataError, FormatError, ShapeError


def loop_coarsen(frame, n):
    H, W = frame.shape[0] // n, frame.shape[1] // n
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            for u in range(n):
                for v in range(n):
                    out[i, j] += frame[i * n + u, j * n + v]
    return out


class TestCoarsen:
    def test_identity(self, rng):
        x = rng.random((3, 4, 4))
        np.testing.assert_array_equal(grid.coarsen(x, 1), x)

    def test_hand_example(self):
        assert grid.coarsen(np.array([[1.0, 2.0], [3.0, 4.0]]), 2).tolist() == [[10.0]]

    def test_matches_loop(self, rng):
        x = rng.random((6, 12))
        np.testing.assert_allclose(grid.coarsen(x, 3), loop_coarsen(x, 3), atol=1e-12)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            grid.coarsen(np.ones((5, 4)), 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
    def test_mass_conserved(self, n, H, W, seed):
        x = np.random.default_rng(seed).exponential(10.0, size=(3, n * H, n * W))
        np.testing.assert_allclose(grid.coarsen(x, n).sum(axis=(1, 2)), x.sum(axis=(1, 2)), rtol=1e-12)


class TestWindows:
    def test_exact_length(self, rng):
        assert len(grid.make_windows(rng.random((6, 4, 4)), 2, 6)) == 1

    def test_count(self, rng):
        assert len(grid.make_windows(rng.random((50, 2, 2)), 1, 48)) == 3

    def test_contents(self, rng):
        fine = rng.random((60, 4, 4))
        samples = grid.make_windows(grid.PopulationSeries(fine), 2, 5)
        s = samples[-1]
        assert s.slot == 59 and s.t_of_day == 59 % 48
        np.testing.assert_array_equal(s.fine_target[0], fine[59])
        np.testing.assert_allclose(s.coarse_seq, grid.coarsen(fine[55:60], 2))

    def test_too_short(self, rng):
        with pytest.raises(DataError):
            grid.make_windows(rng.random((3, 2, 2)), 1, 4)


class TestSplits:
    def test_source_sizes(self):
        split = grid.split_source(list(range(100)), seed=3)
        assert (len(split.train), len(split.val), len(split.test)) == (70, 15, 15)
        assert sorted(split.train + split.val + split.test) == list(range(100))

    def test_same_seed_same_split(self):
        assert grid.split_source(list(range(40)), 7) == grid.split_source(list(range(40)), 7)
        assert grid.split_source(list(range(40)), 7) != grid.split_source(list(range(40)), 8)

    def test_too_few(self):
        with pytest.raises(DataError):
            grid.split_source([0, 1], 0)

    def test_target(self, rng):
        fine = rng.random((400 + 3, 2, 2))
        samples = grid.make_windows(fine, 1, 4)
        assert len(samples) == 400
        ref, test = grid.split_target(samples)
        assert len(test) == 336 and test[0] == 64
        assert ref.slot_index == samples[64].slot
        np.testing.assert_array_equal(ref.values, samples[64].fine_target)

    def test_target_too_short(self, rng):
        with pytest.raises(DataError):
            grid.split_target(grid.make_windows(rng.random((100, 2, 2)), 1, 1))


class TestPgrd:
    def test_round_trip(self, rng, tmp_path):
        x = rng.normal(size=(3, 4, 5))
        meta = {"city": "a", "cell_meters": 500, "slot_minutes": 30, "categories": list(grid.POI_CATEGORIES)}
        grid.save_grid(tmp_path / "x.pgrd", x, meta)
        back, got_meta = grid.load_grid(tmp_path / "x.pgrd")
        assert back.tobytes() == x.tobytes() and back.shape == x.shape
        assert got_meta == meta

    def test_header_layout(self):
        blob = grid.encode_grid(np.zeros((2, 3)))
        assert blob[:4] == b"PGRD"
        assert struct.unpack_from("<HBB", blob, 4) == (1, 0, 2)
        assert struct.unpack_from("<2I", blob, 8) == (2, 3)
        assert len(blob) == 16 + 6 * 8

    def test_wrong_magic(self):
        blob = bytearray(grid.encode_grid(np.ones(3)))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            grid.decode_grid(bytes(blob))

    def test_payload_disagrees_with_dims(self):
        blob = grid.encode_grid(np.ones((2, 2)))
        with pytest.raises(FormatError):
            grid.decode_grid(blob[:-8])
        with pytest.raises(FormatError):
            grid.decode_grid(blob + b"\0" * 8)

    def test_truncated_header_and_dims(self):
        with pytest.raises(FormatError):
            grid.decode_grid(b"PGR")
        with pytest.raises(FormatError):
            grid.decode_grid(grid.encode_grid(np.ones((2, 2)))[:10])

    def test_dim_overflow(self):
        blob = b"PGRD" + struct.pack("<HBB", 1, 0, 3) + struct.pack("<3I", 2**31, 2**31, 2**31)
        with pytest.raises(FormatError):
            grid.decode_grid(blob)

    def test_bad_version(self):
        blob = bytearray(grid.encode_grid(np.ones(2)))
        blob[4] = 9
        with pytest.raises(FormatError):
            grid.decode_grid(bytes(blob))


class TestDomainTypes:
    def test_negative_population(self):
        with pytest.raises(DataError):
            grid.PopulationSeries(-np.ones((2, 2, 2)))

    def test_poi_must_be_integral(self):
        with pytest.raises(DataError):
            grid.PoiMap(np.full((len(grid.POI_CATEGORIES), 2, 2), 0.5))

    def test_poi_category_count(self):
        with pytest.raises(ShapeError):
            grid.PoiMap(np.ones((3, 2, 2)))
