import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volnorm.tensor import (FormatError, NormPartition, PartitionError, Shape5, ShapeError,
                            SizeError, flatten_index, map_binary, reduce_over,
                            tensor_from_bytes, tensor_to_bytes, unflatten_index, zeros)

extents = st.tuples(*[st.integers(1, 4)] * 5)


class TestZeros:
    def test_unit(self):
        z = zeros((1, 1, 1, 1, 1))
        assert z.shape == (1, 1, 1, 1, 1) and z.ravel().tolist() == [0.0]

    def test_small(self):
        assert zeros((2, 2, 2, 2, 2)).size == 32
        assert not zeros((2, 2, 2, 2, 2)).any()

    def test_slab_sized(self):
        assert zeros((1, 16, 256, 256, 1)).size == 16 * 256 * 256

    def test_bad_extent(self):
        with pytest.raises(ShapeError):
            zeros((1, 0, 1, 1, 1))

    def test_overflow(self):
        with pytest.raises(SizeError):
            Shape5(2 ** 20, 2 ** 20, 2 ** 20, 2 ** 20, 2 ** 20).validate()


class TestMapBinary:
    def test_add(self):
        a = np.array([1.0, 2.0]).reshape(1, 1, 1, 2, 1)
        b = np.array([3.0, 4.0]).reshape(1, 1, 1, 2, 1)
        assert map_binary(a, b, np.add).ravel().tolist() == [4.0, 6.0]

    def test_annihilator(self, rng):
        x = rng.normal(size=(1, 2, 2, 2, 3))
        assert not map_binary(x, np.zeros_like(x), np.multiply).any()

    def test_sub(self):
        out = map_binary(np.full((1,) * 5, 5.0), np.full((1,) * 5, 2.0), np.subtract)
        assert out.ravel().tolist() == [3.0]

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            map_binary(np.zeros((1, 1, 1, 1, 2)), np.zeros((1, 1, 1, 2, 1)), np.add)

    @given(extents, st.integers(0, 2 ** 31))
    def test_add_commutes_bitwise(self, shape, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=shape), r.normal(size=shape)
        assert np.array_equal(map_binary(a, b, np.add), map_binary(b, a, np.add))


class TestLinearization:
    def test_channels_fastest(self):
        assert flatten_index((2, 3, 4, 5, 6), (0, 0, 0, 0, 1)) == 1
        assert flatten_index((2, 3, 4, 5, 6), (0, 0, 0, 1, 0)) == 6
        assert flatten_index((2, 3, 4, 5, 6), (1, 0, 0, 0, 0)) == 3 * 4 * 5 * 6

    @given(extents, st.data())
    def test_round_trip(self, shape, data):
        idx = tuple(data.draw(st.integers(0, e - 1)) for e in shape)
        assert unflatten_index(shape, flatten_index(shape, idx)) == idx


class TestReduceOver:
    shape = (1, 1, 1, 4, 1)

    def test_single_set(self):
        x = np.arange(1.0, 5.0).reshape(self.shape)
        p = NormPartition.from_labels(self.shape, [0, 0, 0, 0])
        sums, counts = reduce_over(x, p)
        assert sums.tolist() == [10.0] and counts.tolist() == [4]

    def test_two_sets(self):
        x = np.arange(1.0, 5.0).reshape(self.shape)
        p = NormPartition.from_labels(self.shape, [0, 0, 1, 1])
        sums, counts = reduce_over(x, p)
        assert sums.tolist() == [3.0, 7.0] and counts.tolist() == [2, 2]

    def test_per_channel_matches_naive_loop(self, rng):
        shape = (1, 16, 16, 16, 3)
        x = rng.normal(size=shape) + 5.0
        p = NormPartition.structured(shape, "batch", (16 ** 3, 3), (0,))
        sums, counts = reduce_over(x, p)
        naive = [0.0, 0.0, 0.0]
        for d, h, w, c in itertools.product(range(16), range(16), range(16), range(3)):
            naive[c] += x[0, d, h, w, c]
        np.testing.assert_allclose(sums, naive, rtol=1e-9)
        assert counts.tolist() == [4096] * 3

    def test_explicit_path_matches_structured(self, rng):
        shape = (2, 3, 4, 5, 6)
        x = rng.normal(size=shape)
        p = NormPartition.structured(shape, "instance", (2, 60, 6), (1,))
        q = NormPartition.from_labels(shape, p.set_of)
        np.testing.assert_allclose(reduce_over(x, q)[0], reduce_over(x, p)[0], rtol=1e-12)

    def test_compensated_sum_large_offset(self):
        shape = (1, 1, 1, 100_000, 1)
        x = np.full(shape, 1e8) + np.tile([0.1, -0.1], 50_000).reshape(shape)
        p = NormPartition.from_labels(shape, np.zeros(100_000, dtype=int))
        assert reduce_over(x, p)[0][0] == pytest.approx(1e13, rel=1e-15)

    @given(extents, st.integers(0, 2 ** 31))
    @settings(max_examples=50)
    def test_all_indices_equals_global_sum(self, shape, seed):
        x = np.random.default_rng(seed).normal(size=shape)
        p = NormPartition.from_labels(shape, np.zeros(x.size, dtype=int))
        total = reduce_over(x, p)[0][0]
        assert total == pytest.approx(np.sum(x), rel=1e-9, abs=1e-12)

    def test_wrong_shape(self):
        p = NormPartition.from_labels((1, 1, 1, 4, 1), [0, 0, 1, 1])
        with pytest.raises(PartitionError):
            reduce_over(np.zeros((1, 1, 1, 5, 1)), p)

    def test_label_count_mismatch(self):
        with pytest.raises(PartitionError):
            NormPartition.from_labels((1, 1, 1, 4, 1), [0, 1])


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32, np.uint8, np.int64])
    def test_round_trip(self, rng, dtype):
        x = (rng.normal(size=(2, 3, 1, 2, 4)) * 10).astype(dtype)
        y, end = tensor_from_bytes(tensor_to_bytes(x))
        assert y.dtype == x.dtype and np.array_equal(x, y)
        assert end == 64 + x.nbytes

    def test_header_is_eight_values(self):
        blob = tensor_to_bytes(np.zeros((1, 1, 1, 1, 1)))
        assert len(blob) == 8 * 8 + 8
        header = np.frombuffer(blob[:64], dtype="<i8")
        assert header[2:7].tolist() == [1, 1, 1, 1, 1]

    def test_low_rank_padded(self):
        y, _ = tensor_from_bytes(tensor_to_bytes(np.arange(3.0)))
        assert y.shape == (1, 1, 1, 1, 3)

    def test_truncated(self):
        blob = tensor_to_bytes(np.zeros((1, 1, 1, 2, 2)))
        with pytest.raises(FormatError):
            tensor_from_bytes(blob[:-1])
        with pytest.raises(FormatError):
            tensor_from_bytes(blob[:10])

    def test_bad_magic(self):
        blob = bytearray(tensor_to_bytes(np.zeros((1, 1, 1, 1, 1))))
        blob[0] ^= 0xFF
        with pytest.raises(FormatError):
            tensor_from_bytes(bytes(blob))
