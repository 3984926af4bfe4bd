import numpy as np
import pytest

from qgldp.rng import Stream, philox4x64, stream_hash


@pytest.mark.parametrize("counter", [(0, 0, 0, 0), (5, 3, 2, 0), (2**64 - 1, 7, 11, 13)])
def test_philox_matches_numpy(counter):
    key = (0x0123456789ABCDEF, 0xFEDCBA9876543210)
    # numpy advances the counter before producing a block
    prev = list(counter)
    for i in range(4):
        if prev[i] > 0:
            prev[i] -= 1
            break
        prev[i] = 2**64 - 1
    bg = np.random.Philox(key=np.array(key, dtype=np.uint64), counter=np.array(prev, dtype=np.uint64))
    expected = bg.random_raw(4)
    got = np.array([int(w) for w in philox4x64(tuple(np.uint64(c) for c in counter), key)], dtype=np.uint64)
    np.testing.assert_array_equal(got, expected)


def test_stream_determinism_and_independence():
    s = Stream(42)
    a = s.normals([0, 1, 2], 5, 10)
    np.testing.assert_array_equal(a, Stream(42).normals([0, 1, 2], 5, 10))
    assert a.shape == (3, 10)
    assert not np.array_equal(a, s.normals([0, 1, 2], 6, 10))
    assert not np.array_equal(a, Stream(43).normals([0, 1, 2], 5, 10))
    assert not np.array_equal(a, Stream(42, "other").normals([0, 1, 2], 5, 10))
    assert stream_hash("noise") != stream_hash("noise2")


def test_batching_invariance():
    s = Stream(7)
    full = s.normals(np.arange(10), 3, 6)
    np.testing.assert_array_equal(full[4:7], s.normals([4, 5, 6], 3, 6))
    np.testing.assert_array_equal(full[9], s.normals([9], 3, 6)[0])
    # a longer draw extends a shorter one
    np.testing.assert_array_equal(s.normals([1], 3, 9)[0, :6], full[1])


def test_normal_moments():
    z = Stream(1).normals(np.arange(20000), 0, 8).ravel()
    n = z.size
    assert abs(z.mean()) < 4 / np.sqrt(n)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / n)
    assert abs(np.mean(z**4) - 3) < 0.1
    assert np.all(np.isfinite(z))
