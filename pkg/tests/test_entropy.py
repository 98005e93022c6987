import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcac.entropy import (
    DecodeError,
    RangeDecoder,
    RangeEncoder,
    cross_entropy_bits,
    pmf_to_cdf,
    range_decode,
    range_encode,
    rlgr_decode,
    rlgr_encode,
)
from pcac.entropy.cdf import TOTAL


def empirical_entropy_bits(x):
    _, counts = np.unique(x, return_counts=True)
    p = counts / counts.sum()
    return float(-(counts * np.log2(p)).sum())


class TestCdf:
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=300).filter(lambda v: sum(v) > 0))
    def test_valid_cdf(self, pmf):
        cdf = pmf_to_cdf(pmf)
        assert cdf[0] == 0 and cdf[-1] == TOTAL
        assert np.all(np.diff(cdf) >= 1)

    def test_rows(self):
        cdf = pmf_to_cdf(np.array([[0.5, 0.5], [1.0, 0.0]]))
        assert cdf.shape == (2, 3)
        np.testing.assert_array_equal(cdf[1], [0, TOTAL - 1, TOTAL])

    def test_proportional(self):
        freq = np.diff(pmf_to_cdf([0.25, 0.75]))
        np.testing.assert_allclose(freq / TOTAL, [0.25, 0.75], atol=1e-4)

    @pytest.mark.parametrize("bad", [[-0.1, 1.1], [np.nan, 1.0], [0.0, 0.0], np.ones(TOTAL)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            pmf_to_cdf(bad)

    def test_cross_entropy(self):
        assert cross_entropy_bits([0, 1, 1], [0.5, 0.25, 0.25]) == pytest.approx(5.0)

    def test_cross_entropy_zero_probability(self):
        with pytest.raises(ValueError):
            cross_entropy_bits([2], [0.5, 0.5, 0.0])


class TestRangeCoder:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 400), st.integers(1, 40))
    def test_roundtrip(self, seed, n, k):
        r = np.random.default_rng(seed)
        pmf = r.dirichlet(np.ones(k) * 0.3)
        cdf = pmf_to_cdf(pmf)
        symbols = r.choice(k, n, p=pmf)
        payload = range_encode(symbols, cdf)
        np.testing.assert_array_equal(range_decode(payload, cdf, n), symbols)

    def test_per_symbol_cdfs(self, rng):
        pmfs = rng.dirichlet(np.ones(5), size=300)
        cdfs = pmf_to_cdf(pmfs)
        symbols = np.array([rng.choice(5, p=p) for p in pmfs])
        np.testing.assert_array_equal(range_decode(range_encode(symbols, cdfs), cdfs), symbols)

    def test_near_cross_entropy(self, rng):
        pmf = np.array([0.6, 0.2, 0.1, 0.05, 0.03, 0.02])
        symbols = rng.choice(6, 20_000, p=pmf)
        cdf = pmf_to_cdf(pmf)
        q = np.diff(cdf) / TOTAL
        bits = 8 * len(range_encode(symbols, cdf))
        assert bits <= 1.01 * cross_entropy_bits(symbols, q) + 256

    def test_skewed_stream_is_small(self):
        cdf = pmf_to_cdf([0.999, 0.001])
        assert len(range_encode(np.zeros(10_000, dtype=int), cdf)) < 40

    def test_truncated(self, rng):
        cdf = pmf_to_cdf(np.ones(16))
        symbols = rng.integers(0, 16, 500)
        payload = range_encode(symbols, cdf)
        with pytest.raises(DecodeError):
            range_decode(payload[:-3], cdf, 500)

    def test_trailing_bytes(self, rng):
        cdf = pmf_to_cdf(np.ones(4))
        payload = range_encode(rng.integers(0, 4, 50), cdf)
        with pytest.raises(DecodeError, match="trailing"):
            range_decode(payload + b"\x00\x00", cdf, 50)

    def test_zero_frequency(self):
        with pytest.raises(ValueError):
            RangeEncoder().encode(0, 0)

    def test_symbol_outside_alphabet(self):
        with pytest.raises(ValueError):
            range_encode([3], pmf_to_cdf([0.5, 0.5]))

    @given(st.lists(st.integers(0, 2**40), max_size=20), st.lists(st.integers(0, 1), max_size=20))
    def test_expgolomb_and_bits(self, values, bits):
        enc = RangeEncoder()
        for v in values:
            enc.encode_expgolomb(v)
        for b in bits:
            enc.encode_bit(b)
        dec = RangeDecoder(enc.finish())
        assert [dec.decode_expgolomb() for _ in values] == values
        assert [dec.decode_bit() for _ in bits] == bits
        dec.finish()


class TestRlgr:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-5000, 5000), max_size=300))
    def test_roundtrip(self, values):
        np.testing.assert_array_equal(rlgr_decode(rlgr_encode(values)), values)

    @given(st.integers(0, 2**31), st.sampled_from([0.2, 1.0, 5.0, 50.0]))
    @settings(max_examples=20, deadline=None)
    def test_laplacian_roundtrip(self, seed, scale):
        x = np.rint(np.random.default_rng(seed).laplace(0, scale, 500)).astype(np.int64)
        np.testing.assert_array_equal(rlgr_decode(rlgr_encode(x)), x)

    def test_empty(self):
        assert len(rlgr_decode(rlgr_encode([]))) == 0

    def test_zero_runs_are_cheap(self):
        assert len(rlgr_encode(np.zeros(1000, dtype=int))) <= 16

    def test_huge_values(self):
        x = [2**40, -(2**40), 0, 1]
        np.testing.assert_array_equal(rlgr_decode(rlgr_encode(x)), x)

    def test_near_entropy(self, rng):
        x = np.rint(rng.laplace(0, 4.0, 20_000)).astype(np.int64)
        assert 8 * len(rlgr_encode(x)) <= 1.15 * empirical_entropy_bits(x)

    def test_truncated(self, rng):
        payload = rlgr_encode(rng.integers(-50, 50, 400))
        with pytest.raises(DecodeError):
            rlgr_decode(payload[: len(payload) // 2])
        with pytest.raises(DecodeError):
            rlgr_decode(payload[:2])
