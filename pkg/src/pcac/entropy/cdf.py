import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION


def pmf_to_cdf(pmf) -> np.ndarray:
    """Quantize PMFs (last axis) to integer CDFs summing to 2**16.

    Every symbol keeps a frequency of at least one; the rounding slack goes to
    the most probable symbol. Works row-wise on 2D input.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    squeeze = pmf.ndim == 1
    pmf = np.atleast_2d(pmf)
    k = pmf.shape[1]
    if k < 1 or k > TOTAL // 2:
        raise ValueError(f"alphabet size {k} unsupported at {PRECISION}-bit precision")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise ValueError("PMF entries must be finite and non-negative")
    total = pmf.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("PMF has no mass")
    freq = 1 + np.floor(pmf / total * (TOTAL - k)).astype(np.int64)
    deficit = TOTAL - freq.sum(axis=1)
    freq[np.arange(len(freq)), np.argmax(freq, axis=1)] += deficit
    cdf = np.zeros((len(freq), k + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf[0] if squeeze else cdf


def cross_entropy_bits(symbols, pmfs) -> float:
    """Sum of -log2 p(symbol); ``pmfs`` is (N, K) or a single shared (K,)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    pmfs = np.asarray(pmfs, dtype=np.float64)
    if pmfs.ndim == 1:
        p = pmfs[symbols]
    else:
        p = pmfs[np.arange(len(symbols)), symbols]
    if np.any(p <= 0):
        raise ValueError("symbol with zero probability")
    return float(-np.log2(p).sum())
