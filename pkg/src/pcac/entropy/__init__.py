from .cdf import PRECISION, cross_entropy_bits, pmf_to_cdf
from .rangecoder import (
    DecodeError,
    RangeDecoder,
    RangeEncoder,
    range_decode,
    range_encode,
)
from .rlgr import rlgr_decode, rlgr_encode

__all__ = [
    "PRECISION",
    "DecodeError",
    "RangeDecoder",
    "RangeEncoder",
    "cross_entropy_bits",
    "pmf_to_cdf",
    "range_decode",
    "range_encode",
    "rlgr_decode",
    "rlgr_encode",
]
