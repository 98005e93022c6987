"""Attribute bitstream: header layout and the three entropy coding modes.

Header (little-endian)::

    magic "3DAC" | version u8 | mode u8 | octree depth u8 | channels u8 |
    colorspace u8 | qstep f32 | voxels u32 | original points u32 | bound i32 |
    geometry crc32 u32 | symbol crc32 u32 | DC f64 x channels |
    payload length u64 | header crc32 u32 | payload

``colorspace`` 1 means the attributes were RGB and were coded as YUV.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .context_model import MAX_CODED_BOUND, DensityModel, Sample, level_context, previous_channels
from .entropy import DecodeError, RangeDecoder, RangeEncoder, pmf_to_cdf, rlgr_decode, rlgr_encode
from .pointcloud_io import (
    RGB,
    YUV,
    VoxelizedCloud,
    from_voxels,
    is_rgb,
    morton_encode,
    rgb_to_yuv,
    yuv_to_rgb,
)
from .quant import CoefficientStream, level_sizes, nodes_to_symbols, reconstruct, serialize
from .raht import build_tree, forward_transform, inverse_level

MAGIC = b"3DAC"
VERSION = 1
MODES = {"rlgr": 0, "factorized": 1, "context": 2}
MODE_NAMES = {v: k for k, v in MODES.items()}
_FIXED = struct.Struct("<4sBBBBBfIIiII")


class BitstreamError(ValueError):
    pass


@dataclass
class Header:
    mode: str
    depth: int
    n_channels: int
    colorspace: int
    qstep: float
    voxel_count: int
    original_point_count: int
    bound: int
    geometry_crc: int
    symbols_crc: int
    dc: np.ndarray
    payload_len: int

    def pack(self) -> bytes:
        head = _FIXED.pack(
            MAGIC,
            VERSION,
            MODES[self.mode],
            self.depth,
            self.n_channels,
            self.colorspace,
            self.qstep,
            self.voxel_count,
            self.original_point_count,
            self.bound,
            self.geometry_crc,
            self.symbols_crc,
        )
        head += np.asarray(self.dc, dtype="<f8").tobytes()
        head += struct.pack("<Q", self.payload_len)
        return head + struct.pack("<I", zlib.crc32(head))

    @classmethod
    def unpack(cls, data: bytes):
        if len(data) < _FIXED.size:
            raise BitstreamError("bitstream shorter than its header")
        fields = _FIXED.unpack_from(data)
        magic, version, mode, depth, n, colorspace, qstep = fields[:7]
        if magic != MAGIC:
            raise BitstreamError("bad magic; not an attribute bitstream")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        end = _FIXED.size + 8 * n + 8
        if len(data) < end + 4:
            raise BitstreamError("bitstream header truncated")
        (crc,) = struct.unpack_from("<I", data, end)
        if crc != zlib.crc32(data[:end]):
            raise BitstreamError("header checksum mismatch")
        if mode not in MODE_NAMES:
            raise BitstreamError(f"unknown entropy mode {mode}")
        dc = np.frombuffer(data, dtype="<f8", count=n, offset=_FIXED.size).astype(np.float64)
        (payload_len,) = struct.unpack_from("<Q", data, end - 8)
        header = cls(
            MODE_NAMES[mode], depth, n, colorspace, qstep, *fields[7:12], dc=dc, payload_len=payload_len
        )
        return header, end + 4


def geometry_crc(voxels, depth) -> int:
    keys = np.sort(morton_encode(np.asarray(voxels).reshape(-1, 3), depth))
    return zlib.crc32(struct.pack("<B", depth) + keys.astype("<i8").tobytes())


def symbols_crc(symbols) -> int:
    return zlib.crc32(np.asarray(symbols, dtype="<i4").tobytes())


# ---------------------------------------------------------------- learned coding


def _encode_value(enc, r, cdf, cb):
    if r < -cb:
        enc.encode_symbol(0, cdf)
        enc.encode_expgolomb(-r - cb - 1)
    elif r > cb:
        enc.encode_symbol(2 * cb + 2, cdf)
        enc.encode_expgolomb(r - cb - 1)
    else:
        enc.encode_symbol(r + cb + 1, cdf)


def _decode_value(dec, cdf, cb):
    idx = dec.decode_symbol(cdf)
    if idx == 0:
        return -cb - 1 - dec.decode_expgolomb()
    if idx == 2 * cb + 2:
        return cb + 1 + dec.decode_expgolomb()
    return idx - cb - 1


def learned_pass(tree, model: DensityModel, qstep, dc, bound, nodes=None, coder=None, on_pmf=None):
    """Walk the tree root first, coding one (level, channel) group at a time.

    With ``nodes`` given (n_high x channels, tree order) symbols are written
    to the RangeEncoder ``coder``; otherwise they are read from the
    RangeDecoder ``coder``. Contexts only ever see dequantized symbols of
    earlier groups, so both directions compute identical PMFs. Returns the
    node-major symbols.
    """
    n = tree.n_channels
    if model.n_channels != n:
        raise BitstreamError(f"model expects {model.n_channels} channels, cloud has {n}")
    cb = min(int(bound), MAX_CODED_BOUND)
    encoding = nodes is not None
    low = np.asarray(dc, dtype=np.float64).reshape(1, n)
    out, cursor = [], 0
    for d in range(tree.binary_depth, 0, -1):
        lv = tree.levels[d]
        idx = lv.high_nodes
        full = np.zeros((len(lv), n))
        if len(idx):
            m = len(idx)
            ctx = level_context(tree, d, low, qstep)
            if encoding:
                sym = np.asarray(nodes[cursor : cursor + m], dtype=np.int64)
            else:
                sym = np.zeros((m, n), dtype=np.int64)
            cursor += m
            deq = np.zeros((m, n))
            prev = [None] * n
            sample = Sample.from_level(ctx, prev)
            for ch in range(n):
                prev[ch] = previous_channels(deq, ch, n, qstep)
                pmf = model.pmf(sample, ch, cb)
                if on_pmf is not None:
                    on_pmf(d, ch, pmf)
                cdfs = pmf_to_cdf(pmf).tolist()
                if encoding:
                    for j in range(m):
                        _encode_value(coder, int(sym[j, ch]), cdfs[j], cb)
                else:
                    for j in range(m):
                        sym[j, ch] = _decode_value(coder, cdfs[j], cb)
                deq[:, ch] = sym[:, ch] * qstep
            full[idx] = deq
            out.append(sym)
        low = inverse_level(tree, d, low, full)
    return np.concatenate(out) if out else np.zeros((0, n), dtype=np.int64)


# ---------------------------------------------------------------- encode / decode


@dataclass
class EncodeResult:
    bitstream: bytes
    header: Header
    stream: CoefficientStream
    reconstruction: np.ndarray  # per voxel, in the coded color space
    coded: VoxelizedCloud  # the cloud as coded (YUV for color input)

    @property
    def bits(self) -> int:
        return 8 * len(self.bitstream)

    @property
    def bpp(self) -> float:
        return self.bits / self.header.original_point_count


def _rlgr_payload(stream: CoefficientStream) -> bytes:
    nodes = stream.node_major()
    out = bytearray()
    for ch in range(stream.n_channels):
        chunk = rlgr_encode(nodes[:, ch])
        out += struct.pack("<I", len(chunk)) + chunk
    return bytes(out)


def _rlgr_unpayload(payload: bytes, n_channels: int, n_high: int) -> np.ndarray:
    cols, pos = [], 0
    for _ in range(n_channels):
        if pos + 4 > len(payload):
            raise DecodeError("RLGR payload truncated")
        (size,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + size > len(payload):
            raise DecodeError("RLGR payload truncated")
        col = rlgr_decode(payload[pos : pos + size])
        pos += size
        if len(col) != n_high:
            raise DecodeError("RLGR channel length does not match geometry")
        cols.append(col)
    if pos != len(payload):
        raise DecodeError("trailing bytes in RLGR payload")
    return np.stack(cols, axis=1) if cols else np.zeros((n_high, 0), dtype=np.int64)


def _check_model_mode(mode, model):
    if mode == "rlgr":
        return
    if model is None:
        raise ValueError(f"mode {mode!r} needs a trained model")
    if mode == "factorized" and model.components:
        raise ValueError("factorized mode needs a context-free model (components='')")
    if mode == "context" and not model.components:
        raise ValueError("context mode needs a model with context components enabled")


def encode(cloud: VoxelizedCloud, qstep: float, mode: str = "context", model=None) -> EncodeResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    _check_model_mode(mode, model)
    colorspace = 1 if is_rgb(cloud) else 0
    coded = rgb_to_yuv(cloud) if colorspace else cloud
    qstep = float(np.float32(qstep))
    if not qstep > 0:
        raise ValueError("qstep must be positive")
    tree = forward_transform(build_tree(coded))
    stream = serialize(tree, qstep)
    bound = stream.bound
    if mode == "rlgr":
        payload = _rlgr_payload(stream)
    else:
        enc = RangeEncoder()
        learned_pass(tree, model, qstep, stream.dc, bound, nodes=stream.node_major(), coder=enc)
        payload = enc.finish()
    header = Header(
        mode=mode,
        depth=cloud.depth,
        n_channels=cloud.n_channels,
        colorspace=colorspace,
        qstep=qstep,
        voxel_count=len(cloud),
        original_point_count=cloud.original_point_count,
        bound=bound,
        geometry_crc=geometry_crc(cloud.voxels, cloud.depth),
        symbols_crc=symbols_crc(stream.symbols),
        dc=stream.dc,
        payload_len=len(payload),
    )
    return EncodeResult(header.pack() + payload, header, stream, reconstruct(tree, stream), coded)


@dataclass
class DecodeResult:
    cloud: VoxelizedCloud  # reconstructed, RGB when the input was RGB
    header: Header
    stream: CoefficientStream


def read_header(data: bytes) -> Header:
    return Header.unpack(data)[0]


def decode(data: bytes, voxels, model=None) -> DecodeResult:
    """Rebuild attributes on ``voxels`` (integer coords, any order)."""
    header, offset = Header.unpack(data)
    payload = data[offset:]
    if len(payload) != header.payload_len:
        raise BitstreamError(f"payload is {len(payload)} bytes, header says {header.payload_len}")
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    if len(voxels) != header.voxel_count:
        raise BitstreamError(
            f"geometry has {len(voxels)} voxels, bitstream was coded for {header.voxel_count}"
        )
    if geometry_crc(voxels, header.depth) != header.geometry_crc:
        raise BitstreamError("geometry does not match the bitstream (checksum mismatch)")
    _check_model_mode(header.mode, model)
    n = header.n_channels
    shell = from_voxels(voxels, np.zeros((len(voxels), n)), header.depth, header.original_point_count)
    tree = build_tree(shell)
    sizes = level_sizes(tree)
    if header.mode == "rlgr":
        nodes = _rlgr_unpayload(payload, n, tree.n_high)
    else:
        dec = RangeDecoder(payload)
        nodes = learned_pass(tree, model, header.qstep, header.dc, header.bound, coder=dec)
        dec.finish()
    symbols = nodes_to_symbols(nodes, sizes)
    if symbols_crc(symbols) != header.symbols_crc:
        raise BitstreamError("decoded symbols fail the checksum (wrong model or corrupt payload)")
    stream = CoefficientStream(header.qstep, header.dc.copy(), symbols, sizes)
    attrs = reconstruct(tree, stream)
    if header.colorspace:
        names = list(YUV)
    elif n == 1:
        names = ["reflectance"]
    else:
        names = [f"attr{i}" for i in range(n)]
    cloud = VoxelizedCloud(header.depth, shell.voxels, attrs, header.original_point_count, names)
    if header.colorspace:
        cloud = yuv_to_rgb(cloud)
        cloud.channel_names = list(RGB)
    return DecodeResult(cloud, header, stream)
