"""Point cloud containers, PLY I/O, voxelization and color conversion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from plyfile import PlyData, PlyElement, PlyHeaderParseError, PlyParseError

COLOR_NAMES = ("red", "green", "blue")
RGB = ("R", "G", "B")
YUV = ("Y", "U", "V")

# BT.601 full range, chroma offset 128
_RGB2YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735891647856, -0.331264108352144, 0.5],
        [0.5, -0.418687589158345, -0.081312410841655],
    ]
)
_YUV2RGB = np.linalg.inv(_RGB2YUV)
_CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


class PlyFormatError(ValueError):
    """Malformed PLY content."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    attributes: np.ndarray
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        attrs = np.asarray(self.attributes, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs[:, None]
        self.attributes = attrs
        if len(self.positions) != len(self.attributes):
            raise ValueError(
                f"{len(self.positions)} positions but {len(self.attributes)} attribute rows"
            )
        if self.attributes.shape[1] < 1:
            raise ValueError("a point cloud needs at least one attribute channel")
        if not np.all(np.isfinite(self.attributes)):
            raise ValueError("attribute values must be finite")
        if not self.channel_names:
            self.channel_names = [f"attr{i}" for i in range(self.attributes.shape[1])]
        self.channel_names = list(self.channel_names)
        if len(self.channel_names) != self.attributes.shape[1]:
            raise ValueError("one channel name per attribute column is required")

    def __len__(self):
        return len(self.positions)

    @property
    def n_channels(self) -> int:
        return self.attributes.shape[1]


@dataclass
class VoxelizedCloud:
    """Unique integer voxels in Morton order with per-voxel mean attributes."""

    depth: int
    voxels: np.ndarray
    attributes: np.ndarray
    original_point_count: int
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        attrs = np.asarray(self.attributes, dtype=np.float64)
        self.attributes = attrs[:, None] if attrs.ndim == 1 else attrs
        if not self.channel_names:
            self.channel_names = [f"attr{i}" for i in range(self.attributes.shape[1])]

    def __len__(self):
        return len(self.voxels)

    @property
    def n_channels(self) -> int:
        return self.attributes.shape[1]

    def morton_keys(self) -> np.ndarray:
        return morton_encode(self.voxels, self.depth)

    def to_point_cloud(self) -> PointCloud:
        return PointCloud(self.voxels.astype(np.float64), self.attributes.copy(), self.channel_names)


# ---------------------------------------------------------------- Morton keys


def morton_encode(coords, depth: int):
    """Interleave coordinate bits as ``...z1 y1 x1 z0 y0 x0``.

    Accepts a single (x, y, z) triple or an (N, 3) array; returns an int or an
    int64 array. x is the least significant bit of every triple so that
    siblings along x are adjacent once keys are sorted.
    """
    arr = np.asarray(coords, dtype=np.int64)
    scalar = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    if depth < 0 or depth > 20:
        raise ValueError(f"depth {depth} outside supported range 0..20")
    if np.any(arr < 0) or np.any(arr >= (1 << depth)):
        raise ValueError(f"voxel coordinate outside [0, 2^{depth})")
    key = np.zeros(len(arr), dtype=np.int64)
    for b in range(depth):
        for axis in range(3):
            key |= ((arr[:, axis] >> b) & 1) << (3 * b + axis)
    return int(key[0]) if scalar else key


def morton_decode(keys, depth: int) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    out = np.zeros((len(keys), 3), dtype=np.int64)
    for b in range(depth):
        for axis in range(3):
            out[:, axis] |= ((keys >> (3 * b + axis)) & 1) << b
    return out


# ---------------------------------------------------------------- voxelize


def voxelize(cloud: PointCloud, depth: int) -> VoxelizedCloud:
    """Quantize positions onto a 2^depth grid, averaging colliding attributes.

    The longest bounding-box axis spans the whole grid; the other axes share
    the same scale.
    """
    if not 1 <= depth <= 16:
        raise ValueError(f"depth must be in 1..16, got {depth}")
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    pos = cloud.positions
    lo = pos.min(axis=0)
    extent = float((pos.max(axis=0) - lo).max())
    size = 1 << depth
    if extent > 0:
        grid = np.floor((pos - lo) * (size / extent)).astype(np.int64)
        np.clip(grid, 0, size - 1, out=grid)
    else:
        grid = np.zeros_like(pos, dtype=np.int64)
    keys = morton_encode(grid, depth)
    uniq, inverse = np.unique(keys, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    sums = np.zeros((len(uniq), cloud.n_channels))
    np.add.at(sums, inverse, cloud.attributes)
    return VoxelizedCloud(
        depth=depth,
        voxels=morton_decode(uniq, depth),
        attributes=sums / counts[:, None],
        original_point_count=len(cloud),
        channel_names=list(cloud.channel_names),
    )


def from_voxels(voxels, attributes, depth, original_point_count=None, channel_names=None):
    """Build a VoxelizedCloud from integer voxels that are already unique."""
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.ndim == 1:
        attributes = attributes[:, None]
    keys = morton_encode(voxels, depth)
    order = np.argsort(keys, kind="stable")
    if np.any(np.diff(keys[order]) == 0):
        raise ValueError("duplicate voxels")
    return VoxelizedCloud(
        depth=depth,
        voxels=voxels[order],
        attributes=attributes[order],
        original_point_count=len(voxels) if original_point_count is None else original_point_count,
        channel_names=list(channel_names or []),
    )


# ---------------------------------------------------------------- color


def rgb_to_yuv_array(rgb):
    return np.asarray(rgb, dtype=np.float64) @ _RGB2YUV.T + _CHROMA_OFFSET


def yuv_to_rgb_array(yuv):
    return (np.asarray(yuv, dtype=np.float64) - _CHROMA_OFFSET) @ _YUV2RGB.T


def _check_channels(cloud, expected):
    if cloud.n_channels != 3:
        raise ValueError(f"color conversion needs 3 channels, got {cloud.n_channels}")
    names = tuple(n.upper()[:1] for n in cloud.channel_names)
    if names != expected:
        raise ValueError(f"expected channels {expected}, got {tuple(cloud.channel_names)}")


def rgb_to_yuv(cloud):
    _check_channels(cloud, RGB)
    out = rgb_to_yuv_array(cloud.attributes)
    return _replace_attrs(cloud, out, list(YUV))


def yuv_to_rgb(cloud):
    _check_channels(cloud, YUV)
    out = yuv_to_rgb_array(cloud.attributes)
    return _replace_attrs(cloud, out, list(RGB))


def _replace_attrs(cloud, attrs, names):
    if isinstance(cloud, VoxelizedCloud):
        return VoxelizedCloud(cloud.depth, cloud.voxels.copy(), attrs, cloud.original_point_count, names)
    return PointCloud(cloud.positions.copy(), attrs, names)


def is_rgb(cloud) -> bool:
    return cloud.n_channels == 3 and tuple(n.upper()[:1] for n in cloud.channel_names) == RGB


# ---------------------------------------------------------------- PLY


def load_ply(path) -> PointCloud:
    """Read the vertex element of an ASCII or binary little-endian PLY.

    Colors come back as R, G, B in [0, 255]; any other non-position scalar
    property becomes a generic channel, in file order.
    """
    try:
        ply = PlyData.read(str(path))
    except PlyHeaderParseError as exc:
        raise PlyFormatError(exc.message, line=exc.line) from exc
    except PlyParseError as exc:
        raise PlyFormatError(str(exc)) from exc
    if "vertex" not in ply:
        raise UnsupportedFormatError("PLY has no vertex element")
    vertex = ply["vertex"]
    names = [p.name for p in vertex.properties]
    missing = [c for c in "xyz" if c not in names]
    if missing:
        raise UnsupportedFormatError(f"missing position properties: {', '.join(missing)}")
    data = vertex.data
    positions = np.stack([np.asarray(data[c], dtype=np.float64) for c in "xyz"], axis=1)

    channels, labels = [], []
    for prop in vertex.properties:
        name = prop.name
        if name in "xyz" or name in ("nx", "ny", "nz"):
            continue
        if prop.val_dtype is None:
            raise UnsupportedFormatError(f"list property {name!r} in vertex element")
        column = np.asarray(data[name], dtype=np.float64)
        if name in COLOR_NAMES:
            kind = np.dtype(prop.val_dtype)
            if kind == np.uint16:
                column = column / 257.0
            elif kind.kind == "f" and len(column) and column.max() <= 1.0:
                column = column * 255.0
            labels.append("RGB"[COLOR_NAMES.index(name)])
        else:
            labels.append(name)
        channels.append(column)
    if not channels:
        raise UnsupportedFormatError("PLY vertex element carries no attribute properties")
    attributes = np.stack(channels, axis=1)
    if len(positions) and tuple(labels[:3]) != RGB and set(RGB) & set(labels):
        # keep R, G, B contiguous and in order wherever they appear
        rgb_idx = [labels.index(c) for c in RGB if c in labels]
        other = [i for i in range(len(labels)) if i not in rgb_idx]
        order = rgb_idx + other
        attributes = attributes[:, order]
        labels = [labels[i] for i in order]
    return PointCloud(positions, attributes, labels)


def save_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write x, y, z as float32, R/G/B channels as uchar and the rest as float32."""
    if len(cloud) == 0:
        raise ValueError("refusing to write an empty point cloud")
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    columns = [cloud.positions[:, i].astype(np.float32) for i in range(3)]
    for i, name in enumerate(cloud.channel_names):
        col = cloud.attributes[:, i]
        if name in RGB and is_rgb(cloud):
            fields.append((COLOR_NAMES[RGB.index(name)], "u1"))
            columns.append(np.clip(np.rint(col), 0, 255).astype(np.uint8))
        else:
            fields.append((name, "f4"))
            columns.append(col.astype(np.float32))
    table = np.empty(len(cloud), dtype=fields)
    for (name, _), col in zip(fields, columns):
        table[name] = col
    element = PlyElement.describe(table, "vertex")
    PlyData([element], text=not binary, byte_order="<").write(str(path))
