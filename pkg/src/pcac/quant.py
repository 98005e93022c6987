"""Uniform quantization and breadth-first serialization of RAHT coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raht import RahtTree, collect_highs, inverse_transform


def quantize(x, qstep):
    """Round x / qstep half away from zero."""
    if qstep <= 0:
        raise ValueError("qstep must be positive")
    x = np.asarray(x, dtype=np.float64)
    q = np.sign(x) * np.floor(np.abs(x) / qstep + 0.5)
    q = q.astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(r, qstep):
    if qstep <= 0:
        raise ValueError("qstep must be positive")
    out = np.asarray(r, dtype=np.float64) * qstep
    return float(out) if out.ndim == 0 else out


@dataclass
class CoefficientStream:
    """Quantized highs in transmission order plus the raw DC.

    ``symbols`` runs over levels root first; inside a level, all nodes of
    channel 0, then channel 1, and so on, nodes in Morton order.
    """

    qstep: float
    dc: np.ndarray
    symbols: np.ndarray
    level_sizes: list  # (depth, node count) per transmitted level

    @property
    def bound(self) -> int:
        return int(np.abs(self.symbols).max()) if len(self.symbols) else 0

    @property
    def n_channels(self) -> int:
        return len(self.dc)

    def groups(self):
        """Yield (depth, channel, slice into symbols)."""
        cursor = 0
        for depth, m in self.level_sizes:
            for ch in range(self.n_channels):
                yield depth, ch, slice(cursor, cursor + m)
                cursor += m

    def node_major(self) -> np.ndarray:
        """Symbols as an (n_high, n_channels) array in tree high order."""
        return symbols_to_nodes(self.symbols, self.level_sizes, self.n_channels)


def symbols_to_nodes(symbols, level_sizes, n_channels):
    blocks, cursor = [], 0
    for _, m in level_sizes:
        block = np.asarray(symbols[cursor : cursor + m * n_channels]).reshape(n_channels, m)
        blocks.append(block.T)
        cursor += m * n_channels
    if cursor != len(symbols):
        raise ValueError(f"stream holds {len(symbols)} symbols, tree expects {cursor}")
    if not blocks:
        return np.zeros((0, n_channels), dtype=np.int64)
    return np.concatenate(blocks, axis=0)


def nodes_to_symbols(nodes, level_sizes):
    parts, cursor = [], 0
    for _, m in level_sizes:
        parts.append(nodes[cursor : cursor + m].T.ravel())
        cursor += m
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def level_sizes(tree: RahtTree):
    return [(d, int(tree.levels[d].is_high.sum())) for d in tree.transmission_levels()]


def serialize(tree: RahtTree, qstep: float) -> CoefficientStream:
    if tree.levels[-1].low is None:
        raise ValueError("run forward_transform first")
    sizes = level_sizes(tree)
    q = quantize(collect_highs(tree), qstep)
    return CoefficientStream(
        qstep=float(qstep),
        dc=tree.levels[-1].low[0].copy(),
        symbols=nodes_to_symbols(q.reshape(-1, tree.n_channels), sizes).astype(np.int64),
        level_sizes=sizes,
    )


def check_stream(tree: RahtTree, stream: CoefficientStream):
    if stream.level_sizes != level_sizes(tree):
        raise ValueError("coefficient stream does not match the tree's geometry")
    if stream.n_channels != tree.n_channels:
        raise ValueError("channel count mismatch between stream and tree")


def reconstruct(tree: RahtTree, stream: CoefficientStream, return_lows: bool = False):
    """Per-voxel attributes from dequantized coefficients."""
    check_stream(tree, stream)
    highs = dequantize(stream.node_major(), stream.qstep)
    return inverse_transform(tree, stream.dc, highs, return_lows=return_lows)
