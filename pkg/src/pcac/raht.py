"""Region Adaptive Hierarchical Transform on a binary merge tree.

Level 0 holds the voxels; level ``k + 1`` merges level-``k`` nodes along axis
``k % 3`` (x, y, z, x, ...). Nodes inside a level are kept in the order of
``morton_key >> k``, which is also the order their coefficients are sent in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud_io import VoxelizedCloud


def kernel(w1, w2, l1, l2):
    """Merge two low-pass coefficients with weights w1, w2 into (low, high)."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    if np.any(w1 < 1) or np.any(w2 < 1):
        raise ValueError("weights must be >= 1")
    a, b, s = _coeffs(w1, w2, l1.ndim)
    low = (a * l1 + b * l2) / s
    high = (a * l2 - b * l1) / s
    return low, high


def inverse_kernel(w1, w2, low, high):
    """Transpose of :func:`kernel`; recovers (l1, l2)."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    a, b, s = _coeffs(w1, w2, low.ndim)
    l1 = (a * low - b * high) / s
    l2 = (b * low + a * high) / s
    return l1, l2


def _coeffs(w1, w2, ndim):
    a = np.sqrt(w1)
    b = np.sqrt(w2)
    s = np.sqrt(w1 + w2)
    # broadcast per-node weights over the channel axis
    if a.ndim and ndim > a.ndim:
        a, b, s = a[:, None], b[:, None], s[:, None]
    return a, b, s


def transform_matrix(w1, w2):
    a, b, s = np.sqrt(w1), np.sqrt(w2), np.sqrt(w1 + w2)
    return np.array([[a, b], [-b, a]]) / s


@dataclass
class RahtLevel:
    keys: np.ndarray
    pos: np.ndarray
    weight: np.ndarray
    child_start: np.ndarray | None = None  # index of first child in the level below
    n_children: np.ndarray | None = None
    low: np.ndarray | None = None
    high: np.ndarray | None = None  # rows of low-frequency nodes stay zero

    def __len__(self):
        return len(self.keys)

    @property
    def is_high(self) -> np.ndarray:
        if self.n_children is None:
            return np.zeros(len(self.keys), dtype=bool)
        return self.n_children == 2

    @property
    def high_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.is_high)


@dataclass
class RahtNode:
    depth: int
    pos: tuple
    weight: int
    low: np.ndarray | None
    high: np.ndarray | None
    children: tuple


@dataclass
class RahtTree:
    levels: list
    n_channels: int
    octree_depth: int

    @property
    def binary_depth(self) -> int:
        return 3 * self.octree_depth

    @property
    def root(self) -> RahtNode:
        return self.node(self.binary_depth, 0)

    @property
    def voxel_count(self) -> int:
        return len(self.levels[0])

    @property
    def n_high(self) -> int:
        return int(sum(int(lv.is_high.sum()) for lv in self.levels))

    def node(self, depth: int, index: int) -> RahtNode:
        lv = self.levels[depth]
        children = ()
        if lv.n_children is not None:
            start = int(lv.child_start[index])
            children = tuple(range(start, start + int(lv.n_children[index])))
        is_high = len(children) == 2
        return RahtNode(
            depth=depth,
            pos=tuple(int(v) for v in lv.pos[index]),
            weight=int(lv.weight[index]),
            low=None if lv.low is None else lv.low[index].copy(),
            high=lv.high[index].copy() if (is_high and lv.high is not None) else None,
            children=children,
        )

    def transmission_levels(self):
        """Levels carrying high-frequency nodes, root first."""
        return [d for d in range(self.binary_depth, 0, -1) if self.levels[d].is_high.any()]

    def high_order(self):
        """(depth, node index) of every high-frequency node in transmission order."""
        out = []
        for d in range(self.binary_depth, 0, -1):
            for i in self.levels[d].high_nodes:
                out.append((d, int(i)))
        return out


def build_tree(cloud: VoxelizedCloud) -> RahtTree:
    """Merge tree over ``cloud``'s voxels; leaves carry the voxel attributes."""
    if len(cloud) == 0:
        raise ValueError("cannot build a RAHT tree over an empty cloud")
    keys = cloud.morton_keys()
    order = np.argsort(keys, kind="stable")
    if not np.array_equal(order, np.arange(len(keys))):
        raise ValueError("voxels must be sorted by Morton key")
    leaves = RahtLevel(
        keys=keys,
        pos=cloud.voxels.copy(),
        weight=np.ones(len(keys), dtype=np.int64),
        low=cloud.attributes.astype(np.float64).copy(),
    )
    levels = [leaves]
    for k in range(3 * cloud.depth):
        below = levels[-1]
        parent_keys, start, count = np.unique(below.keys >> 1, return_index=True, return_counts=True)
        pos = below.pos[start].copy()
        pos[:, k % 3] >>= 1
        weight = np.add.reduceat(below.weight, start)
        levels.append(
            RahtLevel(keys=parent_keys, pos=pos, weight=weight, child_start=start, n_children=count)
        )
    tree = RahtTree(levels=levels, n_channels=cloud.n_channels, octree_depth=cloud.depth)
    return tree


def forward_transform(tree: RahtTree) -> RahtTree:
    """Fill ``low`` and ``high`` on every internal level, bottom-up."""
    if tree.levels[0].low is None:
        raise ValueError("leaves carry no attributes")
    for d in range(1, tree.binary_depth + 1):
        below, lv = tree.levels[d - 1], tree.levels[d]
        low = below.low[lv.child_start].copy()
        high = np.zeros_like(low)
        pairs = np.flatnonzero(lv.n_children == 2)
        if len(pairs):
            first = lv.child_start[pairs]
            second = first + 1
            low[pairs], high[pairs] = kernel(
                below.weight[first], below.weight[second], below.low[first], below.low[second]
            )
        lv.low, lv.high = low, high
    return tree


def inverse_level(tree: RahtTree, depth: int, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """Recover the lows of level ``depth - 1`` from the lows/highs at ``depth``."""
    lv, below = tree.levels[depth], tree.levels[depth - 1]
    out = np.empty((len(below), low.shape[1]))
    out[lv.child_start] = low
    pairs = np.flatnonzero(lv.n_children == 2)
    if len(pairs):
        first = lv.child_start[pairs]
        l1, l2 = inverse_kernel(below.weight[first], below.weight[first + 1], low[pairs], high[pairs])
        out[first] = l1
        out[first + 1] = l2
    return out


def high_counts(tree: RahtTree) -> dict:
    return {d: int(tree.levels[d].is_high.sum()) for d in range(1, tree.binary_depth + 1)}


def inverse_transform(tree: RahtTree, dc, highs, return_lows: bool = False):
    """Rebuild leaf attributes from the DC and high coefficients.

    ``highs`` is (n_high, n_channels) in :meth:`RahtTree.high_order` order.
    With ``return_lows`` the per-level reconstructed lows are returned as well
    (index = depth).
    """
    highs = np.asarray(highs, dtype=np.float64).reshape(-1, tree.n_channels)
    if len(highs) != tree.n_high:
        raise ValueError(f"expected {tree.n_high} high coefficients, got {len(highs)}")
    low = np.asarray(dc, dtype=np.float64).reshape(1, tree.n_channels)
    lows = [None] * (tree.binary_depth + 1)
    cursor = 0
    for d in range(tree.binary_depth, 0, -1):
        lv = tree.levels[d]
        lows[d] = low
        idx = lv.high_nodes
        full = np.zeros((len(lv), tree.n_channels))
        full[idx] = highs[cursor : cursor + len(idx)]
        cursor += len(idx)
        low = inverse_level(tree, d, low, full)
    lows[0] = low
    return (low, lows) if return_lows else low


def collect_highs(tree: RahtTree) -> np.ndarray:
    """High coefficients of a transformed tree in transmission order."""
    rows = [tree.levels[d].high[tree.levels[d].high_nodes] for d in range(tree.binary_depth, 0, -1)]
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, tree.n_channels))
