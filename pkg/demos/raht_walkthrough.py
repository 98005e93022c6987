"""Walk a tiny cloud through the transform, the quantizer and back.

Run with ``python demos/raht_walkthrough.py``.
"""

import numpy as np

from pcac.pointcloud_io import from_voxels
from pcac.quant import reconstruct, serialize
from pcac.raht import build_tree, collect_highs, forward_transform, high_counts

# Three occupied cells on a 2x2 grid: one alone in its row, two neighbours along x.
cloud = from_voxels([[0, 0, 0], [0, 1, 0], [1, 1, 0]], [[10.0], [20.0], [40.0]], depth=1)
tree = forward_transform(build_tree(cloud))

print("binary levels:", tree.binary_depth)
print("merges per level:", high_counts(tree))
for d in range(1, tree.binary_depth + 1):
    lv = tree.levels[d]
    kinds = ["high" if h else "pass" for h in lv.is_high]
    print(f"  level {d}: weights {lv.weight.tolist()} -> {kinds}")

highs = collect_highs(tree)[:, 0]
print("high-frequency coefficients (root first):", np.round(highs, 4).tolist())
print("DC:", round(float(tree.root.low[0]), 4), "= sum / sqrt(3) =", round(70 / np.sqrt(3), 4))

energy = (highs**2).sum() + tree.root.low[0] ** 2
print("energy in / out:", (cloud.attributes**2).sum(), round(float(energy), 9))

for q in (1.0, 10.0, 40.0):
    stream = serialize(tree, q)
    recon = reconstruct(tree, stream)[:, 0]
    print(f"Q={q:>4}: symbols {stream.symbols.tolist()}, recon {np.round(recon, 2).tolist()}")
