"""Train small entropy models on synthetic clouds and compare coded sizes.

A lighter version of the learning-effectiveness check: fewer clouds and
epochs, so it finishes in about a minute.

    python demos/codec_comparison.py
"""

import time

from pcac import codec
from pcac.metrics import evaluate
from pcac.synthetic import smooth_corpus
from pcac.trainer import TrainConfig, prepare, train

QSTEP = 10.0
train_clouds = smooth_corpus(16, seed=1)
test_clouds = smooth_corpus(6, seed=2)
items = [prepare(c, QSTEP) for c in train_clouds]
points = sum(c.original_point_count for c in test_clouds)

rlgr = sum(codec.encode(c, QSTEP, "rlgr").bits for c in test_clouds)
print(f"{'rlgr':>10}: {rlgr / points:.3f} bpp")

for comps in ("", "H", "HL", "HLC", "HLCS"):
    t = time.perf_counter()
    result = train(items, TrainConfig(epochs=8, components=comps))
    mode = "context" if comps else "factorized"
    bits = sum(codec.encode(c, QSTEP, mode, result.model).bits for c in test_clouds)
    print(f"{comps or 'none':>10}: {bits / points:.3f} bpp  ({bits / rlgr:.3f} x rlgr, "
          f"best epoch {result.best_epoch}, {time.perf_counter() - t:.0f} s)")

# distortion does not depend on the entropy coder
enc = codec.encode(test_clouds[0], QSTEP, "rlgr")
dec = codec.decode(enc.bitstream, test_clouds[0].voxels).cloud
print("\n".join(evaluate(test_clouds[0], dec, enc.bitstream).lines()))
