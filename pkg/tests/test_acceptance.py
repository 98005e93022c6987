"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are echoed at the end of the
pytest run.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from pcac import codec
from pcac.context_model import DensityModel
from pcac.entropy import cross_entropy_bits, pmf_to_cdf, range_encode, rlgr_decode, rlgr_encode
from pcac.entropy.cdf import TOTAL
from pcac.metrics import evaluate
from pcac.pointcloud_io import from_voxels
from pcac.quant import reconstruct, serialize
from pcac.raht import build_tree, collect_highs, forward_transform, high_counts, inverse_transform
from pcac.synthetic import smooth_corpus
from pcac.trainer import TrainConfig, gradient_check, prepare, train

import conftest
from conftest import random_cloud

pytestmark = pytest.mark.acceptance


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_sized_cloud(rng, max_voxels):
    depth = int(rng.integers(4, 10))
    n = int(rng.integers(1, min(max_voxels, 8**depth) + 1))
    return random_cloud(rng, n, depth)


def test_criterion_1_transform_identity_and_energy():
    rng = np.random.default_rng(101)
    clouds = [random_sized_cloud(rng, 10_000) for _ in range(100)]
    worst_abs = worst_rel = 0.0
    start = time.perf_counter()
    for cloud in clouds:
        tree = forward_transform(build_tree(cloud))
        highs = collect_highs(tree)
        back = inverse_transform(tree, tree.root.low, highs)
        worst_abs = max(worst_abs, float(np.abs(back - cloud.attributes).max()))
        energy_in = (cloud.attributes**2).sum(axis=0)
        energy_out = (highs**2).sum(axis=0) + tree.root.low**2
        worst_rel = max(worst_rel, float((np.abs(energy_out - energy_in) / energy_in).max()))
    elapsed = time.perf_counter() - start
    depths = sorted({c.depth for c in clouds})
    ok = worst_abs <= 1e-9 and worst_rel <= 1e-9 and elapsed < 10 and depths == list(range(4, 10))
    report(1, ok, f"max abs {worst_abs:.2e}, energy rel {worst_rel:.2e}, {elapsed:.2f} s, "
                  f"largest {max(len(c) for c in clouds)} voxels")


def test_criterion_2_toy_example():
    # l1 at (0,0), l2 at (0,1), l3 at (1,1): l2 and l3 merge first (h1), then l1 with l4 (h2)
    l1, l2, l3 = 10.0, 20.0, 40.0
    cloud = from_voxels([[0, 0, 0], [0, 1, 0], [1, 1, 0]], [[l1], [l2], [l3]], 1)
    tree = forward_transform(build_tree(cloud))
    l4 = (l2 + l3) / np.sqrt(2)
    expected_highs = [(l4 - np.sqrt(2) * l1) / np.sqrt(3), (l3 - l2) / np.sqrt(2)]
    expected_dc = (l1 + np.sqrt(2) * l4) / np.sqrt(3)
    highs = collect_highs(tree)[:, 0]
    counts = high_counts(tree)
    h1 = tree.node(1, int(tree.levels[1].high_nodes[0]))
    h2 = tree.node(2, int(tree.levels[2].high_nodes[0]))
    shape_ok = (
        counts == {1: 1, 2: 1, 3: 0}
        and [tree.node(0, c).pos for c in h1.children] == [(0, 1, 0), (1, 1, 0)]
        and [tree.node(1, c).weight for c in h2.children] == [1, 2]
        and tree.levels[1].is_high.sum() == 1
        and (~tree.levels[1].is_high).sum() == 1
        and tree.root.weight == 3
    )
    ok = shape_ok and len(highs) == 2 and np.allclose(highs, expected_highs, atol=1e-12) \
        and np.isclose(tree.root.low[0], expected_dc, atol=1e-12)
    report(2, ok, f"highs {np.round(highs, 4).tolist()}, DC {tree.root.low[0]:.4f}, tree shape {'ok' if shape_ok else 'wrong'}")


def test_criterion_3_quantization_bound(color_fixture, textured_fixture, small_corpus):
    rng = np.random.default_rng(103)
    fixtures = [color_fixture, textured_fixture, *small_corpus] + [random_sized_cloud(rng, 2000) for _ in range(10)]
    worst = 0.0
    for cloud in fixtures:
        tree = forward_transform(build_tree(cloud))
        for q in (5.0, 10.0, 20.0, 40.0):
            recon = reconstruct(tree, serialize(tree, q))
            err = np.linalg.norm(recon - cloud.attributes, axis=0)
            bound = q / 2 * np.sqrt(len(cloud) - 1)
            worst = max(worst, float((err / bound).max()) if bound > 0 else float(err.max()))

    def psnr_y_at_10(cloud):
        enc = codec.encode(cloud, 10.0, "rlgr")
        return evaluate(cloud, codec.decode(enc.bitstream, cloud.voxels).cloud).psnr_y

    smooth, textured = psnr_y_at_10(color_fixture), psnr_y_at_10(textured_fixture)
    ok = worst <= 1.0 and smooth > 40 and len(color_fixture) == 512
    report(3, ok, f"worst error / bound {worst:.3f} over {len(fixtures)} fixtures, PSNR_Y at Q=10 {smooth:.2f} dB "
                  f"(textured variant, informational: {textured:.2f} dB)")


def test_criterion_4_entropy_lossless(trained_models):
    rng = np.random.default_rng(104)
    models = {"rlgr": None, **trained_models}
    failures, total = 0, 0
    for i in range(100):
        cloud = random_cloud(rng, int(rng.integers(1, 300)), int(rng.integers(3, 7)))
        q = float(rng.choice([1.0, 5.0, 10.0, 40.0]))
        for mode, model in models.items():
            enc = codec.encode(cloud, q, mode, model)
            dec = codec.decode(enc.bitstream, cloud.voxels, model)
            total += 1
            if not (np.array_equal(dec.stream.symbols, enc.stream.symbols)
                    and np.array_equal(dec.header.dc, enc.stream.dc)):
                failures += 1
    # a skewed and a flat 100k-symbol stream, each under its own PMF
    overheads = []
    for pmf in (rng.dirichlet(np.ones(40) * 0.2), np.full(257, 1 / 257)):
        cdf = pmf_to_cdf(pmf)
        symbols = rng.choice(len(pmf), 100_000, p=pmf)
        bits = 8 * len(range_encode(symbols, cdf))
        ce = cross_entropy_bits(symbols, np.diff(cdf) / TOTAL)
        overheads.append((bits, ce))
    rate_ok = all(b <= 1.01 * ce + 256 for b, ce in overheads)
    ok = failures == 0 and rate_ok
    ratios = ", ".join(f"{b / ce:.4f}" for b, ce in overheads)
    report(4, ok, f"{total - failures}/{total} roundtrips bit-identical, range coder bits / CE = {ratios}")


def test_criterion_5_gradient_check():
    rng = np.random.default_rng(105)
    cloud = random_cloud(rng, 16, 3)
    sample = prepare(cloud, 10.0).sample
    model = DensityModel(3, "HLCS", seed=5)
    perturb = np.random.default_rng(6)
    for k, v in model.params.items():
        model.params[k] = v + perturb.normal(0, 0.1, v.shape)
    # a group whose probabilities sit on the floor has a flat loss and says nothing
    _, grads = model.loss_and_grad(sample)
    norms = {g: float(np.sqrt(sum((grads[n] ** 2).sum() for n in names)))
             for g, names in model.parameter_groups().items()}
    start = time.perf_counter()
    errors = gradient_check(model, sample)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and elapsed < 60 and len(errors) == 9 and min(norms.values()) > 1e-2
    report(5, ok, f"{len(errors)} groups, worst {worst} {errors[worst]:.2e}, "
                  f"smallest gradient norm {min(norms.values()):.1f}, {elapsed:.1f} s")


@pytest.mark.slow
def test_criterion_6_learning_effectiveness():
    start = time.perf_counter()
    train_items = [prepare(c, 10.0) for c in smooth_corpus(50, 1)]
    held_out = smooth_corpus(20, 2)
    rlgr_bits = sum(codec.encode(c, 10.0, "rlgr").bits for c in held_out)
    bits = {}
    for comps in ("", "H", "HL", "HLC", "HLCS"):
        model = train(train_items, TrainConfig(epochs=20, lr=0.01, seed=0, components=comps)).model
        mode = "context" if comps else "factorized"
        bits[comps] = sum(codec.encode(c, 10.0, mode, model).bits for c in held_out)
    elapsed = time.perf_counter() - start
    chain = [bits[c] for c in ("", "H", "HL", "HLC", "HLCS")]
    vs_fac = bits["HLCS"] / bits[""]
    vs_rlgr = bits["HLCS"] / rlgr_bits
    monotone = all(a >= b for a, b in zip(chain, chain[1:])) and chain[-1] < chain[0]
    ok = vs_fac <= 0.95 and vs_rlgr <= 0.90 and monotone and elapsed < 15 * 60
    report(6, ok, f"HLCS/factorized {vs_fac:.3f}, HLCS/RLGR {vs_rlgr:.3f}, "
                  f"bits none>H>HL>HLC>HLCS {chain}, RLGR {rlgr_bits}, {elapsed:.0f} s")


def _pipeline(root):
    run = lambda *argv: subprocess.run([sys.executable, "-m", "pcac", *map(str, argv)],
                                       check=True, capture_output=True, text=True, cwd=root)
    run("synth", "--out", "corpus", "--count", "6", "--seed", "4", "--voxels", "200", "--depth", "5")
    run("train", "--corpus", "corpus", "--out", "model.bin", "--epochs", "3", "--seed", "7",
        "--depth", "5", "--loss-csv", "loss.csv")
    run("encode", "--input", "corpus/cloud_000.ply", "--output", "a.bin", "--geometry-out", "geom.ply",
        "--depth", "5", "--model", "model.bin")
    run("decode", "--input", "a.bin", "--geometry", "geom.ply", "--output", "recon.ply", "--model", "model.bin")
    run("rd-sweep", "--input", "corpus/cloud_001.ply", "--model", "model.bin", "--depth", "5", "--csv", "rd.csv")
    return {name: (root / name).read_bytes() for name in ("model.bin", "loss.csv", "a.bin", "recon.ply", "rd.csv")}


def test_criterion_7_determinism(tmp_path):
    (tmp_path / "one").mkdir()
    (tmp_path / "two").mkdir()
    first, second = _pipeline(tmp_path / "one"), _pipeline(tmp_path / "two")
    differing = [name for name in first if first[name] != second[name]]
    report(7, not differing, f"{len(first)} artifacts compared, differing: {differing or 'none'}")


def test_criterion_8_rlgr():
    x = np.rint(np.random.default_rng(108).laplace(0, 2.0, 100_000)).astype(np.int64)
    payload = rlgr_encode(x)
    back = rlgr_decode(payload)
    _, counts = np.unique(x, return_counts=True)
    entropy = float(-(counts * np.log2(counts / counts.sum())).sum())
    ratio = 8 * len(payload) / entropy
    ok = np.array_equal(back, x) and ratio <= 1.15
    report(8, ok, f"roundtrip {'exact' if np.array_equal(back, x) else 'broken'}, bits / empirical entropy {ratio:.4f}")
