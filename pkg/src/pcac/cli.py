"""Command-line driver: encode, decode, train, eval, rd-sweep, synth."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import codec
from .context_model import DensityModel, ModelError, parse_components
from .entropy import DecodeError
from .metrics import evaluate
from .pointcloud_io import (
    PlyFormatError,
    PointCloud,
    UnsupportedFormatError,
    from_voxels,
    load_ply,
    save_ply,
    voxelize,
)
from .synthetic import smooth_corpus
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("pcac")


class CliError(Exception):
    pass


def _load_model(path):
    return DensityModel.load(path) if path else None


def _threads() -> int:
    raw = os.environ.get("THREADS", "")
    try:
        return max(1, int(raw)) if raw else min(4, os.cpu_count() or 1)
    except ValueError:
        raise CliError(f"THREADS must be an integer, got {raw!r}") from None


def _parse_qsteps(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad qstep list {text!r}") from None
    if not values or any(not v > 0 for v in values):
        raise argparse.ArgumentTypeError("qsteps must be positive numbers")
    return values


def _voxelized_geometry(cloud):
    """The voxelized cloud as a PLY-ready PointCloud (integer positions)."""
    return PointCloud(cloud.voxels.astype(np.float64), cloud.attributes, cloud.channel_names)


def _read_geometry(path, depth):
    pts = load_ply(path)
    voxels = np.rint(pts.positions).astype(np.int64)
    if not np.array_equal(voxels, pts.positions):
        raise CliError(f"{path}: geometry positions are not integer voxel coordinates")
    if np.any(voxels < 0) or np.any(voxels >= 1 << depth):
        raise CliError(f"{path}: geometry does not fit a depth-{depth} grid")
    return voxels


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------- commands


def cmd_encode(args):
    model = _load_model(args.model)
    if args.mode != "rlgr" and model is None:
        raise CliError(f"--model is required for mode {args.mode}")
    cloud = voxelize(load_ply(args.input), args.depth)
    start = time.perf_counter()
    result = codec.encode(cloud, args.qstep, args.mode, model)
    elapsed = time.perf_counter() - start
    Path(args.output).write_bytes(result.bitstream)
    if args.geometry_out:
        save_ply(_voxelized_geometry(cloud), args.geometry_out)
    print(
        f"{args.output}: {len(cloud)} voxels, {result.bits} bits, {result.bpp:.6f} bpp "
        f"({args.mode}, qstep {result.header.qstep:g}, encode {elapsed:.3f} s)"
    )


def cmd_decode(args):
    data = Path(args.input).read_bytes()
    header = codec.read_header(data)
    voxels = _read_geometry(args.geometry, header.depth)
    start = time.perf_counter()
    result = codec.decode(data, voxels, _load_model(args.model))
    elapsed = time.perf_counter() - start
    save_ply(_voxelized_geometry(result.cloud), args.output)
    print(f"{args.output}: {len(voxels)} voxels decoded ({header.mode}, decode {elapsed:.3f} s)")


def _load_corpus(directory, depth):
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise CliError(f"no .ply files in {directory}")
    clouds = []
    for path in files:
        try:
            cloud = voxelize(load_ply(path), depth)
        except (PlyFormatError, UnsupportedFormatError, ValueError, OSError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if clouds and cloud.n_channels != clouds[0].n_channels:
            log.warning("skipping %s: %d channels, corpus has %d", path.name, cloud.n_channels, clouds[0].n_channels)
            continue
        clouds.append(cloud)
    if not clouds:
        raise CliError(f"every PLY file in {directory} was unreadable")
    return clouds


def cmd_train(args):
    clouds = _load_corpus(args.corpus, args.depth)
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        qstep=args.qstep,
        components=parse_components(args.components),
    )
    result = train(clouds, config)
    result.model.save(args.out)
    print(f"initial loss {result.initial_loss:.6f} nats")
    for epoch, nats, bpp in result.history:
        print(f"epoch {epoch}: {nats:.6f} nats, {bpp:.6f} bpp")
    if args.loss_csv:
        result.write_csv(args.loss_csv)
    print(f"model written to {args.out} ({len(clouds)} clouds, components {config.components or 'none'})")


def cmd_eval(args):
    original, recon = load_ply(args.original), load_ply(args.recon)
    data = Path(args.bitstream).read_bytes() if args.bitstream else None
    for line in evaluate(original, recon, data).lines():
        print(line)


def _sweep_point(cloud, qstep, mode, model):
    result = codec.encode(cloud, qstep, mode, model)
    decoded = codec.decode(result.bitstream, cloud.voxels, model).cloud
    return qstep, evaluate(cloud, decoded, result.bitstream)


def cmd_rd_sweep(args):
    model = _load_model(args.model)
    if args.mode != "rlgr" and model is None:
        raise CliError(f"--model is required for mode {args.mode}")
    cloud = voxelize(load_ply(args.input), args.depth)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        points = list(pool.map(lambda q: _sweep_point(cloud, q, args.mode, model), args.qsteps))
    header = ["qstep", "bpp", "psnr_y"] + [f"psnr_{n}" for n in cloud.channel_names] + ["mode"]
    rows = []
    for qstep, m in points:
        rows.append(
            [f"{qstep:g}", f"{m.bpp:.6f}", f"{m.psnr_y:.6f}"] + [f"{v:.6f}" for v in m.psnr] + [args.mode]
        )
        print(f"qstep {qstep:g}: {m.bpp:.6f} bpp, PSNR_Y {m.psnr_y:.4f} dB")
    _write_csv(args.csv, header, rows)


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(smooth_corpus(args.count, args.seed, args.voxels, args.depth)):
        save_ply(_voxelized_geometry(cloud), out / f"cloud_{i:03d}.ply")
    print(f"wrote {args.count} clouds to {out}")


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="pcac", description="Point cloud attribute codec")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="voxelize a PLY and code its attributes")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--geometry-out", help="write the voxelized cloud (geometry for decode)")
    p.add_argument("--depth", type=int, default=9)
    p.add_argument("--qstep", type=float, default=10.0)
    p.add_argument("--mode", choices=sorted(codec.MODES), default="context")
    p.add_argument("--model")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="rebuild attributes on separately sent geometry")
    p.add_argument("--input", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--model")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="fit an entropy model on a directory of PLY files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qstep", type=float, default=10.0)
    p.add_argument("--depth", type=int, default=9)
    p.add_argument("--components", default="HLCS", help="subset of HLCS, or 'none' for factorized")
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR (and BPP) of a reconstruction")
    p.add_argument("--original", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--bitstream")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rd-sweep", help="rate-distortion points over several qsteps")
    p.add_argument("--input", required=True)
    p.add_argument("--qsteps", type=_parse_qsteps, default=[5.0, 10.0, 20.0, 40.0])
    p.add_argument("--mode", choices=sorted(codec.MODES), default="context")
    p.add_argument("--model")
    p.add_argument("--depth", type=int, default=9)
    p.add_argument("--csv", required=True)
    p.set_defaults(func=cmd_rd_sweep)

    p = sub.add_parser("synth", help="write a synthetic smooth-color corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--voxels", type=int, default=256)
    p.add_argument("--depth", type=int, default=5)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except (
        CliError,
        codec.BitstreamError,
        DecodeError,
        ModelError,
        TrainingDiverged,
        PlyFormatError,
        UnsupportedFormatError,
        ValueError,
        OSError,
    ) as exc:
        print(f"pcac {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
