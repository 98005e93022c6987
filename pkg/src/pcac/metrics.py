"""PSNR and bits-per-point reporting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import read_header
from .pointcloud_io import is_rgb, rgb_to_yuv_array

PEAK = 255.0
PSNR_CAP = 999.0


def psnr(reference, test, peak: float = PEAK) -> np.ndarray:
    """Per-channel PSNR in dB; identical channels report ``PSNR_CAP``."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {test.shape}")
    if reference.ndim == 1:
        reference, test = reference[:, None], test[:, None]
    if len(reference) == 0:
        raise ValueError("cannot compute PSNR of empty attribute sets")
    mse = np.mean((reference - test) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak**2 / mse)
    return np.minimum(out, PSNR_CAP)


def bitstream_bpp(data: bytes) -> float:
    """Whole-file bits (header included) over the original point count."""
    header = read_header(data)
    return 8.0 * len(data) / max(header.original_point_count, 1)


@dataclass
class Metrics:
    psnr_y: float
    psnr: list
    channels: list
    bpp: float | None = None
    runtime: dict = field(default_factory=dict)

    def lines(self):
        out = [f"PSNR_Y {self.psnr_y:.4f} dB"]
        out += [f"PSNR_{name} {value:.4f} dB" for name, value in zip(self.channels, self.psnr)]
        if self.bpp is not None:
            out.append(f"BPP {self.bpp:.6f}")
        out += [f"{stage} {sec:.3f} s" for stage, sec in self.runtime.items()]
        return out


def evaluate(original, recon, bitstream: bytes | None = None) -> Metrics:
    """Compare two clouds point by point (same count and ordering).

    Color clouds get PSNR_Y from the BT.601 luminance; other clouds use
    their first channel.
    """
    a, b = original.attributes, recon.attributes
    if a.shape != b.shape:
        raise ValueError(
            f"clouds differ in size: {a.shape[0]} x {a.shape[1]} vs {b.shape[0]} x {b.shape[1]}"
        )
    per_channel = psnr(a, b)
    if is_rgb(original) and is_rgb(recon):
        y = psnr(rgb_to_yuv_array(a)[:, 0], rgb_to_yuv_array(b)[:, 0])[0]
    else:
        y = per_channel[0]
    bpp = bitstream_bpp(bitstream) if bitstream is not None else None
    return Metrics(float(y), [float(v) for v in per_channel], list(original.channel_names), bpp)
