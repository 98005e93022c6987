"""Synthetic smooth-color clouds for training and testing."""

import numpy as np

from .pointcloud_io import RGB, from_voxels


TEXTURE_STD = 24.0
NOISE_STD = 1.5
OWN_TEXTURE = 0.5  # per-channel share of the texture, relative to the common part


def smooth_cloud(rng, n_voxels=256, depth=5, texture_std=TEXTURE_STD, noise_std=NOISE_STD):
    """A curved surface patch with smoothly varying, partly textured colors.

    Colors are a low-frequency field plus a shared luminance texture whose
    amplitude varies smoothly over the patch, so neighbouring coefficients
    and the three channels are statistically related. ``texture_std=0``
    gives a purely smooth field; the random stream is the same either way.
    """
    size = 1 << depth
    g = np.arange(size)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    freq = rng.uniform(0.5, 2.0, 2) * 2 * np.pi / size
    phase = rng.uniform(0, 2 * np.pi, 2)
    amp = rng.uniform(0.1, 0.3) * size
    zz = size / 2 + amp * np.sin(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1])
    surface = np.column_stack([xx.ravel(), yy.ravel(), np.clip(np.rint(zz.ravel()), 0, size - 1)])
    center = surface[rng.integers(len(surface))]
    dist = np.linalg.norm(surface - center, axis=1) + rng.uniform(0, 1e-3, len(surface))
    voxels = surface[np.argsort(dist)[:n_voxels]].astype(np.int64)

    p = voxels / size
    base = rng.uniform(60, 200, 3)
    field = np.zeros((len(p), 3))
    for _ in range(3):
        k = rng.normal(0, 2.5, 3)
        ph = rng.uniform(0, 2 * np.pi)
        field += np.sin(p @ k * np.pi + ph)[:, None] * rng.normal(0, 20, 3)
    # textured and flat regions: a smooth 0..1 mask scales a shared texture
    mask_k = rng.normal(0, 2.0, 3)
    mask = 0.5 + 0.5 * np.sin(p @ mask_k * np.pi + rng.uniform(0, 2 * np.pi))
    tint = 1.0 + rng.normal(0, 0.2, 3)
    texture = rng.normal(0, 1, (len(p), 1)) * tint + OWN_TEXTURE * rng.normal(0, 1, (len(p), 3))
    texture *= texture_std * (mask**2)[:, None]
    rgb = base + field + texture + rng.normal(0, noise_std, (len(p), 3))
    rgb = np.clip(np.rint(rgb), 0, 255)
    return from_voxels(voxels, rgb, depth, channel_names=list(RGB))


def smooth_corpus(n_clouds, seed, n_voxels=256, depth=5):
    rng = np.random.default_rng(seed)
    return [smooth_cloud(rng, n_voxels, depth) for _ in range(n_clouds)]
