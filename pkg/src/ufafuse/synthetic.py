"""Procedural test scenes: textured RGB images with soft saliency labels.

Used wherever a real image corpus is unavailable (tests, demos, the
self-check). Everything is driven by a numpy Generator so scenes are
reproducible.
"""

import numpy as np
from scipy import ndimage


def scene(rng, size=64):
    """Return (rgb uint8 (size, size, 3), label uint8 (size, size))."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # low-frequency colour wash
    base = np.stack([ndimage.gaussian_filter(rng.random((h, w)), size / 6) for _ in range(3)], axis=-1)
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    img = 0.25 + 0.5 * base

    # medium texture: stripes and checker blocks
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(5, 11)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
    cell = int(rng.integers(4, 9))
    checker = ((yy // cell + xx // cell) % 2).astype(np.float64)
    tint = rng.uniform(0.3, 1.0, size=3)
    img = img * (0.75 + 0.25 * stripes[..., None]) + 0.15 * (checker[..., None] - 0.5) * tint

    # fine grain
    grain = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (0.7, 0.7, 0))
    img += 0.06 * grain

    # a few hard-edged discs
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(size / 12, size / 5)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = rng.uniform(0.05, 0.95, size=3)

    rgb = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)

    # saliency label: an ellipse with a soft ramp at its boundary
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    ry, rx = rng.uniform(0.2, 0.35) * h, rng.uniform(0.2, 0.35) * w
    dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    label = np.clip((1.25 - dist) / 0.5, 0, 1)
    return rgb, np.rint(label * 255).astype(np.uint8)


def write_corpus(directory_src, directory_labels, n, seed=0, size=64):
    """Write ``n`` scenes as PPM sources and PGM labels with matching names."""
    from pathlib import Path

    from .imageio import write_image

    src, lab = Path(directory_src), Path(directory_labels)
    src.mkdir(parents=True, exist_ok=True)
    lab.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        rgb, label = scene(rng, size)
        write_image(rgb, src / f"scene{i:04d}.ppm")
        write_image(label, lab / f"scene{i:04d}.pgm")
    return src, lab
