"""Synthetic multi-focus training triplets from image + saliency-label pairs.

Each source image is mean-blurred as a whole, its label is thresholded into
a binary focus map, and the map selects per pixel between sharp and blurred
copies: the near-focused image is sharp where the map is 1, the far-focused
image is sharp where it is 0. All arithmetic is integer, so
``near + far == sharp + blurred`` holds exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_image, to_luma, write_image

log = logging.getLogger(__name__)

# closed intervals of mean-filter sizes, one per blur group
BLUR_GROUPS = ((2, 3), (4, 5), (5, 7), (8, 10))
LABEL_THRESHOLD = 128
IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


@dataclass
class ImageTriplet:
    near: np.ndarray
    far: np.ndarray
    gt: np.ndarray
    focus_map: np.ndarray  # uint8 {0, 1}
    blur_group: int
    kernel_size: int


@dataclass
class ManifestEntry:
    near: Path
    far: Path
    gt: Path
    focus_map: Path
    blur_group: int
    kernel_size: int
    seed: int


def mean_blur(img, k):
    """k x k box mean, rounded half-up, replicate-padded borders.

    For even k the window covers rows ``y - k//2 .. y + k//2 - 1`` (likewise
    for columns), i.e. it leans towards the top-left.
    """
    img = np.asarray(img)
    if k < 2:
        raise ValueError(f"mean filter size must be >= 2, got {k}")
    h, w = img.shape[:2]
    if k > h or k > w:
        raise ValueError(f"mean filter size {k} exceeds image size {h}x{w}")
    before, after = k // 2, k - 1 - k // 2
    pad = [(before, after), (before, after)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img.astype(np.int64), pad, mode="edge")
    # summed-area table with a zero row/column in front
    sat = np.zeros((p.shape[0] + 1, p.shape[1] + 1) + p.shape[2:], dtype=np.int64)
    sat[1:, 1:] = p.cumsum(axis=0).cumsum(axis=1)
    total = sat[k:k + h, k:k + w] - sat[:h, k:k + w] - sat[k:k + h, :w] + sat[:h, :w]
    area = k * k
    return ((2 * total + area) // (2 * area)).astype(np.uint8)


def sample_kernel(group, rng):
    if group not in range(len(BLUR_GROUPS)):
        raise ValueError(f"blur group must be 0..{len(BLUR_GROUPS) - 1}, got {group}")
    lo, hi = BLUR_GROUPS[group]
    return int(rng.integers(lo, hi + 1))


def binarize_label(label, threshold=LABEL_THRESHOLD):
    """1 where the label is >= threshold, else 0."""
    label = np.asarray(label)
    if label.ndim == 3:
        label = label[..., 0] if label.shape[2] == 1 else np.rint(to_luma(label))
    return (label >= threshold).astype(np.uint8)


def compose_pair(sharp, blurred, focus_map):
    """Return (near, far) by per-pixel selection through a binary focus map."""
    sharp, blurred, focus_map = np.asarray(sharp), np.asarray(blurred), np.asarray(focus_map)
    if sharp.shape != blurred.shape or sharp.shape[:2] != focus_map.shape[:2]:
        raise ValueError(f"dimension mismatch: {sharp.shape}, {blurred.shape}, {focus_map.shape}")
    if not np.isin(focus_map, (0, 1)).all():
        raise ValueError("focus map must contain only 0 and 1")
    sel = focus_map.astype(bool)
    if sharp.ndim == 3 and sel.ndim == 2:
        sel = sel[..., None]
    near = np.where(sel, sharp, blurred)
    far = np.where(sel, blurred, sharp)
    return near, far


def make_triplet(src, label, group, rng):
    k = sample_kernel(group, rng)
    blurred = mean_blur(src, k)
    fmap = binarize_label(label)
    near, far = compose_pair(src, blurred, fmap)
    return ImageTriplet(near, far, np.array(src, copy=True), fmap, group, k)


def image_seed(seed, index):
    """Deterministic per-image seed derived from the global seed and index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def _list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_label(labels_dir, stem):
    for suffix in IMAGE_SUFFIXES:
        cand = Path(labels_dir) / f"{stem}{suffix}"
        if cand.exists():
            return cand
    return None


def generate(corpus_dir, labels_dir, out_dir, groups=(0, 1, 2, 3), seed=0, count=None):
    """Write triplets for every source image (cycling when ``count`` exceeds the corpus).

    Blur groups are assigned round-robin over ``groups`` in output order.
    Returns the manifest entries; the manifest file is ``out_dir/manifest.tsv``.
    """
    corpus_dir, labels_dir, out_dir = Path(corpus_dir), Path(labels_dir), Path(out_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"source directory not found: {corpus_dir}")
    if not labels_dir.is_dir():
        raise FileNotFoundError(f"label directory not found: {labels_dir}")
    groups = list(groups)
    if not groups:
        raise ValueError("at least one blur group is required")
    for g in groups:
        sample_kernel(g, np.random.default_rng(0))  # validates the group id

    pairs = []
    for src in _list_images(corpus_dir):
        label = _find_label(labels_dir, src.stem)
        if label is None:
            log.warning("no label for %s, skipping", src.name)
            continue
        pairs.append((src, label))
    if not pairs:
        raise ValueError(f"no usable source/label pairs in {corpus_dir}")
    count = len(pairs) if count is None else int(count)
    if count < 1:
        raise ValueError("count must be >= 1")

    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx in range(count):
        src_path, label_path = pairs[idx % len(pairs)]
        src = read_image(src_path, mode="rgb")
        label = read_image(label_path, mode="gray")
        if label.shape != src.shape[:2]:
            log.warning("label size mismatch for %s, skipping", src_path.name)
            continue
        group = groups[idx % len(groups)]
        s = image_seed(seed, idx)
        trip = make_triplet(src, label, group, np.random.default_rng(s))
        stem = f"{idx:06d}_{src_path.stem}"
        paths = {}
        for part, arr in (("near", trip.near), ("far", trip.far), ("gt", trip.gt)):
            paths[part] = out_dir / f"{stem}_{part}.ppm"
            write_image(arr, paths[part])
        paths["map"] = out_dir / f"{stem}_map.pgm"
        write_image(trip.focus_map * np.uint8(255), paths["map"])
        entries.append(ManifestEntry(paths["near"], paths["far"], paths["gt"], paths["map"], group, trip.kernel_size, s))
    if not entries:
        raise ValueError("no triplets were generated")
    write_manifest(entries, out_dir / "manifest.tsv")
    return entries


def write_manifest(entries, path):
    """One tab-separated line per entry: near far gt map group k seed (paths relative)."""
    path = Path(path)
    base = path.parent
    lines = []
    for e in entries:
        rel = [_rel(p, base) for p in (e.near, e.far, e.gt, e.focus_map)]
        lines.append("\t".join(rel + [str(e.blur_group), str(e.kernel_size), str(e.seed)]))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    tmp.replace(path)


def _rel(p, base):
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return Path(p).resolve().as_posix()


def read_manifest(path):
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(fields)}")
        near, far, gt, fmap = (path.parent / f for f in fields[:4])
        entries.append(ManifestEntry(near, far, gt, fmap, int(fields[4]), int(fields[5]), int(fields[6])))
    if not entries:
        raise ValueError(f"{path}: manifest is empty")
    return entries
