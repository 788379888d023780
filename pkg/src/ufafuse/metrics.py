"""Fusion quality metrics: average gradient, standard deviation, Shannon
entropy, gradient-based edge preservation (Q^AB/F) and SSIM to a reference.

All metrics work on luma (BT.601) for colour input, on the 0-255 scale.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imageio import read_image, to_luma
from .losses import ssim_value

# edge strength / orientation sigmoid constants of the Q^AB/F metric
QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G = 0.9994, -15.0, 0.5
QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A = 0.9879, -22.0, 0.8

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)


@dataclass
class MetricReport:
    avg: float
    std: float
    sen: float
    q_abf: float
    ssim_to_gt: float | None = None


def avg_gradient(img):
    """Mean over interior pixels of sqrt((gx^2 + gy^2) / 2), forward differences."""
    lum = to_luma(img)
    h, w = lum.shape
    if h < 2 or w < 2:
        raise ValueError(f"average gradient needs at least 2x2 pixels, got {h}x{w}")
    base = lum[:-1, :-1]
    gx = lum[:-1, 1:] - base
    gy = lum[1:, :-1] - base
    return float(np.mean(np.sqrt((gx * gx + gy * gy) / 2.0)))


def std_dev(img):
    """Population standard deviation of luma."""
    return float(np.std(to_luma(img)))


def entropy(img):
    """Shannon entropy (bits) of the 256-bin histogram of rounded luma."""
    lum = np.clip(np.rint(to_luma(img)), 0, 255).astype(np.int64)
    hist = np.bincount(lum.ravel(), minlength=256).astype(np.float64)
    p = hist[hist > 0] / lum.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def _sobel(lum):
    p = np.pad(lum, 1, mode="edge")
    h, w = lum.shape
    sx = np.zeros((h, w))
    sy = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            win = p[dy:dy + h, dx:dx + w]
            sx += SOBEL_X[dy, dx] * win
            sy += SOBEL_Y[dy, dx] * win
    return sx, sy


def _edges(lum):
    sx, sy = _sobel(lum)
    strength = np.sqrt(sx * sx + sy * sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.where(sx == 0, np.pi / 2, np.arctan(sy / np.where(sx == 0, 1.0, sx)))
    return strength, angle


def _sig(x, gamma, kappa, sigma):
    return gamma / (1.0 + np.exp(kappa * (x - sigma)))


def _preservation(g_src, a_src, g_f, a_f, normalized):
    hi = np.maximum(g_src, g_f)
    lo = np.minimum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        strength = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0)
    orient = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    qg = _sig(strength, QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G)
    qa = _sig(orient, QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A)
    if normalized:
        qg = qg / _sig(1.0, QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G)
        qa = qa / _sig(1.0, QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A)
    return qg * qa


def q_abf(a, b, f, normalized=True):
    """Edge-preservation score of fused image ``f`` relative to sources ``a`` and ``b``.

    Per pixel, Sobel edge strength and orientation of each source are compared
    with the fused image through two sigmoids; source edge strength weights
    the average. With ``normalized`` (default) each sigmoid is divided by its
    value at perfect preservation, so ``q_abf(a, a, a) == 1`` for any image
    with edges. ``normalized=False`` keeps the raw gamma-scaled sigmoids,
    whose product tops out at about 0.975.
    Returns 0 when neither source has any edge.
    """
    la, lb, lf = to_luma(a), to_luma(b), to_luma(f)
    if not la.shape == lb.shape == lf.shape:
        raise ValueError(f"dimension mismatch: {la.shape}, {lb.shape}, {lf.shape}")
    ga, aa = _edges(la)
    gb, ab = _edges(lb)
    gf, af = _edges(lf)
    qa = _preservation(ga, aa, gf, af, normalized)
    qb = _preservation(gb, ab, gf, af, normalized)
    den = float(np.sum(ga + gb))
    if den == 0.0:
        return 0.0
    return float(min(1.0, max(0.0, np.sum(qa * ga + qb * gb) / den)))


def ssim_to_reference(img, ref):
    """SSIM between two uint8 images, per channel on the [0, 1] scale."""
    return ssim_value(np.asarray(img, dtype=np.float64) / 255.0, np.asarray(ref, dtype=np.float64) / 255.0)


def evaluate(fused, src_a, src_b, gt=None):
    fused, src_a, src_b = np.asarray(fused), np.asarray(src_a), np.asarray(src_b)
    if not fused.shape[:2] == src_a.shape[:2] == src_b.shape[:2]:
        raise ValueError(f"dimension mismatch: {fused.shape}, {src_a.shape}, {src_b.shape}")
    return MetricReport(
        avg=avg_gradient(fused),
        std=std_dev(fused),
        sen=entropy(fused),
        q_abf=q_abf(src_a, src_b, fused),
        ssim_to_gt=None if gt is None else ssim_to_reference(fused, gt),
    )


def mean_report(reports):
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    fields = ("avg", "std", "sen", "q_abf")
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in fields}
    ssims = [r.ssim_to_gt for r in reports]
    out["ssim_to_gt"] = None if any(s is None for s in ssims) else float(np.mean(ssims))
    return MetricReport(**out)


def _match(directory, stem):
    for cand in sorted(Path(directory).glob(f"{stem}.*")):
        if cand.suffix.lower() in (".ppm", ".pgm", ".png"):
            return cand
    raise FileNotFoundError(f"no image named {stem!r} in {directory}")


def evaluate_corpus(fused_dir, src_a_dir, src_b_dir, gt_dir=None, out_csv=None):
    """Evaluate every fused image against same-named sources; optionally write CSV.

    Returns a list of (name, MetricReport) plus a final ("mean", MetricReport).
    """
    fused_paths = sorted(p for p in Path(fused_dir).iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".png"))
    if not fused_paths:
        raise ValueError(f"no fused images in {fused_dir}")
    rows = []
    for fp in fused_paths:
        a = read_image(_match(src_a_dir, fp.stem))
        b = read_image(_match(src_b_dir, fp.stem))
        gt = read_image(_match(gt_dir, fp.stem)) if gt_dir is not None else None
        rows.append((fp.stem, evaluate(read_image(fp), a, b, gt)))
    rows.append(("mean", mean_report(r for _, r in rows)))
    if out_csv is not None:
        write_csv(rows, out_csv)
    return rows


def write_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "avg", "std", "sen", "qabf", "ssim_gt"])
        for name, r in rows:
            d = asdict(r)
            ssim = "" if d["ssim_to_gt"] is None else repr(d["ssim_to_gt"])
            w.writerow([name, repr(d["avg"]), repr(d["std"]), repr(d["sen"]), repr(d["q_abf"]), ssim])


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("avg", "std", "sen", "qabf"):
            r[k] = float(r[k])
        r["ssim_gt"] = float(r["ssim_gt"]) if r["ssim_gt"] else None
    return rows


__all__ = [
    "MetricReport", "avg_gradient", "std_dev", "entropy", "q_abf", "ssim_to_reference",
    "evaluate", "mean_report", "evaluate_corpus", "write_csv", "read_csv",
]
