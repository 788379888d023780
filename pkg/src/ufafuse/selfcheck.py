"""Built-in verification suite: gradient checks plus invariant checks.

Runs in well under two minutes on one core. ``run()`` returns a list of
:class:`CheckResult`; the CLI turns any failure into exit status 3.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np

from . import datasetgen, gradcheck, metrics, synthetic
from . import tensor as T
from .gradcheck import CheckResult
from .imageio import read_image, write_image
from .network import FusionNetwork, dump_attention


def _timed(name, fn):
    t0 = time.perf_counter()
    try:
        passed, err, n, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, err, n, detail = False, float("nan"), 0, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, passed, err, n, time.perf_counter() - t0, detail)


def conv_reference(x, w, b, padding):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    out[bi, oc, y, xx] = np.sum(xp[bi, :, y:y + kh, xx:xx + kw] * w[oc]) + b[oc]
    return out


def _conv_oracle(rng, instances=30):
    worst = 0.0
    for _ in range(instances):
        k = int(rng.choice([1, 3, 7]))
        n, c, o = (int(v) for v in rng.integers(1, 5, size=3))
        pad = k // 2
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o)
        got = T.conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(b.reshape(1, o, 1, 1)), padding=pad).data
        ref = conv_reference(x, wt, b, pad)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0))))
    return worst < 1e-5, worst, instances, ""


def _attention(rng, instances=10):
    net = FusionNetwork.initialize(int(rng.integers(2 ** 31)))
    worst = 0.0
    for _ in range(instances):
        a = rng.random((1, 3, 12, 12)).astype(np.float32)
        b = rng.random((1, 3, 12, 12)).astype(np.float32)
        m = dump_attention([a, b], net)
        ms = dump_attention([b, a], net)
        same = dump_attention([a, a], net)
        errs = [
            np.abs(m.channel_maps[0].data + m.channel_maps[1].data - 1).max(),
            np.abs(m.spatial_maps[0].data + m.spatial_maps[1].data - 1).max(),
            np.abs(m.channel_maps[0].data - ms.channel_maps[1].data).max(),
            np.abs(m.spatial_maps[0].data - ms.spatial_maps[1].data).max(),
        ] + [np.abs(t.data - 0.5).max() for t in same.channel_maps + same.spatial_maps]
        worst = max(worst, float(max(errs)))
    return worst < 1e-5, worst, instances, ""


def _dataset(rng, instances=8):
    bad = 0
    with tempfile.TemporaryDirectory() as tmp:
        src, lab = synthetic.write_corpus(Path(tmp, "src"), Path(tmp, "lab"), instances,
                                          seed=int(rng.integers(2 ** 31)), size=32)
        entries = datasetgen.generate(src, lab, Path(tmp, "out"), seed=7)
        for e in entries:
            near, far, gt = (read_image(p, "rgb").astype(np.int32) for p in (e.near, e.far, e.gt))
            fmap = read_image(e.focus_map, "gray") > 0
            blurred = datasetgen.mean_blur(gt.astype(np.uint8), e.kernel_size).astype(np.int32)
            if not np.array_equal(near + far, gt + blurred):
                bad += 1
            if not (np.array_equal(near[fmap], gt[fmap]) and np.array_equal(far[~fmap], gt[~fmap])):
                bad += 1
    return bad == 0, float(bad), instances, "" if bad == 0 else f"{bad} identity violations"


def _pnm(rng, instances=20):
    bad = 0
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(instances):
            h, w = (int(v) for v in rng.integers(1, 20, size=2))
            shape = (h, w, 3) if i % 2 else (h, w)
            img = rng.integers(0, 256, size=shape, dtype=np.uint8)
            path = Path(tmp, f"x{i}.{'ppm' if i % 2 else 'pgm'}")
            write_image(img, path)
            if not np.array_equal(read_image(path), img):
                bad += 1
    return bad == 0, float(bad), instances, ""


def _metrics(rng, instances=5):
    worst = 0.0
    for _ in range(instances):
        a, _ = synthetic.scene(rng, 32)
        worst = max(worst, abs(1.0 - metrics.q_abf(a, a, a)))
        flat = np.full_like(a, 90)
        worst = max(worst, metrics.avg_gradient(flat), metrics.std_dev(flat), metrics.entropy(flat))
    return worst < 1e-9, worst, instances, ""


def run(seed=0, instances=20, network_instances=20, log=None):
    """Run every check; ``log`` (if given) is called with each result as it completes."""
    results = []

    def emit(r):
        results.append(r)
        if log is not None:
            log(r)

    rng = np.random.default_rng(seed)
    for name, builder in gradcheck.OP_CASES.items():
        emit(gradcheck.run_check(name, builder, "32", instances, seed))
    for name, builder in gradcheck.OP_CASES.items():
        emit(gradcheck.run_check(name, builder, "64", instances, seed))
    emit(gradcheck.run_check("network", gradcheck.network_case, "64", network_instances, seed))
    emit(_timed("conv2d vs nested loops", lambda: _conv_oracle(rng)))
    emit(_timed("attention normalization and symmetry", lambda: _attention(rng)))
    emit(_timed("dataset sum identity and focus regions", lambda: _dataset(rng)))
    emit(_timed("PPM/PGM round trip", lambda: _pnm(rng)))
    emit(_timed("metric fixed points", lambda: _metrics(rng)))
    return results
