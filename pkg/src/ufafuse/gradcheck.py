"""Finite-difference gradient checks and the invariant suite behind ``selfcheck``.

Each check draws random instances, builds a scalar loss ``sum(R * op(x))``
with a fixed random ``R`` and compares the reverse-mode gradient against
central differences at randomly probed coordinates.

The step is 1e-3 relative to the probed value. Central differences at steps
``h`` and ``h/2`` are combined by Richardson extrapolation, which cancels
the O(h^2) truncation term without shrinking the step into round-off.

Two precisions are checked. In 64-bit mode everything runs in float64 and
the tolerance is 1e-6. In 32-bit mode the analytic gradient comes from a
float32 graph and is compared, at tolerance 1e-3, with differences taken on
a float64 twin of the same instance: float32 forward passes are too coarse
to difference at this step, so the twin supplies the reference.

The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``
where ``floor`` is 1e-4 of the largest gradient magnitude of the instance,
so coordinates whose true gradient is numerically zero do not divide by zero.

Piecewise-linear ops (LeakyReLU, |x|, channel max) are differenced with
their branch choices frozen at the base point (see ``tensor.BranchTape``).
A full network has ~1e5 LeakyReLU inputs, and any step large enough to beat
round-off moves some of them across zero; freezing removes that error while
still checking backward against the exact local derivative.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .network import FusionNetwork, layer_plan
from .tensor import Tensor

STEP = 1e-3
FLOOR = 1e-4
MODES = {"32": (np.float32, 1e-3), "64": (np.float64, 1e-6)}  # analytic dtype, tolerance


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float = 0.0
    instances: int = 0
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" {self.detail}" if self.detail else ""
        return (f"{status} {self.name}: max error {self.max_error:.3g} over {self.instances} instances "
                f"({self.seconds:.1f}s){extra}")


@dataclass
class Case:
    """One random instance: ``fn(*inputs) -> Tensor`` plus the inputs to probe."""

    fn: object
    inputs: list
    probe: list = field(default_factory=list)  # per input: number of coordinates to probe (None = all)


def _loss_value(fn, inputs, weights, tape=None):
    if tape is None:
        out = fn(*inputs)
    else:
        with tape.replaying():
            out = fn(*inputs)
    return float(np.sum(out.data.astype(np.float64) * weights))


def _central(case, flat, c, h, weights, tape):
    orig = flat[c]
    flat[c] = orig + h
    f_up = _loss_value(case.fn, case.inputs, weights, tape)
    flat[c] = orig - h
    f_down = _loss_value(case.fn, case.inputs, weights, tape)
    flat[c] = orig
    return (f_up - f_down) / (2.0 * h)


def numeric_derivative(case, flat, c, weights, tape=None, step=STEP):
    """Richardson-extrapolated central difference of the weighted loss at ``flat[c]``.

    With a recorded ``tape`` the piecewise ops replay their base-point
    branches, so the difference never straddles a kink.
    """
    h = step * max(1.0, abs(float(flat[c])))
    d1 = _central(case, flat, c, h, weights, tape)
    d2 = _central(case, flat, c, h / 2.0, weights, tape)
    return (4.0 * d2 - d1) / 3.0


def check_case(case, rng, reference=None):
    """Max relative error between analytic and numeric gradients for one instance.

    ``reference``, when given, is a float64 twin of ``case`` used for the
    numeric side; its inputs are overwritten with ``case``'s values first.
    """
    ref = reference or case
    for t, r in zip(case.inputs, ref.inputs):
        t.zero_grad()
        if r is not t:
            r.data[...] = t.data
    tape = T.BranchTape()
    if ref is not case:
        with tape.recording():
            ref.fn(*ref.inputs)  # branch choices of the twin, at the same point
        out = case.fn(*case.inputs)
    else:
        with tape.recording():
            out = case.fn(*case.inputs)
    weights = rng.standard_normal(out.shape)
    T.sum_(T.mul(out, Tensor(weights.astype(out.dtype), dtype=out.dtype))).backward()

    grads = [(t.grad if t.grad is not None else np.zeros_like(t.data)).astype(np.float64).reshape(-1)
             for t in case.inputs]
    scale = max((float(np.abs(g).max()) for g, t in zip(grads, case.inputs) if t.requires_grad), default=0.0)
    floor = max(FLOOR * scale, np.finfo(np.float64).tiny)
    worst = 0.0
    for idx, (t, r) in enumerate(zip(case.inputs, ref.inputs)):
        if not t.requires_grad:
            continue
        analytic = grads[idx]
        n_probe = case.probe[idx] if idx < len(case.probe) else None
        coords = range(t.data.size) if n_probe is None or n_probe >= t.data.size else \
            rng.choice(t.data.size, size=n_probe, replace=False)
        flat = r.data.reshape(-1)
        for c in coords:
            a = float(analytic[c])
            n = numeric_derivative(ref, flat, c, weights, tape)
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), floor))
    return worst


# ----------------------------------------------------------------------
# random instance builders: (rng, dtype) -> Case
# ----------------------------------------------------------------------
def _t(arr, dtype, grad=True):
    return Tensor(np.asarray(arr).astype(dtype), requires_grad=grad, dtype=dtype)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _conv_case(rng, dtype):
    k = int(rng.choice([1, 3, 7]))
    n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
    pad = int(rng.integers(0, k // 2 + 1))
    h, w = (int(v) for v in rng.integers(max(1, k - 2 * pad), 9, size=2))
    x = _t(rng.standard_normal((n, c, h, w)), dtype)
    wt = _t(rng.standard_normal((o, c, k, k)) / k, dtype)
    b = _t(rng.standard_normal((1, o, 1, 1)), dtype)
    return Case(lambda x, w, b: T.conv2d(x, w, b, padding=pad), [x, wt, b], [12, 12, None])


def _shape(rng, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=4))


def _leaky_case(rng, dtype):
    return Case(lambda x: T.leaky_relu(x, 0.01), [_t(_away_from_zero(rng, _shape(rng)), dtype)], [16])


def _sigmoid_case(rng, dtype):
    return Case(T.sigmoid, [_t(3 * rng.standard_normal(_shape(rng)), dtype)], [16])


def _gap_case(rng, dtype):
    return Case(T.global_avg_pool, [_t(rng.standard_normal(_shape(rng)), dtype)], [16])


def _avg_pool_case(rng, dtype):
    return Case(lambda x: T.channel_pool(x, "avg"), [_t(rng.standard_normal(_shape(rng)), dtype)], [16])


def _max_pool_case(rng, dtype):
    n, c, h, w = _shape(rng)
    c = max(c, 2)
    # distinct channel values, spaced well beyond the finite-difference step
    ladder = np.stack([rng.permutation(c) for _ in range(n * h * w)]).reshape(n, h, w, c)
    x = 0.3 * ladder.transpose(0, 3, 1, 2) + 0.05 * rng.standard_normal((n, c, h, w))
    return Case(lambda x: T.channel_pool(x, "max"), [_t(x, dtype)], [16])


def _softmax_case(rng, dtype):
    k = int(rng.integers(2, 4))
    shape = _shape(rng)
    xs = [_t(2 * rng.standard_normal(shape), dtype) for _ in range(k)]
    return Case(lambda *xs: T.concat_channels(T.softmax_over_set(xs)), xs, [8] * k)


def _concat_case(rng, dtype):
    n, _, h, w = _shape(rng)
    xs = [_t(rng.standard_normal((n, int(rng.integers(1, 4)), h, w)), dtype) for _ in range(2)]
    return Case(lambda a, b: T.concat_channels([a, b]), xs, [8, 8])


def _elementwise_case(rng, dtype):
    n, c, h, w = _shape(rng)
    op = str(rng.choice(["add", "sub", "mul", "div"]))
    b_shape = [(n, c, h, w), (n, c, 1, 1), (n, 1, h, w)][int(rng.integers(0, 3))]
    a = _t(rng.standard_normal((n, c, h, w)), dtype)
    b_data = rng.standard_normal(b_shape)
    if op == "div":
        b_data = np.sign(b_data) * (0.5 + np.abs(b_data))
    b = _t(b_data, dtype)
    if rng.random() < 0.5:
        return Case(lambda a, b: T.elementwise(a, b, op), [a, b], [8, 8])
    return Case(lambda b, a: T.elementwise(b, a, op), [b, a], [8, 8])


def _l1_case(rng, dtype):
    shape = _shape(rng)
    gt = rng.random(shape)
    pred = gt + _away_from_zero(rng, shape, 0.05) * 0.2
    return Case(losses.l1_loss, [_t(pred, dtype), _t(gt, dtype, grad=False)], [16])


def _ssim_case(rng, dtype):
    gt = rng.random((1, 3, 16, 16))
    pred = np.clip(gt + 0.2 * rng.standard_normal(gt.shape), 0, 1)
    return Case(losses.ssim_loss, [_t(pred, dtype), _t(gt, dtype)], [12, 12])


def _separable_case(rng, dtype):
    n, c, _, _ = _shape(rng)
    k = int(rng.choice([3, 5]))
    h, w = (int(v) for v in rng.integers(k, 10, size=2))
    taps = T.gaussian_window(k, 1.0)
    return Case(lambda x: T.separable_filter(x, taps), [_t(rng.standard_normal((n, c, h, w)), dtype)], [16])


OP_CASES = {
    "conv2d": _conv_case,
    "leaky_relu": _leaky_case,
    "sigmoid": _sigmoid_case,
    "global_avg_pool": _gap_case,
    "channel_pool_avg": _avg_pool_case,
    "channel_pool_max": _max_pool_case,
    "softmax_over_set": _softmax_case,
    "concat_channels": _concat_case,
    "elementwise": _elementwise_case,
    "l1_loss": _l1_case,
    "ssim_loss": _ssim_case,
    "separable_filter": _separable_case,
}


def network_case(rng, dtype, ablation="UFA", size=16, probes_per_tensor=1):
    """Total training loss of the full network w.r.t. a random subset of its parameters."""
    net = FusionNetwork.initialize(int(rng.integers(2 ** 31)), ablation=ablation, dtype=dtype)
    # non-zero biases so bias gradients are exercised at a generic point
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p.data[...] = 0.05 * rng.standard_normal(p.shape)
    a = Tensor(rng.random((1, 3, size, size)).astype(dtype), dtype=dtype)
    b = Tensor(rng.random((1, 3, size, size)).astype(dtype), dtype=dtype)
    gt = Tensor(rng.random((1, 3, size, size)).astype(dtype), dtype=dtype)
    names = [f"{layer}.{kind}" for layer, *_ in layer_plan() for kind in ("weight", "bias")]
    params = [net.params[n] for n in names]

    def fn(*_):
        pred = net([a, b])
        return T.add(T.mul(losses.l1_loss(pred, gt), 0.2), T.mul(losses.ssim_loss(pred, gt), 0.8))

    return Case(fn, params, [probes_per_tensor] * len(params))


def run_check(name, builder, mode="64", instances=20, seed=0):
    dtype, tol = MODES[mode]
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        state = rng.bit_generator.state
        case = builder(rng, dtype)
        reference = None
        if dtype != np.float64:
            twin_rng = np.random.default_rng()
            twin_rng.bit_generator.state = state
            reference = builder(twin_rng, np.float64)
        worst = max(worst, check_case(case, rng, reference))
    return CheckResult(f"grad[{mode}] {name}", bool(worst < tol), worst, instances, time.perf_counter() - t0)


def gradient_suite(mode="64", instances=20, network_instances=20, seed=0):
    results = [run_check(name, b, mode, instances, seed) for name, b in OP_CASES.items()]
    if network_instances:
        results.append(run_check("network", network_case, mode, network_instances, seed))
    return results
