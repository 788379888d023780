import numpy as np
import pytest

from ufafuse.optim import Adam, AdamState, adam_step
from ufafuse.tensor import Tensor


def scalar_adam(grad_fn, w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam recurrence, kept separate from the library code."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return w


def test_zero_gradient_is_a_fixed_point():
    p = {"w": np.array([1.5, -2.0])}
    state = AdamState({}, {})
    for _ in range(10):
        adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    assert state.step == 10


def test_first_step_moves_by_lr():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState({}, {}), lr=0.1)
    assert abs(p["w"][0] + 0.1) < 1e-6


def test_quadratic_converges_and_matches_recurrence():
    p = {"w": np.array([0.0])}
    state = AdamState({}, {})
    for _ in range(100):
        adam_step(p, {"w": 2 * (p["w"] - 3)}, state, lr=0.1)
    ref = scalar_adam(lambda w: 2 * (w - 3), 0.0, 0.1, 100)
    assert abs(p["w"][0] - 3) < 0.1
    assert abs(p["w"][0] - ref) < 1e-12


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState({}, {}), lr=0.1)


def test_optimizer_wrapper_skips_missing_grads():
    w = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    opt = Adam({"w": w, "b": b}, lr=0.5)
    w.grad = np.ones_like(w.data)
    opt.step()
    assert np.all(w.data < 1) and np.all(b.data == 1)
