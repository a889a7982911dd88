"""Adam against an independently coded reference loop."""

import numpy as np
import pytest

from gkw.errors import NumericError
from gkw.optim import Adam
from gkw.tensor import parameter


def test_zero_gradient_leaves_params_unchanged():
    p = parameter(np.array([1.0, -2.0]), dtype=np.float64)
    opt = Adam([("p", p)], lr=0.1)
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_missing_gradient_treated_as_zero():
    p = parameter(np.array([3.0]), dtype=np.float64)
    opt = Adam([("p", p)], lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [3.0])


def test_first_step_magnitude_is_lr():
    p = parameter(np.array([0.0, 0.0]), dtype=np.float64)
    opt = Adam([("p", p)], lr=0.05)
    p.grad = np.array([0.3, -7.0])
    opt.step()
    # bias correction makes the first update lr * sign(g) up to eps
    assert np.allclose(p.data, [-0.05, 0.05], atol=1e-6)


def test_five_step_trajectory_matches_reference_loop():
    # reference Adam coded from the update equations, no shared helpers
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    ref_p, ref_m, ref_v = 1.0, 0.0, 0.0
    trajectory = []
    for t in range(1, 6):
        g = 2.0 * ref_p
        ref_m = b1 * ref_m + (1 - b1) * g
        ref_v = b2 * ref_v + (1 - b2) * g * g
        mhat = ref_m / (1 - b1 ** t)
        vhat = ref_v / (1 - b2 ** t)
        ref_p = ref_p - lr * mhat / (np.sqrt(vhat) + eps)
        trajectory.append(ref_p)

    p = parameter(np.array([1.0]), dtype=np.float64)
    opt = Adam([("p", p)], lr=lr)
    got = []
    for _ in range(5):
        loss = p ** 2
        opt.zero_grad()
        loss.backward()
        opt.step()
        got.append(p.data[0])
    assert np.abs(np.array(got) - np.array(trajectory)).max() < 1e-10


def test_nonfinite_gradient_names_parameter():
    p = parameter(np.array([1.0]), dtype=np.float64)
    opt = Adam([("conv1.filters", p)], lr=0.1)
    p.grad = np.array([np.inf])
    with pytest.raises(NumericError, match="conv1.filters"):
        opt.step()


def test_bad_learning_rate():
    p = parameter(np.array([1.0]), dtype=np.float64)
    with pytest.raises(ValueError):
        Adam([("p", p)], lr=0.0)


def test_deterministic_updates():
    def run():
        rng = np.random.default_rng(7)
        p = parameter(rng.normal(size=(4, 3)).astype(np.float32))
        opt = Adam([("p", p)], lr=1e-3)
        for _ in range(20):
            loss = ((p * p).sum() + (p * 0.3).sum())
            opt.zero_grad()
            loss.backward()
            opt.step()
        return p.data.tobytes()

    assert run() == run()
