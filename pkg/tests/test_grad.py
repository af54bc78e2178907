import math

import numpy as np
import pytest

from talora.adapter import AdaptedLinear, LoraPair, LoraShared, TuckerFactors, adapted_forward, init_factors, reconstruct
from talora.grad import (
    AdamState,
    NonFiniteGradient,
    adam_step,
    allocate_coords,
    backward_adapted_linear,
    backward_lora,
    backward_tucker,
    finite_diff_check,
    lr_at,
    no_decay,
)


def test_adapted_linear_zero_upstream():
    rng = np.random.default_rng(0)
    layer = AdaptedLinear(rng.standard_normal((3, 3)),
                          LoraShared(LoraPair(rng.standard_normal((3, 2)), rng.standard_normal((2, 3)))))
    d_delta, dx = backward_adapted_linear(layer, rng.standard_normal(3), 0, np.zeros(3))
    assert not np.any(d_delta) and not np.any(dx)


def test_adapted_linear_fd_with_mask():
    rng = np.random.default_rng(1)
    layer = AdaptedLinear(rng.standard_normal((3, 3)),
                          LoraShared(LoraPair(rng.standard_normal((3, 2)), rng.standard_normal((2, 3)))))
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 3))
    mask = np.where(rng.random((4, 3)) < 0.3, 0.0, 1 / 0.7)
    delta = layer.delta(0).copy()

    def loss():
        h = x @ layer.W0.T + (x * mask) @ delta.T
        return 0.5 * np.sum((h - y) ** 2)

    h = x @ layer.W0.T + (x * mask) @ delta.T
    d_delta, dx = backward_adapted_linear(layer, x, 0, h - y, mask=mask, delta=delta)
    rep = finite_diff_check(loss, {"delta": delta, "x": x}, {"delta": d_delta, "x": dx}, n_coords=100)
    assert rep.max_rel_error <= 1e-6 and rep.n_checked == 21


def test_tucker_backward_zero_upstream():
    f = init_factors(5, 4, 3, 2, 2, 2, seed=0)
    g = backward_tucker(np.zeros((5, 4, 3)), f)
    assert all(not np.any(v) for v in g.values())


def test_tucker_backward_fd():
    rng = np.random.default_rng(2)
    f = TuckerFactors(rng.standard_normal((2, 2, 2)), rng.standard_normal((5, 2)),
                      rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
    C = rng.standard_normal((5, 4, 3))

    def loss():
        return 0.5 * np.sum((reconstruct(f) - C) ** 2)

    grads = backward_tucker(reconstruct(f) - C, f)
    rep = finite_diff_check(loss, dict(f.named_params()), grads, h=1e-6, n_coords=1000)
    assert rep.max_rel_error <= 1e-5
    assert rep.n_checked == 8 + 10 + 8 + 6


def test_zero_core_blocks_factor_gradients():
    f = init_factors(5, 4, 3, 2, 2, 2, seed=1)
    L = np.random.default_rng(3).standard_normal((5, 4, 3))
    g = backward_tucker(L, f)
    assert not np.any(g["U1"]) and not np.any(g["U2"]) and not np.any(g["U3"])
    assert np.any(g["G"])


def test_tucker_backward_shape_check():
    f = init_factors(5, 4, 3, 2, 2, 2, seed=1)
    with pytest.raises(ValueError):
        backward_tucker(np.zeros((4, 5, 3)), f)


def test_lora_backward():
    rng = np.random.default_rng(4)
    pair = LoraPair(rng.standard_normal((4, 2)), rng.standard_normal((2, 3)))
    C = rng.standard_normal((4, 3))
    g = backward_lora(pair.delta() - C, pair)
    rep = finite_diff_check(lambda: 0.5 * np.sum((pair.B @ pair.A - C) ** 2),
                            dict(pair.named_params()), g, n_coords=100)
    assert rep.max_rel_error <= 1e-6


def test_fd_checker_quadratic_and_sensitivity():
    theta = np.random.default_rng(5).standard_normal(30)
    # central differences are exact on a quadratic, so a wide step only trims roundoff
    rep = finite_diff_check(lambda: 0.5 * np.dot(theta, theta), {"t": theta}, {"t": theta.copy()},
                            h=1e-3)
    assert rep.max_rel_error <= 1e-9 and rep.n_checked == 30
    bad = theta.copy()
    bad[7] *= 2.0
    rep = finite_diff_check(lambda: 0.5 * np.dot(theta, theta), {"t": theta}, {"t": bad})
    assert rep.max_rel_error > 0.3
    assert rep.worst[0] == "t" and rep.worst[1] == (7,)


def test_fd_checker_restores_and_rejects():
    theta = np.arange(5.0)
    before = theta.copy()
    finite_diff_check(lambda: float(np.sum(theta ** 2)), {"t": theta}, {"t": 2 * theta})
    assert np.array_equal(theta, before)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: float("nan"), {"t": theta}, {"t": theta})
    with pytest.raises(ValueError):
        finite_diff_check(lambda: 0.0, {"t": theta}, {"t": np.zeros(4)})


def test_allocate_coords():
    alloc = allocate_coords([10, 3, 500], 20)
    assert sum(alloc) == 20 and alloc[1] == 3 and all(a >= 1 for a in alloc)
    assert allocate_coords([4, 5], 100) == [4, 5]
    assert allocate_coords([100] * 5, 3) == [1] * 5


def state(**kw):
    base = dict(lr=0.1, total_steps=100, warmup_ratio=0.05, weight_decay=0.0)
    base.update(kw)
    return AdamState(**base)


def test_schedule_endpoints():
    s = state()
    assert s.warmup_steps == 5
    assert lr_at(0, s) == 0.0
    assert math.isclose(lr_at(1, s), 0.1 / 5)
    assert lr_at(5, s) == 0.1
    assert math.isclose(lr_at(50, s), 0.1 * 50 / 95)
    assert lr_at(100, s) == 0.0
    with pytest.raises(ValueError):
        lr_at(101, s)
    assert state(total_steps=7).warmup_steps == math.ceil(0.05 * 7)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, state())
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_sign_and_hand_trace():
    s = state(total_steps=20, warmup_ratio=0.1)  # warmup 2 steps
    p = {"w": np.array([0.5])}
    b1, b2, eps = s.beta1, s.beta2, s.eps
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in ((1, 1.0), (2, -0.3)):
        adam_step(p, {"w": np.array([g])}, s)
        lr = 0.1 * t / 2 if t < 2 else 0.1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        if t == 1:
            assert p["w"][0] < 0.5
            assert math.isclose(0.5 - p["w"][0], 0.05 * (1 - 1e-7), rel_tol=1e-6)
        assert math.isclose(p["w"][0], theta, rel_tol=1e-15, abs_tol=1e-16)


def test_adam_decoupled_decay_before_update():
    s = state(total_steps=20, warmup_ratio=0.0, weight_decay=0.5)
    p = {"w": np.array([2.0]), "task.0.embed": np.array([2.0])}
    adam_step(p, {"w": np.array([0.0]), "task.0.embed": np.array([0.0])}, s)
    lr1 = 0.1 * 19 / 20  # no warmup: decay starts at the first update
    assert math.isclose(p["w"][0], 2.0 - lr1 * 0.5 * 2.0)
    assert p["task.0.embed"][0] == 2.0


def test_no_decay_names():
    assert no_decay("task.1.embed")
    assert no_decay("enc.0.ln1.bias")
    assert not no_decay("enc.0.ln1.scale")
    assert not no_decay("task.0.dec.b1")


def test_adam_rejects_non_finite():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteGradient, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.inf])}, state())
    assert p["w"].tolist() == [1.0, 1.0]
    with pytest.raises(KeyError):
        adam_step(p, {"z": np.ones(2)}, state())


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(9)
        p = {"a": rng.standard_normal(4), "b": rng.standard_normal((2, 2))}
        s = state(total_steps=120, weight_decay=1e-3)
        for _ in range(120):
            adam_step(p, {k: 2 * v + 0.1 for k, v in p.items()}, s)
        return p
    x, y = run(), run()
    assert all(np.array_equal(x[k], y[k]) for k in x)


def test_forward_backward_consistency_train_mode():
    rng = np.random.default_rng(10)
    f = TuckerFactors(rng.standard_normal((2, 2, 2)), rng.standard_normal((4, 2)),
                      rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))
    layer = AdaptedLinear(rng.standard_normal((4, 3)), f, dropout_rate=0.25)
    x = rng.standard_normal((6, 3))
    h, mask = adapted_forward(layer, x, 1, "train", np.random.default_rng(0))
    d_delta, _ = backward_adapted_linear(layer, x, 1, np.ones_like(h), mask=mask)
    np.testing.assert_allclose(d_delta, np.ones((6, 4)).T @ (x * mask), atol=1e-13)
