import logging
import math

import numpy as np
import pytest

from talora.adapter import TuckerFactors
from talora.cli import fixture_path
from talora.grad import finite_diff_check
from talora.objective import (
    MetricsTable,
    TaskSpec,
    delta_metric,
    orthogonality_gradients,
    orthogonality_penalty,
    task_loss,
    task_loss_and_grad,
    total_loss,
)


def orthonormal(rng, rows, cols):
    return np.linalg.qr(rng.standard_normal((rows, cols)))[0]


def ortho_factors(seed=0, d=6, k=5, T=3, p=3, q=2, v=2):
    rng = np.random.default_rng(seed)
    G = np.stack([orthonormal(rng, p, q) for _ in range(v)], axis=2)
    return TuckerFactors(G, orthonormal(rng, d, p), orthonormal(rng, k, q),
                         rng.standard_normal((T, v)))


def literal_penalty(f, include_core=True):
    total = 0.0
    mats = [f.U1, f.U2] + ([f.G[:, :, l] for l in range(f.G.shape[2])] if include_core else [])
    for M in mats:
        n = M.shape[1]
        for a in range(n):
            for b in range(n):
                s = math.fsum(M[i, a] * M[i, b] for i in range(M.shape[0]))
                total += (s - (1.0 if a == b else 0.0)) ** 2
    return total


def test_penalty_zero_on_orthonormal():
    f = ortho_factors()
    assert orthogonality_penalty(f) < 1e-28
    for g in orthogonality_gradients(f).values():
        assert np.abs(g).max() < 1e-14


def test_penalty_scaled_u1():
    f = ortho_factors()
    p = f.U1.shape[1]
    f.U1 = 2.0 * np.eye(f.U1.shape[0])[:, :p]
    assert math.isclose(orthogonality_penalty(f), 9 * p, rel_tol=1e-14)


def test_penalty_matches_literal_formula():
    rng = np.random.default_rng(2)
    f = TuckerFactors(rng.standard_normal((3, 2, 2)), rng.standard_normal((5, 3)),
                      rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
    for core in (True, False):
        assert math.isclose(orthogonality_penalty(f, core), literal_penalty(f, core), rel_tol=1e-12)
    assert orthogonality_penalty(f, False) < orthogonality_penalty(f, True)


def test_penalty_gradient_fd():
    rng = np.random.default_rng(3)
    f = TuckerFactors(rng.standard_normal((3, 2, 2)), rng.standard_normal((6, 3)),
                      rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
    for core in (True, False):
        grads = orthogonality_gradients(f, core)
        assert not np.any(grads["U3"])
        if not core:
            assert not np.any(grads["G"])
        rep = finite_diff_check(lambda: orthogonality_penalty(f, core), dict(f.named_params()),
                                grads, h=1e-6, n_coords=1000, floor=1e-8)
        assert rep.max_rel_error <= 1e-6


def literal_ce(pred, target):
    n, C = pred.shape[:2]
    vals = []
    for s in range(n):
        for idx in np.ndindex(pred.shape[2:]):
            z = [pred[(s, c) + idx] for c in range(C)]
            m = max(z)
            lse = m + math.log(math.fsum(math.exp(v - m) for v in z))
            vals.append(lse - z[target[(s,) + idx]])
    return math.fsum(vals) / len(vals)


def literal_cosine(pred, target, eps=1e-12):
    vals = []
    for s in range(pred.shape[0]):
        for idx in np.ndindex(pred.shape[2:]):
            a = pred[(s, slice(None)) + idx]
            b = target[(s, slice(None)) + idx]
            na, nb = math.sqrt(math.fsum(a * a)), math.sqrt(math.fsum(b * b))
            vals.append(1.0 - math.fsum(a * b) / (max(na, eps) * max(nb, eps)))
    return math.fsum(vals) / len(vals)


def test_losses_vs_literal():
    rng = np.random.default_rng(4)
    pred = rng.standard_normal((2, 3, 4, 5))
    target = rng.standard_normal((2, 3, 4, 5))
    classes = rng.integers(0, 3, (2, 4, 5))
    assert math.isclose(task_loss("mse", pred, target), np.mean((pred - target) ** 2), rel_tol=1e-14)
    assert math.isclose(task_loss("l1", pred, target), np.mean(np.abs(pred - target)), rel_tol=1e-14)
    assert math.isclose(task_loss("cross_entropy", pred, classes), literal_ce(pred, classes), rel_tol=1e-12)
    assert math.isclose(task_loss("cosine", pred, target), literal_cosine(pred, target), rel_tol=1e-12)


def test_loss_trivial_cases():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4))
    for kind in ("mse", "l1", "cosine"):
        assert abs(task_loss(kind, x, x)) < 1e-15
    C = 7
    uniform = np.zeros((3, C, 2))
    assert math.isclose(task_loss("cross_entropy", uniform, np.zeros((3, 2), int)), math.log(C),
                        rel_tol=1e-14)


@pytest.mark.parametrize("kind", ["mse", "l1", "cosine", "cross_entropy"])
def test_loss_gradients_fd(kind):
    rng = np.random.default_rng(6)
    pred = rng.standard_normal((2, 3, 2, 2))
    target = rng.integers(0, 3, (2, 2, 2)) if kind == "cross_entropy" else rng.standard_normal(pred.shape)
    _, grad = task_loss_and_grad(kind, pred, target)
    rep = finite_diff_check(lambda: task_loss(kind, pred, target), {"pred": pred}, {"pred": grad},
                            n_coords=pred.size)
    assert rep.max_rel_error <= 1e-6


def test_cosine_zero_target_counts_as_one(caplog):
    pred = np.ones((1, 3, 2))
    target = np.ones((1, 3, 2))
    target[0, :, 1] = 0.0
    with caplog.at_level(logging.WARNING, logger="talora.objective"):
        assert math.isclose(task_loss("cosine", pred, target), 0.5, rel_tol=1e-12)
    assert "zero target" in caplog.text


def test_loss_errors():
    with pytest.raises(ValueError):
        task_loss("mse", np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        task_loss("cross_entropy", np.zeros((2, 3, 4)), np.zeros((2, 5), int))
    with pytest.raises(ValueError):
        task_loss("cross_entropy", np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        task_loss("hinge", np.zeros(2), np.zeros(2))


def specs(*weights):
    return [TaskSpec(i, "mse", w) for i, w in enumerate(weights)]


def test_total_loss():
    assert math.isclose(total_loss([1.0, 2.0, 6.0], specs(1, 1, 1), 0.0, 9.0), 3.0)
    assert math.isclose(total_loss([4.0], specs(5), 2.0, 0.25), 4.5)
    assert math.isclose(total_loss([3.0, 2.0, 1.0], specs(1, 2, 3), 1.0, 0.5), 10 / 6 + 0.5,
                        rel_tol=1e-15)
    with pytest.raises(ValueError):
        total_loss([], [], 1.0, 0.0)


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(0, "hinge")
    with pytest.raises(ValueError):
        TaskSpec(0, "mse", weight=0.0)
    with pytest.raises(ValueError):
        TaskSpec(0, "mse", out_channels=0)


def load(ref):
    return MetricsTable.load(fixture_path(ref))


def test_delta_identity_and_errors():
    base = load("nyuv2/hps")
    assert delta_metric(base, base) == 0.0
    with pytest.raises(ValueError, match="structure"):
        delta_metric(load("cityscapes/ta_lora"), base)
    zero = MetricsTable()
    zero.add("a", "m", 0.0, False)
    other = MetricsTable()
    other.add("a", "m", 1.0, False)
    with pytest.raises(ValueError, match="zero"):
        delta_metric(other, zero)


def test_delta_orientation():
    base = MetricsTable()
    base.add("seg", "acc", 50.0, False)
    base.add("depth", "err", 2.0, True)
    cand = MetricsTable()
    cand.add("seg", "acc", 55.0, False)
    cand.add("depth", "err", 1.0, True)
    # (+10% + +50%) / 2
    assert math.isclose(delta_metric(cand, base), 0.3)


@pytest.mark.parametrize("ref, expected", [
    ("nyuv2/lora_hps_r32", 10.67), ("nyuv2/lora_stl_r16", 20.25),
    ("nyuv2/lora_stl_r32", 16.34), ("nyuv2/ta_lora", 23.93),
    ("nyuv2/stl", 0.45),
    ("nyuv2/ta_lora_p16_q16_v8", 22.85), ("nyuv2/ta_lora_p32_q32_v4", 23.77),
    ("nyuv2/ta_lora_ortho_u1u2", 22.30),
    ("cityscapes/lora_hps_r16", 17.98), ("cityscapes/lora_stl_r8", 20.07),
    ("cityscapes/lora_stl_r16", 19.62), ("cityscapes/ta_lora", 20.99),
    ("cityscapes/stl", 2.17),
])
def test_delta_goldens(ref, expected):
    ds = ref.split("/")[0]
    assert abs(100 * delta_metric(load(ref), load(f"{ds}/hps")) - expected) <= 0.1


def test_metrics_jsonl_round_trip():
    t = load("nyuv2/ta_lora")
    again = MetricsTable.from_jsonl(t.to_jsonl())
    assert again.structure() == t.structure()
    assert again.to_jsonl() == t.to_jsonl()
    assert t.structure()[0] == ("segmentation", [("mIoU", False), ("PixAcc", False)])
    with pytest.raises(ValueError, match="line 1"):
        MetricsTable.from_jsonl('{"task": "a"}\n')
    with pytest.raises(ValueError):
        MetricsTable.from_jsonl("\n")
