import numpy as np
import pytest

from talora.adapter import AdapterSpec, TuckerFactors, seeded_rng
from talora.gradcheck import check_model, move_off_init, random_batch
from talora.msam import EncoderConfig, build_model
from talora.objective import TaskSpec
from talora.synth import synth_dataset
from talora.trainer import TrainConfig, frozen_digest, train

TASKS = [TaskSpec(0, "cross_entropy", 1.0, 4), TaskSpec(1, "l1", 1.0, 1),
         TaskSpec(2, "cosine", 1.0, 3)]
SMALL = EncoderConfig(grid_h=4, grid_w=4)


def grid(cfg, seed=0):
    return np.random.default_rng(seed).standard_normal((cfg.grid_h, cfg.grid_w, cfg.in_channels))


def test_output_channel_contract():
    m = build_model(SMALL, TASKS, (4, 4, 2))
    x = grid(SMALL)
    for spec in TASKS:
        assert m.forward_task(x, spec.id).shape == (spec.out_channels, 4, 4)
    assert m.image_embedding(x, 0).shape == (SMALL.width, 4, 4)


def test_fresh_models_identical_and_task_agnostic_trunk():
    a = build_model(SMALL, TASKS, (4, 4, 2))
    b = build_model(SMALL, TASKS, (4, 4, 2))
    x = grid(SMALL, 1)
    for t in range(3):
        assert np.array_equal(a.forward_task(x, t), b.forward_task(x, t))
    emb = [a.image_embedding(x, t) for t in range(3)]
    assert np.array_equal(emb[0], emb[1]) and np.array_equal(emb[0], emb[2])
    for t in range(3):
        assert not np.any(a.trainable_params()[f"task.{t}.embed"])


def test_trainable_set_by_name():
    m = build_model(SMALL, TASKS, (4, 4, 2))
    names = list(m.trainable_params())
    assert names == list(build_model(SMALL, TASKS, (4, 4, 2)).trainable_params())
    assert not set(names) & set(m.frozen_params())
    for n in names:
        assert (n.startswith("enc.") and (".attn.q." in n or ".attn.k." in n or ".attn.v." in n
                                          or ".ln" in n)) or n.startswith("task.")
    for n in m.frozen_params():
        assert n.endswith((".W0", ".W", ".b", ".pos", ".W1", ".W2", ".b1", ".b2"))
        assert not n.startswith("task.")
    assert not any(".mlp." in n or ".attn.out." in n for n in names)
    assert all(not a.flags.writeable for a in m.frozen_params().values())


def test_adapter_count_formula():
    C, L, T, p, q, v = SMALL.width, SMALL.layers, 3, 4, 4, 2
    m = build_model(SMALL, TASKS, (p, q, v))
    assert m.adapter_param_count() == L * 3 * (p * q * v + C * p + C * q + T * v)
    adapter_total = sum(a.size for n, a in m.trainable_params().items() if ".attn." in n)
    assert adapter_total == m.adapter_param_count()
    ln = L * 2 * 2 * C + 2 * C
    hid = SMALL.decoder_hidden
    heads = sum(N * C * 16 + hid * C + hid + N * hid + N for N in (4, 1, 3))
    total = sum(a.size for a in m.trainable_params().values())
    assert total == adapter_total + ln + heads


def test_u3_row_perturbation_is_task_local():
    m = build_model(SMALL, TASKS, (4, 4, 2))
    move_off_init(m, 3)
    x = grid(SMALL, 2)
    before = [m.forward_task(x, t) for t in range(3)]
    m.trainable_params()["enc.0.attn.q.U3"][1] += 0.5
    after = [m.forward_task(x, t) for t in range(3)]
    assert not np.array_equal(before[1], after[1])
    assert np.array_equal(before[0], after[0]) and np.array_equal(before[2], after[2])


def test_u3_gradient_rows_are_task_local():
    m = build_model(SMALL, TASKS, (4, 4, 2))
    move_off_init(m, 4)
    batch = random_batch(m, 2, seed=5)
    g1 = m.loss_and_grads(batch, lam=0.0, mode="eval")[3]
    xs, ys = batch[1]
    batch[1] = (xs, ys + 1.0)
    g2 = m.loss_and_grads(batch, lam=0.0, mode="eval")[3]
    for name in g1:
        if name.endswith(".U3"):
            assert np.array_equal(g1[name][[0, 2]], g2[name][[0, 2]])
            assert not np.array_equal(g1[name][1], g2[name][1])


def test_forward_errors():
    m = build_model(SMALL, TASKS, (4, 4, 2))
    with pytest.raises(IndexError):
        m.forward_task(grid(SMALL), 3)
    with pytest.raises(ValueError):
        m.forward_task(np.zeros((5, 4, 8)), 0)
    with pytest.raises(ValueError):
        EncoderConfig(width=30, heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(layers=0)
    with pytest.raises(ValueError):
        build_model(SMALL, [], (4, 4, 2))


def test_eval_is_deterministic_and_train_dropout_varies():
    m = build_model(SMALL, TASKS, AdapterSpec("ta_lora", 4, 4, 2, dropout=0.5))
    move_off_init(m, 1)
    x = grid(SMALL, 3)
    assert np.array_equal(m.forward_task(x, 0), m.forward_task(x, 0))
    rng = seeded_rng(0)
    assert not np.array_equal(m.forward_task(x, 0, "train", rng), m.forward_task(x, 0, "train", rng))


@pytest.mark.parametrize("kind", ["lora_stl", "lora_hps"])
def test_lora_kinds_gradcheck(kind):
    m = build_model(SMALL, TASKS, AdapterSpec(kind, r=3, dropout=0.1))
    move_off_init(m, 2)
    names = [n for n in m.trainable_params() if ".attn." in n] + ["task.1.embed", "enc.0.ln1.bias"]
    rep = check_model(m, random_batch(m, 1, seed=2), lam=1.0, n_coords=120, names=names)
    assert rep.max_rel_error <= 1e-5


def test_training_keeps_frozen_weights_and_is_deterministic():
    def run():
        m = build_model(SMALL, TASKS, AdapterSpec("ta_lora", 4, 4, 2, dropout=0.1))
        data = synth_dataset("dense-multitask", dict(grid_h=4, grid_w=4, in_channels=8), TASKS,
                             0.05, seed=1, n_samples=6)
        digest = frozen_digest(m)
        hist, _ = train(m, data, TrainConfig(epochs=2, batch_size=3, lr=1e-2, seed=3))
        assert frozen_digest(m) == digest
        return m, hist
    (a, ha), (b, hb) = run(), run()
    assert ha.step_losses == hb.step_losses
    for n in a.trainable_params():
        assert np.array_equal(a.trainable_params()[n], b.trainable_params()[n])
    fresh = build_model(SMALL, TASKS, (4, 4, 2))
    assert not np.array_equal(a.trainable_params()["enc.0.attn.q.G"],
                              fresh.trainable_params()["enc.0.attn.q.G"])


def test_astype_copy_leaves_original():
    m = build_model(SMALL, TASKS, (4, 4, 2))
    hi = m.astype(np.longdouble)
    hi.trainable_params()["enc.0.attn.q.U1"][0, 0] += 1.0
    assert m.trainable_params()["enc.0.attn.q.U1"][0, 0] != hi.trainable_params()["enc.0.attn.q.U1"][0, 0]
    a = hi.qkv[0]["q"].adapter
    assert isinstance(a, TuckerFactors) and a.U1 is hi.trainable_params()["enc.0.attn.q.U1"]
