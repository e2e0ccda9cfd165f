from dataclasses import replace

import numpy as np
import pytest

from sage_lt import trainer
from sage_lt.core_math import grad_check
from sage_lt.data import split_groups
from sage_lt.loss import ClassFrequencies, LossConfig, cf_loss, la_loss
from sage_lt.optim import SGD, cosine_lr
from sage_lt.trainer import (
    Metrics, TrainConfig, TrainingAborted, evaluate_predictions, forward_logits, init_psi,
    objective, train, train_baseline,
)

FAST = TrainConfig(epochs=2, batch_size=32, lr=0.05)


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 0.01) == 0.01
    assert cosine_lr(100, 100, 0.01) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.01) == pytest.approx(0.005, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.01)


def test_sgd_velocity_form():
    p = {"w": np.array([1.0, 2.0])}
    opt = SGD(p, momentum=0.9)
    opt.step({"w": np.array([1.0, 1.0])}, lr=0.1)
    np.testing.assert_allclose(p["w"], [0.9, 1.9])
    opt.step({"w": np.array([1.0, 1.0])}, lr=0.1)
    np.testing.assert_allclose(p["w"], [0.9 - 0.19, 1.9 - 0.19])


def test_sgd_updates_scalars_in_place():
    s = np.array(0.5)
    p = {"s": s}
    SGD(p, 0.0).step({"s": np.array(2.0)}, 0.1)
    assert float(s) == pytest.approx(0.3)


def test_config_validation():
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0)
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)


def test_init_flags(tiny_bundle):
    m = init_psi(FAST, tiny_bundle, 4)
    np.testing.assert_array_equal(m.psi["cls.W"], tiny_bundle.text.embeddings.mean(axis=1))
    assert float(m.psi["fit.s1"]) == 0.0 and float(m.psi["fit.s2"]) == 0.0
    assert m.config.mode == "sage"
    m2 = init_psi(replace(FAST, init=False, sg=False), tiny_bundle, 4)
    np.testing.assert_allclose(np.linalg.norm(m2.psi["cls.W"], axis=1), 1.0, atol=1e-11)
    assert m2.config.mode == "adaptformer"


def _batch(tiny_bundle, tiny_data, n=12):
    tr, _ = tiny_data
    idx = np.arange(0, len(tr), max(1, len(tr) // n))[:n]
    return tr.images[idx], tr.labels[idx], tiny_bundle.features(tr.images[idx]), ClassFrequencies(tr.counts)


def test_objective_gradients(tiny_bundle, tiny_data, rng):
    x, y, fzs, freq = _batch(tiny_bundle, tiny_data, 5)
    cfg = replace(FAST, loss=LossConfig(0.5, 0.1, 0.2, 0.3, 0.4))
    m = init_psi(cfg, tiny_bundle, 4)
    for k, v in m.psi.items():
        v[...] = rng.normal(size=v.shape) * 0.5
    reps = grad_check(lambda p: objective(m, tiny_bundle, x, y, fzs, freq, cfg), m.psi)
    for rep in reps:
        assert rep.passed, rep


def test_objective_term_identities(tiny_bundle, tiny_data, rng):
    x, y, fzs, freq = _batch(tiny_bundle, tiny_data)
    cfg = replace(FAST, fit=False, loss=LossConfig(lambda1=0, lambda2=0, lambda3=0))
    m = init_psi(cfg, tiny_bundle, 4)
    m.psi["sg.0.W_up"][...] = rng.normal(size=m.psi["sg.0.W_up"].shape)
    z = forward_logits(m, tiny_bundle, x)
    loss, _ = objective(m, tiny_bundle, x, y, fzs, freq, cfg)
    assert loss == cf_loss(z, y, freq, cfg.loss)
    off = replace(cfg, cf=False)
    loss, _ = objective(m, tiny_bundle, x, y, fzs, freq, off)
    assert abs(loss - la_loss(z, y, freq)) < 1e-12


def test_one_step_descends(tiny_bundle, tiny_data):
    x, y, fzs, freq = _batch(tiny_bundle, tiny_data)
    m = init_psi(FAST, tiny_bundle, 4)
    before, grads = objective(m, tiny_bundle, x, y, fzs, freq, FAST)
    SGD(m.psi, 0.9).step(grads, 1e-3)
    after, _ = objective(m, tiny_bundle, x, y, fzs, freq, FAST)
    assert after < before


def test_train_deterministic_and_bundle_frozen(tiny_bundle, tiny_data):
    tr, te = tiny_data
    before = tiny_bundle.checksum()
    m1, h1 = train(FAST, tiny_bundle, tr, te)
    m2, h2 = train(FAST, tiny_bundle, tr, te)
    assert [x.row() for x in h1] == [x.row() for x in h2]
    for k in m1.psi:
        np.testing.assert_array_equal(m1.psi[k], m2.psi[k])
    assert tiny_bundle.checksum() == before
    assert len(h1) == FAST.epochs and h1[-1].loss_trace == [h.loss for h in h1]


def test_baseline_path_is_bit_identical(tiny_bundle, tiny_data):
    tr, te = tiny_data
    cfg = replace(FAST, sg=False, cf=False, fit=False, init=True)
    m1, h1 = train(cfg, tiny_bundle, tr, te)
    m2, h2 = train_baseline(cfg, tiny_bundle, tr, te)
    assert [x.row() for x in h1] == [x.row() for x in h2]
    for k in m1.psi:
        np.testing.assert_array_equal(m1.psi[k], m2.psi[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_abort(tiny_bundle, tiny_data, monkeypatch):
    tr, te = tiny_data
    monkeypatch.setattr(trainer, "cosine_lr", lambda step, total, lr0: 1e308 if step else lr0)
    with pytest.raises(TrainingAborted, match="seed"):
        train(FAST, tiny_bundle, tr, te)


def test_evaluate_examples(rng):
    labels = np.repeat(np.arange(10), 100)
    groups = ["head"] * 3 + ["medium"] * 4 + ["tail"] * 3
    m = evaluate_predictions(np.zeros(1000, dtype=int), labels, groups)
    assert m.acc_all == pytest.approx(0.1)
    m = evaluate_predictions(labels, labels, groups)
    assert (m.acc_all, m.acc_head, m.acc_med, m.acc_tail) == (1.0, 1.0, 1.0, 1.0)
    m = evaluate_predictions(rng.normal(size=(1000, 10)).argmax(axis=1), labels, groups)
    assert 0.07 <= m.acc_all <= 0.13


def test_empty_group_absent():
    m = evaluate_predictions([0, 1, 1], [0, 1, 0], ["head", "head"])
    assert m.acc_tail is None and m.acc_med is None
    assert m.acc_head == pytest.approx(2 / 3)


def test_acc_all_is_weighted_group_mix(rng):
    labels = np.repeat(np.arange(6), [50, 40, 30, 20, 10, 5])
    pred = np.where(rng.random(len(labels)) < 0.6, labels, 0)
    groups = split_groups([150, 60, 60, 30, 10, 5])
    m = evaluate_predictions(pred, labels, groups)
    size = {g: sum(np.sum(labels == c) for c in range(6) if groups[c] == g) for g in set(groups)}
    mix = (m.acc_head * size["head"] + m.acc_med * size["medium"] + m.acc_tail * size["tail"]) / len(labels)
    assert m.acc_all == pytest.approx(mix, abs=1e-12)


def test_metrics_row_keys():
    assert list(Metrics(0.5).row()) == ["epoch", "split", "acc_all", "acc_head", "acc_med", "acc_tail", "loss"]
