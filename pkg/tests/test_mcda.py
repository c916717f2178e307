import dataclasses
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdalab.datagen import Dataset, DomainSpec, Style, make_gaussian_domains
from mcdalab.errors import LabError
from mcdalab.mcda import (
    EpochRecord,
    TrainConfig,
    TrainLog,
    adversarial_from_logits,
    adversarial_loss,
    balanced_source_batch,
    classification_loss,
    cross_entropy,
    entropy,
    evaluate,
    grl_coeff,
    lr_schedule,
    mix_label,
    mix_labels,
    onehot,
    sgd_update,
    train,
    train_step,
)
from mcdalab.nnet import Arch, Tensor, init_model
from mcdalab.nnet.model import CLASSIFIER_BLOCKS, trace_g1, trace_g2, trace_head
from mcdalab.seeding import make_rng
from oracles import entropy_mp

probs_strategy = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: np.array(v) / sum(v))


def tiny_vector_ds(seed=0, n=120, k=3):
    styles = [Style((0.0, 0, 0), (0.0, 0, 0)), Style((0.1, 0, 0), (0.2, 0.1, 0), gradient=0.2),
              Style((0.05, 0, 0), (0.0, 0.2, 0))]
    prior = tuple([1.0 / k] * k)
    return make_gaussian_domains([DomainSpec(i, s, n, prior) for i, s in enumerate(styles)], k, seed,
                                 d=4, spread=0.3)


# entropy and gating -------------------------------------------------------------------

def test_entropy_values():
    assert abs(entropy([0.25] * 4) - math.log(4)) < 1e-9
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(entropy([0.7, 0.2, 0.1]) - entropy_mp([0.7, 0.2, 0.1])) < 1e-12
    assert abs(entropy([0.7, 0.2, 0.1]) - 0.8018) < 1e-4


@pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [0.3, 0.3]])
def test_entropy_bad_prob(p):
    with pytest.raises(LabError) as e:
        entropy(p)
    assert e.value.code == "E_BAD_PROB"


def test_mix_label_examples():
    m = mix_label([0.995, 0.005], 0.05)
    assert np.array_equal(m.vector, [1.0, 0.0]) and m.is_onehot
    assert abs(m.entropy - entropy_mp([0.995, 0.005])) < 1e-12
    assert abs(m.entropy - 0.0315) < 1e-4
    m = mix_label([0.6, 0.4], 0.05)
    assert np.array_equal(m.vector, [0.6, 0.4]) and not m.is_onehot
    assert abs(m.entropy - 0.6730) < 1e-4
    m = mix_label([0.0, 1.0, 0.0], 0.01)
    assert np.array_equal(m.vector, [0.0, 1.0, 0.0]) and m.entropy == 0.0


def test_mix_label_tie_goes_low():
    assert np.array_equal(mix_label([0.25, 0.5, 0.25, 0.0], 10.0).vector, [0, 1, 0, 0])
    assert np.array_equal(mix_label([0.5, 0.5], 10.0).vector, [1, 0])


@settings(max_examples=200, deadline=None)
@given(p=probs_strategy, gamma=st.floats(0.0, 2.0))
def test_mix_label_idempotent(p, gamma):
    once = mix_label(p, gamma).vector
    assert np.array_equal(mix_label(once, gamma).vector, once)


@st.composite
def prob_matrix(draw):
    k = draw(st.integers(2, 6))
    n = draw(st.integers(1, 8))
    raw = np.array(draw(st.lists(st.floats(1e-3, 1.0), min_size=n * k, max_size=n * k))).reshape(n, k)
    return raw / raw.sum(axis=1, keepdims=True)


@settings(max_examples=100, deadline=None)
@given(probs=prob_matrix(), g1=st.floats(0.0, 2.0), g2=st.floats(0.0, 2.0))
def test_gating_monotone_in_gamma(probs, g1, g2):
    lo, hi = sorted((g1, g2))
    _, m_lo, _ = mix_labels(probs, lo)
    _, m_hi, _ = mix_labels(probs, hi)
    assert np.all(m_hi[m_lo])


# sampling -------------------------------------------------------------------------------

def test_balanced_batch_examples():
    rng = make_rng(0)
    labels = np.repeat([0, 1], [100, 100])
    assert np.array_equal(np.bincount(labels[balanced_source_batch(labels, rng, 10)]), [5, 5])
    labels = np.repeat([0, 1], [190, 10])
    idx = balanced_source_batch(labels, rng, 10)
    assert np.array_equal(np.bincount(labels[idx]), [5, 5])


def test_balanced_batch_empty_class():
    with pytest.raises(LabError) as e:
        balanced_source_batch(np.array([0, 0, 2]), make_rng(0), 6, k=3)
    assert e.value.code == "E_EMPTY_CLASS"


def test_balanced_batch_frequencies():
    rng = make_rng(1)
    labels = np.repeat([0, 1, 2], [500, 30, 70])
    counts = np.zeros(3)
    for _ in range(1000):
        counts += np.bincount(labels[balanced_source_batch(labels, rng, 32)], minlength=3)
    assert np.abs(counts / counts.sum() - 1 / 3).max() < 0.01


# schedules --------------------------------------------------------------------------------

def test_schedules():
    assert lr_schedule(0.0) == 0.01
    mpmath.mp.dps = 30
    expected = float(mpmath.mpf("0.01") * mpmath.power(11, mpmath.mpf("-0.75")))
    assert abs(lr_schedule(1.0) - expected) < 1e-15
    assert abs(lr_schedule(1.0) - 0.001656) < 1e-6
    assert grl_coeff(0.0) == 0.0
    ps = np.linspace(0, 1, 50)
    lams = [grl_coeff(p, 0.7) for p in ps]
    assert np.all(np.diff(lams) > 0) and lams[-1] < 0.7 and lams[-1] > 0.699


# adversarial loss ----------------------------------------------------------------------------

def test_adversarial_half_discriminator():
    zero = Tensor(np.zeros((1, 2)))
    y = np.array([[1.0, 0.0]])
    assert abs(adversarial_from_logits(zero, y, zero, y).item() + 2 * math.log(2)) < 1e-9
    tgt = (adversarial_from_logits(zero, np.zeros((1, 2)), zero, np.array([[0.5, 0.5]]))).item()
    assert abs(tgt + math.log(2)) < 1e-12


def test_adversarial_perfect_discriminator_limit():
    y = np.array([[0.0, 1.0]])
    d_s = Tensor(np.array([[0.0, 40.0]]))
    d_t = Tensor(np.array([[0.0, -40.0]]))
    # the sigmoid clamp at 1e-12 caps each term at log(1 - 1e-12)
    assert -1e-11 < adversarial_from_logits(d_s, y, d_t, y).item() <= 0.0


def test_onehot_gating_sparsity():
    rng = np.random.default_rng(0)
    k = 5
    d_s = Tensor(rng.normal(size=(32, k)), requires_grad=True)
    d_t = Tensor(rng.normal(size=(32, k)), requires_grad=True)
    y_s, y_t = onehot(rng.integers(0, k, 32), k), onehot(rng.integers(0, k, 32), k)
    adversarial_from_logits(d_s, y_s, d_t, y_t).backward()
    assert np.all(d_s.grad[y_s == 0] == 0.0) and np.all(d_t.grad[y_t == 0] == 0.0)
    assert np.all(d_s.grad[y_s == 1] != 0.0) and np.all(d_t.grad[y_t == 1] != 0.0)


def test_uniform_labels_equal_mean_of_logits():
    # with uniform pseudo-labels the target term's feature gradient is 1/k of
    # the sum of the per-logit gradients
    arch = Arch(mode="vector", k=4, in_shape=(3,))
    P = init_model(arch, 0).tensors()
    z = np.random.default_rng(1).normal(size=(6, arch.feat))
    k = arch.k
    zt = Tensor(z, requires_grad=True)
    adversarial_loss(P, Tensor(z), np.zeros((6, k)), zt, np.full((6, k), 1.0 / k), 1.0).backward()
    total = np.zeros_like(z)
    for j in range(k):
        zj = Tensor(z, requires_grad=True)
        adversarial_loss(P, Tensor(z), np.zeros((6, k)), zj, onehot(np.full(6, j), k), 1.0).backward()
        total += zj.grad
    assert np.allclose(zt.grad, total / k, atol=1e-15, rtol=1e-12)


def test_adversarial_loss_empty():
    P = init_model(Arch(mode="vector", k=2, in_shape=(2,)), 0).tensors()
    with pytest.raises(LabError):
        adversarial_loss(P, Tensor(np.zeros((0, 32))), np.zeros((0, 2)), Tensor(np.zeros((1, 32))),
                         np.ones((1, 2)) / 2, 1.0)


# classification loss -----------------------------------------------------------------------

def test_classification_loss_identity_style():
    arch = Arch()
    P = init_model(arch, 0).tensors()
    x = np.random.default_rng(0).uniform(size=(6, 3, 16, 16))
    y = np.arange(6) % 4
    plain, aug = classification_loss(P, arch, x, y, x, pairing=np.arange(6))
    assert abs(plain.item() - aug.item()) < 1e-5


def test_classification_loss_deterministic():
    arch = Arch()
    P = init_model(arch, 0).tensors()
    rng = np.random.default_rng(1)
    xs, xt = rng.uniform(size=(4, 3, 16, 16)), rng.uniform(size=(4, 3, 16, 16))
    a = classification_loss(P, arch, xs, np.arange(4), xt, rng=make_rng(5))
    b = classification_loss(P, arch, xs, np.arange(4), xt, rng=make_rng(5))
    assert a[0].item() == b[0].item() and a[1].item() == b[1].item()


def test_classification_loss_perfect_limit():
    arch = Arch(mode="vector", k=2, in_shape=(2,))
    b = init_model(arch, 0)
    params = dict(b.params)
    params["h.w"] = np.zeros_like(params["h.w"])
    params["h.b"] = np.array([60.0, -60.0])
    P = b.with_params(params).tensors()
    x = np.ones((3, 2))
    plain, aug = classification_loss(P, arch, x, np.zeros(3, int), x, pairing=np.arange(3))
    assert plain.item() < 1e-20 and aug.item() < 1e-20


# one step -------------------------------------------------------------------------------------

def _batch(seed=0, n=8):
    rng = np.random.default_rng(seed)
    return {"xs": rng.uniform(size=(n, 3, 16, 16)), "ys": rng.integers(0, 4, n),
            "xt": rng.uniform(size=(n, 3, 16, 16))}


def test_step_without_adaptation_is_plain_sgd():
    bundle = init_model(Arch(), 0)
    batch = _batch()
    config = TrainConfig(method="source_only", eta0=0.05)
    new, _, rec = train_step(bundle, batch, config, 0.3, make_rng(0))
    assert rec.grl == 0.0 and rec.loss_aug == 0.0
    P = bundle.tensors(requires_grad=True)
    arch = bundle.arch
    ce = cross_entropy(trace_head(P, trace_g2(P, trace_g1(P, Tensor(batch["xs"]), arch), arch)), batch["ys"])
    ce.backward()
    grads = {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in P.items()}
    lr = lr_schedule(0.3, config)
    expected, _ = sgd_update(bundle.params, grads, None, lr, 0.9, 5e-4)
    for name in ("g1.w", "g2.b", "g3.w") + CLASSIFIER_BLOCKS:
        assert np.array_equal(new.params[name], expected[name]), name


def test_step_deterministic():
    bundle = init_model(Arch(), 1)
    config = TrainConfig(method="mcda", eta0=0.05)
    a, va, ra = train_step(bundle, _batch(1), config, 0.5, make_rng(3))
    b, vb, rb = train_step(bundle, _batch(1), config, 0.5, make_rng(3))
    assert a.equals(b) and ra == rb
    assert all(np.array_equal(va[n], vb[n]) for n in va)


def test_sgd_momentum_and_decay():
    p, g = {"w": np.array([1.0])}, {"w": np.array([0.5])}
    p1, v1 = sgd_update(p, g, None, 0.1, 0.9, 0.1)
    assert np.allclose(v1["w"], 0.6) and np.allclose(p1["w"], 0.94)
    p2, v2 = sgd_update(p1, g, v1, 0.1, 0.9, 0.1)
    assert np.allclose(v2["w"], 0.9 * 0.6 + 0.5 + 0.094)


def test_disc_lr_mult_scales_only_discriminator():
    bundle = init_model(Arch(), 2)
    base = TrainConfig(method="mcda", eta0=0.05)
    a, _, _ = train_step(bundle, _batch(2), base, 0.5, make_rng(1))
    b, _, _ = train_step(bundle, _batch(2), dataclasses.replace(base, disc_lr_mult=2.0), 0.5, make_rng(1))
    assert np.array_equal(a.params["g1.w"], b.params["g1.w"])
    step_a = a.params["d1.w"] - bundle.params["d1.w"]
    step_b = b.params["d1.w"] - bundle.params["d1.w"]
    assert np.allclose(step_b, 2 * step_a, rtol=1e-9, atol=1e-15)


# configuration ---------------------------------------------------------------------------------

def test_bad_method():
    with pytest.raises(LabError) as e:
        TrainConfig(method="cdan").validate()
    assert e.value.code == "E_BAD_METHOD"
    with pytest.raises(LabError) as e:
        train(tiny_vector_ds(), TrainConfig(method="cdan"))
    assert e.value.code == "E_BAD_METHOD"


def test_method_settings():
    assert TrainConfig(method="source_only").settings().grl_max == 0.0
    assert TrainConfig(method="dann").settings().discriminator == "binary"
    s = TrainConfig(method="mcda").settings()
    assert s.balanced and s.augment and s.target_labels == "mixed"
    assert TrainConfig(method="mcda_oracle").settings().target_labels == "oracle"
    assert TrainConfig(method="supervised_st").settings().discriminator == "none"


def test_training_needs_target():
    ds = tiny_vector_ds()
    src = ds.domain_ids == 0
    only = Dataset("vector", ds.data[src], ds.class_labels[src], ds.domain_ids[src], ds.k, 1, ds.shape)
    with pytest.raises(LabError) as e:
        train(only, TrainConfig(epochs=1))
    assert e.value.code == "E_NO_TARGET"


# training ---------------------------------------------------------------------------------------

SMALL = TrainConfig(eta0=0.05, epochs=3, steps_per_epoch=10, batch_size=16)


def test_train_log_fields_and_roundtrip():
    _, log = train(tiny_vector_ds(), SMALL)
    assert len(log.records) == 3
    rec = log.records[0]
    assert set(dataclasses.asdict(rec)) == {"epoch", "acc_src", "acc_tgt_mean", "acc_tgt_per_domain",
                                            "pl_acc", "gated_frac", "loss_cls", "loss_aug", "loss_adv",
                                            "lr", "grl"}
    for r in log.records:
        assert 0 <= r.acc_tgt_mean <= 1 and 0 <= r.gated_frac <= 1 and len(r.acc_tgt_per_domain) == 2
    back = TrainLog.from_jsonl(log.to_jsonl())
    assert back.to_jsonl() == log.to_jsonl()
    assert isinstance(back.records[0], EpochRecord)


def test_train_deterministic():
    ds = tiny_vector_ds()
    b1, l1 = train(ds, SMALL)
    b2, l2 = train(ds, SMALL)
    assert l1.to_jsonl() == l2.to_jsonl() and b1.equals(b2)


def test_source_only_is_mcda_without_adaptation():
    ds = tiny_vector_ds()
    b1, l1 = train(ds, dataclasses.replace(SMALL, method="source_only"))
    off = dataclasses.replace(SMALL, method="mcda", grl_max=0.0, augment=False, balanced=False)
    b2, l2 = train(ds, off)
    assert l1.to_jsonl() == l2.to_jsonl() and b1.equals(b2)


def test_dann_ignores_target_labels():
    ds = tiny_vector_ds()
    shuffled = ds.class_labels.copy()
    tgt = ds.domain_ids > 0
    shuffled[tgt] = np.random.default_rng(0).permutation(shuffled[tgt])
    scrambled = Dataset(ds.mode, ds.data, shuffled, ds.domain_ids, ds.k, ds.n_domains, ds.shape)
    cfg = dataclasses.replace(SMALL, method="dann")
    b1, _ = train(ds, cfg)
    b2, _ = train(scrambled, cfg)
    assert b1.equals(b2)


def test_initial_gated_fraction_is_zero():
    ds = tiny_vector_ds()
    ev = evaluate(init_model(Arch(mode="vector", k=3, in_shape=(4,)), 0), ds, 0.05)
    assert ev["gated_frac"] == 0.0 and ev["pl_acc"] is None


def test_supervised_st_separable_vectors():
    ds = tiny_vector_ds(n=300)
    _, log = train(ds, TrainConfig(method="supervised_st", eta0=0.05, epochs=10, steps_per_epoch=30))
    assert log.records[-1].acc_tgt_mean >= 0.99


@pytest.mark.parametrize("method", ["dann", "mcda", "mcda_oracle", "supervised_st"])
def test_all_methods_run(method):
    _, log = train(tiny_vector_ds(), dataclasses.replace(SMALL, method=method, epochs=1))
    assert len(log.records) == 1
