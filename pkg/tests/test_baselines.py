import csv
import dataclasses
import io
import math

import numpy as np
import pytest

from mcdalab.baselines import (
    MethodSpec,
    METHOD_OVERRIDES,
    PRESETS,
    aggregate,
    dann_adversarial_loss,
    median_accuracy,
    preset_methods,
    results_csv,
    run_one,
    run_suite,
)
from mcdalab.datagen import DomainSpec, Style, make_gaussian_domains
from mcdalab.errors import LabError
from mcdalab.mcda import TrainConfig, _METHOD_DEFAULTS, objective
from mcdalab.nnet import Arch, Tensor, init_model
from mcdalab.nnet.autograd import sigmoid
from mcdalab.nnet.model import discriminator_forward, forward, trace_g1, trace_g2

SMALL = TrainConfig(eta0=0.05, epochs=2, steps_per_epoch=8, batch_size=16)


def vector_ds(styles, seed=0, n=90, k=3):
    prior = tuple([1.0 / k] * k)
    return make_gaussian_domains([DomainSpec(i, s, n, prior) for i, s in enumerate(styles)], k, seed,
                                 d=4, spread=0.3)


SHIFTED = [Style((0.0, 0, 0), (0.0, 0, 0)), Style((0.1, 0, 0), (0.2, 0.1, 0), gradient=0.2),
           Style((0.05, 0, 0), (0.0, 0.2, 0))]


def binary_bundle(seed=0, d=4):
    return init_model(Arch(mode="vector", in_shape=(d,), k=3, disc_out=1), seed)


def features(bundle, x):
    P = bundle.tensors(requires_grad=True)
    return P, trace_g2(P, trace_g1(P, Tensor(x), bundle.arch), bundle.arch)


def test_dann_loss_at_half():
    bundle = binary_bundle()
    params = dict(bundle.params)
    params["d2.w"] = np.zeros_like(params["d2.w"])
    params["d2.b"] = np.zeros_like(params["d2.b"])
    P, z = features(bundle.with_params(params), np.random.default_rng(0).normal(size=(6, 4)))
    assert abs(dann_adversarial_loss(P, z, z, 1.0).item() + 2 * math.log(2)) < 1e-9


def test_dann_loss_matches_objective_binary_path():
    rng = np.random.default_rng(1)
    bundle = binary_bundle(seed=3)
    xs, xt = rng.normal(size=(5, 4)), rng.normal(size=(7, 4))
    P, zs = features(bundle, xs)
    zt = trace_g2(P, trace_g1(P, Tensor(xt), bundle.arch), bundle.arch)
    direct = dann_adversarial_loss(P, zs, zt, 0.5).item()
    _, parts, _ = objective(bundle, {"xs": xs, "ys": np.array([0, 1, 2, 0, 1]), "xt": xt},
                            _METHOD_DEFAULTS["dann"], 0.05, 0.5)
    assert math.isclose(direct, parts["loss_adv"], rel_tol=1e-12)


def test_dann_loss_rejects_categorical_head():
    bundle = init_model(Arch(mode="vector", in_shape=(4,), k=3), 0)
    P, z = features(bundle, np.zeros((2, 4)))
    with pytest.raises(LabError) as e:
        dann_adversarial_loss(P, z, z, 1.0)
    assert e.value.code == "E_SHAPE"


def test_dann_identical_domains_cannot_separate():
    # with source and targets drawn alike, the discriminator scores them alike
    same = [Style((0.0, 0, 0), (0.0, 0, 0))] * 3
    ds = vector_ds(same, n=150)
    res = run_one(ds, TrainConfig(method="dann", eta0=0.05, epochs=3, steps_per_epoch=30, batch_size=32))
    d = sigmoid(discriminator_forward(res.bundle, forward(res.bundle, ds.inputs()).z))[:, 0]
    src = ds.domain_ids == 0
    assert abs(float(d[src].mean() - d[~src].mean())) < 0.02


def test_method_spec_overrides_and_errors():
    cfg = MethodSpec("mcda", {"gamma": 0.02}).config(SMALL, 7)
    assert cfg.method == "mcda" and cfg.seed == 7 and cfg.gamma == 0.02
    with pytest.raises(LabError) as e:
        MethodSpec("coral").config(SMALL, 0)
    assert e.value.code == "E_BAD_METHOD"


def test_run_suite_empty():
    ds = vector_ds(SHIFTED)
    for methods, seeds in (([], [0]), (["mcda"], [])):
        with pytest.raises(LabError) as e:
            run_suite(ds, methods, seeds, SMALL)
        assert e.value.code == "E_EMPTY"


def test_run_suite_duplicate_seeds_identical_rows():
    ds = vector_ds(SHIFTED)
    seen = []
    results = run_suite(ds, ["source_only", "mcda"], [4, 4], SMALL, on_result=seen.append)
    assert [(r.method, r.seed) for r in results] == [("source_only", 4), ("source_only", 4),
                                                      ("mcda", 4), ("mcda", 4)]
    assert seen == results
    assert results[0].row() == results[1].row() and results[2].row() == results[3].row()
    assert results[0].bundle.equals(results[1].bundle)


def test_tables():
    ds = vector_ds(SHIFTED)
    results = run_suite(ds, ["source_only"], [0, 1, 2], SMALL)
    accs = [r.acc_tgt_mean for r in results]
    assert median_accuracy(results) == {"source_only": float(np.median(accs))}
    mean, std = aggregate(results)["source_only"]
    assert math.isclose(mean, np.mean(accs)) and math.isclose(std, np.std(accs))
    rows = list(csv.DictReader(io.StringIO(results_csv(results))))
    assert list(rows[0]) == ["method", "seed", "acc_tgt_mean", "acc_t1", "acc_t2", "lhs", "rhs", "holds",
                             "tol", "acc_src"]
    assert [int(r["seed"]) for r in rows] == [0, 1, 2]
    assert results_csv([]) == ""


def test_presets_validate():
    for cfg in PRESETS.values():
        cfg.validate(4)


def test_preset_methods():
    specs = preset_methods("standard", ["mcda", "dann"])
    assert [s.name for s in specs] == ["mcda", "dann"]
    assert specs[0].config(PRESETS["standard"], 0) == dataclasses.replace(PRESETS["standard"], method="mcda")
    assert specs[1].config(PRESETS["standard"], 0).grl_max == METHOD_OVERRIDES["standard"]["dann"]["grl_max"]
    assert preset_methods("default", ["dann"])[0].overrides == {}
