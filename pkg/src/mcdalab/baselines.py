"""Comparison methods and a multi-seed suite runner.

The baselines share the training loop in :mod:`mcdalab.mcda`; they differ
only in the discriminator head, the target labels it sees and the sampling
and augmentation switches (see ``mcda.MethodSettings``). This module adds
the marginal (binary) adversarial loss and the bookkeeping to run several
methods over several seeds and tabulate the outcome.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .datagen import Dataset
from .errors import LabError
from .mcda import METHODS, TrainConfig, TrainLog, adversarial_from_logits, train
from .metrics import BoundReport, bound_check
from .nnet.autograd import Tensor, grl
from .nnet.model import ModelBundle, forward, trace_disc


def dann_adversarial_loss(P: dict[str, Tensor], z_src: Tensor, z_tgt: Tensor, lam: float) -> Tensor:
    """Marginal domain loss: ``mean log D(src) + mean log(1 - D(tgt))`` with a single logit."""
    d_s = trace_disc(P, grl(z_src, lam))
    d_t = trace_disc(P, grl(z_tgt, lam))
    if d_s.shape[1] != 1:
        raise LabError("E_SHAPE", f"binary discriminator expected, got {d_s.shape[1]} outputs")
    return adversarial_from_logits(d_s, np.ones((len(d_s.data), 1)), d_t, np.ones((len(d_t.data), 1)))


@dataclass(frozen=True)
class MethodSpec:
    name: str
    overrides: dict = field(default_factory=dict)

    def config(self, base: TrainConfig, seed: int) -> TrainConfig:
        if self.name not in METHODS:
            raise LabError("E_BAD_METHOD", f"unknown method {self.name!r}; expected one of {METHODS}")
        return replace(base, method=self.name, seed=seed, **self.overrides)


@dataclass
class RunResult:
    method: str
    seed: int
    bundle: ModelBundle
    log: TrainLog
    bound: BoundReport

    @property
    def acc_tgt_mean(self) -> float:
        return self.log.records[-1].acc_tgt_mean

    def row(self) -> dict:
        last = self.log.records[-1]
        out = {"method": self.method, "seed": self.seed, "acc_tgt_mean": last.acc_tgt_mean}
        for j, a in enumerate(last.acc_tgt_per_domain, start=1):
            out[f"acc_t{j}"] = a
        out.update(lhs=self.bound.lhs, rhs=self.bound.rhs, holds=self.bound.holds,
                   tol=self.bound.tol, acc_src=last.acc_src)
        return out


def run_one(ds: Dataset, config: TrainConfig, progress=None) -> RunResult:
    bundle, log = train(ds, config, progress)
    preds = forward(bundle, ds.inputs()).probs.argmax(axis=1)
    return RunResult(config.method, config.seed, bundle, log, bound_check(preds, ds))


def run_suite(ds: Dataset, methods: Iterable[MethodSpec | str], seeds: Iterable[int],
              base: TrainConfig = TrainConfig(),
              on_result: Callable[[RunResult], None] | None = None) -> list[RunResult]:
    """Train every method with every seed on ``ds``, in method-major order."""
    specs = [m if isinstance(m, MethodSpec) else MethodSpec(m) for m in methods]
    seeds = list(seeds)
    if not specs or not seeds:
        raise LabError("E_EMPTY", "run_suite needs at least one method and one seed")
    results = []
    for spec in specs:
        for seed in seeds:
            res = run_one(ds, spec.config(base, seed))
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results


def _by_method(results: list[RunResult]) -> dict[str, list[float]]:
    by_method: dict[str, list[float]] = {}
    for r in results:
        by_method.setdefault(r.method, []).append(r.acc_tgt_mean)
    return by_method


def median_accuracy(results: list[RunResult]) -> dict[str, float]:
    """Median over seeds of the final mean target accuracy, per method."""
    return {m: float(np.median(v)) for m, v in _by_method(results).items()}


def aggregate(results: list[RunResult]) -> dict[str, tuple[float, float]]:
    """Mean and population std over seeds of the final mean target accuracy."""
    return {m: (float(np.mean(v)), float(np.std(v))) for m, v in _by_method(results).items()}


def results_csv(results: list[RunResult]) -> str:
    rows = [r.row() for r in results]
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# Training settings for the standard benchmark. Small networks trained from
# scratch need a larger step than fine-tuning a pretrained backbone.
STANDARD_TRAIN = TrainConfig(eta0=0.05, epochs=12, steps_per_epoch=100)

PRESETS = {"default": TrainConfig(), "standard": STANDARD_TRAIN}

# Per-method adjustments applied on top of a preset. The single-logit
# discriminator drives the features into a degenerate alignment at full
# reversal strength, so dann gets a softer one.
METHOD_OVERRIDES = {"standard": {"dann": {"grl_max": 0.6}}}


def preset_methods(preset: str, methods: Iterable[str]) -> list[MethodSpec]:
    """MethodSpecs carrying the preset's per-method overrides."""
    table = METHOD_OVERRIDES.get(preset, {})
    return [MethodSpec(m, dict(table.get(m, {}))) for m in methods]
