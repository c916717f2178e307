"""Uncertainty-gated categorical adversarial adaptation and its training loop.

One step draws a source batch (class-balanced for the adaptive methods)
and a uniform batch from the blended targets, then minimizes::

    J = CE(source) + CE(AdaIN-restyled source) - L_adv

with a gradient-reversal layer between the feature extractor and the
discriminator, so the discriminator ascends ``L_adv`` while the feature
extractor descends it. Target pseudo-labels come from the current
classifier on every step and are hardened to one-hot once their entropy
drops below ``gamma``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .datagen import Dataset
from .errors import LabError, NumericError
from .nnet.autograd import Tensor, grl, log_sigmoid_clamped, log_softmax
from .nnet.model import (
    DISC_BLOCKS,
    EPS,
    ModelBundle,
    adain_t,
    arch_for,
    forward,
    init_model,
    softmax,
    trace_disc,
    trace_g1,
    trace_g2,
    trace_head,
)
from .seeding import make_rng

METHODS = ("source_only", "dann", "mcda", "mcda_oracle", "supervised_st")
CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    eta0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    gamma: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    method: str = "mcda"
    grl_max: float = 1.0
    disc_lr_mult: float = 1.0
    # None means "the method's default"
    balanced: bool | None = None
    augment: bool | None = None
    steps_per_epoch: int | None = None

    def validate(self, k: int | None = None) -> None:
        if self.method not in METHODS:
            raise LabError("E_BAD_METHOD", f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.eta0 <= 0 or self.gamma < 0 or self.grl_max < 0 or self.disc_lr_mult <= 0:
            raise LabError("E_BAD_CONFIG", "need eta0 > 0, gamma >= 0, grl_max >= 0, disc_lr_mult > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise LabError("E_BAD_CONFIG", "epochs and batch_size must be positive")
        if k is not None and self.settings().balanced and self.batch_size < k:
            raise LabError("E_BAD_CONFIG", f"balanced batches need batch_size >= k ({k})")

    def settings(self) -> "MethodSettings":
        base = _METHOD_DEFAULTS[self.method]
        return replace(
            base,
            balanced=base.balanced if self.balanced is None else self.balanced,
            augment=base.augment if self.augment is None else self.augment,
            grl_max=0.0 if self.method == "source_only" else self.grl_max,
        )


@dataclass(frozen=True)
class MethodSettings:
    discriminator: str  # "categorical", "binary" or "none"
    target_labels: str  # "mixed", "oracle", "supervised" or "unused"
    balanced: bool
    augment: bool
    grl_max: float = 1.0


# source_only runs the categorical step with the reversal coefficient held at
# zero, so g and h see only the source cross-entropy.
_METHOD_DEFAULTS = {
    "source_only": MethodSettings("categorical", "mixed", balanced=False, augment=False),
    "dann": MethodSettings("binary", "unused", balanced=False, augment=False),
    "mcda": MethodSettings("categorical", "mixed", balanced=True, augment=True),
    "mcda_oracle": MethodSettings("categorical", "oracle", balanced=True, augment=True),
    "supervised_st": MethodSettings("none", "supervised", balanced=False, augment=False),
}


# labels and gating ------------------------------------------------------------

def _check_prob(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise LabError("E_BAD_PROB", "expected non-negative entries summing to 1")
    return p


def entropy(p) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = _check_prob(p)
    logs = np.log(np.where(p > 0, p, 1.0))
    h = -(p * logs).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class MixedLabel:
    vector: np.ndarray
    is_onehot: bool
    entropy: float


def onehot(labels, k: int) -> np.ndarray:
    return np.eye(k)[np.asarray(labels)]


def mix_labels(probs: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched gating: rows with entropy below ``gamma`` become one-hot at their argmax.

    Returns ``(labels, gated_mask, entropies)``. ``argmax`` breaks ties
    toward the lowest class index.
    """
    probs = _check_prob(np.atleast_2d(probs))
    ent = np.atleast_1d(entropy(probs))
    gated = ent < gamma
    out = probs.copy()
    out[gated] = onehot(probs[gated].argmax(axis=-1), probs.shape[-1])
    return out, gated, ent


def mix_label(p_hat, gamma: float) -> MixedLabel:
    if gamma < 0:
        raise LabError("E_BAD_CONFIG", "gamma must be >= 0")
    vec, gated, ent = mix_labels(np.asarray(p_hat, dtype=np.float64)[None], gamma)
    v = vec[0]
    return MixedLabel(v, bool(np.count_nonzero(v == 1.0) == 1 and np.count_nonzero(v) == 1), float(ent[0]))


# sampling ---------------------------------------------------------------------

def balanced_source_batch(labels: np.ndarray, rng: np.random.Generator, batch_size: int,
                          k: int | None = None) -> np.ndarray:
    """Indices into ``labels`` for one class-balanced batch.

    Classes are visited round-robin in a random order; within a class the
    sample is drawn uniformly with replacement.
    """
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    members = [np.flatnonzero(labels == c) for c in range(k)]
    empty = [c for c, m in enumerate(members) if len(m) == 0]
    if empty:
        raise LabError("E_EMPTY_CLASS", f"classes {empty} have no source samples")
    if batch_size < 1:
        raise LabError("E_BAD_CONFIG", "batch_size must be positive")
    order = rng.permutation(k)
    classes = np.resize(order, batch_size)
    picks = rng.integers(0, np.array([len(members[c]) for c in classes]))
    return np.array([members[c][i] for c, i in zip(classes, picks)])


# schedules --------------------------------------------------------------------

def lr_schedule(p: float, config: TrainConfig = TrainConfig()) -> float:
    return config.eta0 * (1.0 + config.alpha * p) ** (-config.beta)


def grl_coeff(p: float, grl_max: float = 1.0) -> float:
    return grl_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


# losses -----------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    target = onehot(labels, logits.shape[-1])
    return -(log_softmax(logits) * target).sum(axis=1).mean()


def adversarial_from_logits(d_src: Tensor, y_src: np.ndarray, d_tgt: Tensor, y_tgt: np.ndarray) -> Tensor:
    """``mean_s y.log D(src) + mean_t ybar.log(1 - D(tgt))`` from discriminator logits.

    ``y_src`` / ``y_tgt`` are (n, k) label matrices; a binary discriminator
    passes columns of ones.
    """
    src = (log_sigmoid_clamped(d_src, CLAMP) * y_src).sum(axis=1).mean()
    tgt = (log_sigmoid_clamped(d_tgt, CLAMP, complement=True) * y_tgt).sum(axis=1).mean()
    return src + tgt


def adversarial_loss(P: dict[str, Tensor], z_src: Tensor, y_src: np.ndarray, z_tgt: Tensor,
                     y_tgt: np.ndarray, lam: float) -> Tensor:
    """Categorical adversarial objective evaluated through gradient reversal."""
    if len(y_src) == 0 or len(y_tgt) == 0:
        raise LabError("E_EMPTY", "adversarial loss needs non-empty batches")
    d_s = trace_disc(P, grl(z_src, lam))
    d_t = trace_disc(P, grl(z_tgt, lam))
    return adversarial_from_logits(d_s, y_src, d_t, y_tgt)


def classification_loss(P: dict[str, Tensor], arch, x_src: np.ndarray, y_src: np.ndarray,
                        x_tgt: np.ndarray, pairing: np.ndarray | None = None,
                        rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Source cross-entropy and cross-entropy of source content in target style.

    Each source sample is paired with target sample ``pairing[i]`` (drawn
    uniformly from the target batch when not given). Target statistics are
    constants, so no gradient reaches g1 through the target branch.
    """
    if len(x_src) == 0 or len(x_tgt) == 0:
        raise LabError("E_EMPTY", "classification loss needs non-empty batches")
    low_s = trace_g1(P, Tensor(x_src), arch)
    plain = cross_entropy(trace_head(P, trace_g2(P, low_s, arch)), y_src)
    low_t = trace_g1(P, Tensor(x_tgt), arch).data
    if pairing is None:
        pairing = rng.integers(0, len(x_tgt), len(x_src))
    styled = adain_t(low_s, low_t[pairing], EPS)
    aug = cross_entropy(trace_head(P, trace_g2(P, styled, arch)), y_src)
    return plain, aug


# one step -----------------------------------------------------------------------

@dataclass
class StepRecord:
    loss_cls: float
    loss_aug: float
    loss_adv: float
    lr: float
    grl: float
    gated: int


def objective(bundle: ModelBundle, batch: dict[str, Any], settings: MethodSettings, gamma: float,
              lam: float, pairing: np.ndarray | None = None, rng: np.random.Generator | None = None,
              requires_grad: bool = True, target_mix: np.ndarray | None = None,
              target_style: np.ndarray | None = None):
    """Build the step objective ``J = L_cls + L_aug - L_adv`` on one batch.

    ``batch`` holds ``xs``, ``ys``, ``xt`` and, only for the oracle and
    supervised modes, ``yt``. Returns ``(J, parts, P)`` where ``parts``
    carries the loss components, the gated-target count and the quantities
    the gradient treats as constants (``target_mix``, ``target_style``);
    ``P`` are the parameter tensors, with ``.grad`` set after ``J.backward()``.

    Passing ``target_mix`` / ``target_style`` pins those constants, which
    finite-difference checks need so that they differentiate the same
    function the analytic gradient does.
    """
    arch = bundle.arch
    P = bundle.tensors(requires_grad=requires_grad)
    xs, ys, xt = batch["xs"], batch["ys"], batch["xt"]
    k = arch.k

    low_s = trace_g1(P, Tensor(xs), arch)
    z_s = trace_g2(P, low_s, arch)
    loss_cls = cross_entropy(trace_head(P, z_s), ys)

    low_t = trace_g1(P, Tensor(xt), arch)
    z_t = trace_g2(P, low_t, arch)
    logits_t = trace_head(P, z_t)

    zero = Tensor(0.0)
    loss_aug, loss_adv, gated = zero, zero, 0
    if settings.target_labels == "supervised":
        loss_cls = loss_cls + cross_entropy(logits_t, batch["yt"])
    if settings.augment:
        if pairing is None:
            pairing = rng.integers(0, len(xt), len(xs))
        if target_style is None:
            target_style = low_t.data[pairing]
        styled = adain_t(low_s, target_style, EPS)
        loss_aug = cross_entropy(trace_head(P, trace_g2(P, styled, arch)), ys)
    if settings.discriminator == "categorical":
        if settings.target_labels == "oracle":
            y_t = onehot(batch["yt"], k)
            gated = len(y_t)
        elif target_mix is not None:
            y_t, gated = target_mix, int((target_mix == 1.0).any(axis=1).sum())
        else:
            y_t, mask, _ = mix_labels(softmax(logits_t.data), gamma)
            gated = int(mask.sum())
        target_mix = y_t
        loss_adv = adversarial_loss(P, z_s, onehot(ys, k), z_t, y_t, lam)
    elif settings.discriminator == "binary":
        ones_s, ones_t = np.ones((len(xs), 1)), np.ones((len(xt), 1))
        loss_adv = adversarial_loss(P, z_s, ones_s, z_t, ones_t, lam)

    total = loss_cls + loss_aug - loss_adv
    parts = {"loss_cls": loss_cls.item(), "loss_aug": loss_aug.item(),
             "loss_adv": loss_adv.item(), "gated": gated,
             "target_mix": target_mix, "target_style": target_style}
    return total, parts, P


def sgd_update(params, grads, velocity, lr, momentum, weight_decay, lr_mult=None):
    """Momentum SGD with coupled weight decay; ``lr_mult`` scales the rate per block."""
    new_p, new_v = {}, {}
    for name, w in params.items():
        g = grads[name] + weight_decay * w
        v = momentum * velocity[name] + g if velocity is not None else g
        new_v[name] = v
        new_p[name] = w - lr * (lr_mult or {}).get(name, 1.0) * v
    return new_p, new_v


def train_step(bundle: ModelBundle, batch: dict[str, Any], config: TrainConfig, p: float,
               rng: np.random.Generator, velocity: dict[str, np.ndarray] | None = None,
               pairing: np.ndarray | None = None):
    """One SGD-with-momentum step at training progress ``p`` in [0, 1].

    Returns ``(bundle', velocity', StepRecord)``; the input bundle is not
    modified.
    """
    settings = config.settings()
    lam = grl_coeff(p, settings.grl_max)
    lr = lr_schedule(p, config)
    total, parts, P = objective(bundle, batch, settings, config.gamma, lam, pairing=pairing, rng=rng)
    total.backward()
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in P.items()}
    if not math.isfinite(total.item()) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericError("E_NONFINITE", f"objective={total.item()} parts={parts} non-finite grads={bad}")
    mult = {n: config.disc_lr_mult for n in DISC_BLOCKS}
    new_p, new_v = sgd_update(bundle.params, grads, velocity, lr, config.momentum, config.weight_decay, mult)
    record = StepRecord(parts["loss_cls"], parts["loss_aug"], parts["loss_adv"], lr, lam, parts["gated"])
    return bundle.with_params(new_p), new_v, record


# training loop ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    acc_src: float
    acc_tgt_mean: float
    acc_tgt_per_domain: list[float]
    pl_acc: float | None
    gated_frac: float
    loss_cls: float
    loss_aug: float
    loss_adv: float
    lr: float
    grl: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    method: str = ""
    seed: int = 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str, method: str = "", seed: int = 0) -> "TrainLog":
        recs = [EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(recs, method, seed)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def summary(self) -> dict:
        last = self.records[-1]
        return {"method": self.method, "seed": self.seed, "epochs": len(self.records),
                "acc_src": last.acc_src, "acc_tgt_mean": last.acc_tgt_mean,
                "acc_tgt_per_domain": last.acc_tgt_per_domain,
                "pl_acc": last.pl_acc, "gated_frac": last.gated_frac}


def evaluate(bundle: ModelBundle, ds: Dataset, gamma: float) -> dict:
    """Accuracy per domain plus gated pseudo-label statistics on the targets."""
    from .metrics import pseudo_label_stats

    out = forward(bundle, ds.inputs())
    pred = out.probs.argmax(axis=1)
    correct = pred == ds.class_labels
    acc = [float(correct[ds.domain_ids == d].mean()) for d in range(ds.n_domains)]
    tgt = ds.domain_ids > 0
    frac, pl_acc = pseudo_label_stats(out.probs[tgt], ds.class_labels[tgt], gamma)
    return {"acc": acc, "gated_frac": frac, "pl_acc": pl_acc, "features": out.z, "pred": pred}


def _check_dataset(ds: Dataset) -> None:
    if ds.n_domains < 2 or not np.any(ds.domain_ids == 0) or not np.any(ds.domain_ids > 0):
        raise LabError("E_NO_TARGET", "training needs a source (domain 0) and at least one target")


def train(ds: Dataset, config: TrainConfig, progress=None) -> tuple[ModelBundle, TrainLog]:
    """Train one model with ``config.method``; returns the final bundle and per-epoch log.

    Target class labels are only read by the ``mcda_oracle`` and
    ``supervised_st`` methods.
    """
    config.validate(ds.k)
    _check_dataset(ds)
    settings = config.settings()
    disc_out = 1 if settings.discriminator == "binary" else None
    bundle = init_model(arch_for(ds, disc_out=disc_out), config.seed)
    rng = make_rng(config.seed, 0x7EA1)

    src_rows, tgt_rows = ds.rows_of(0), np.flatnonzero(ds.domain_ids > 0)
    src_x, src_y = ds.inputs(src_rows), ds.class_labels[src_rows]
    tgt_x = ds.inputs(tgt_rows)
    tgt_y = ds.class_labels[tgt_rows] if settings.target_labels in ("oracle", "supervised") else None

    steps = config.steps_per_epoch or math.ceil(len(src_rows) / config.batch_size)
    total_steps = steps * config.epochs
    velocity = None
    log = TrainLog(method=config.method, seed=config.seed)
    step = 0
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for _ in range(steps):
            if settings.balanced:
                si = balanced_source_batch(src_y, rng, config.batch_size, ds.k)
            else:
                si = rng.integers(0, len(src_rows), config.batch_size)
            ti = rng.integers(0, len(tgt_rows), config.batch_size)
            batch = {"xs": src_x[si], "ys": src_y[si], "xt": tgt_x[ti]}
            if tgt_y is not None:
                batch["yt"] = tgt_y[ti]
            bundle, velocity, rec = train_step(bundle, batch, config, step / total_steps, rng, velocity)
            sums += (rec.loss_cls, rec.loss_aug, rec.loss_adv)
            step += 1
        ev = evaluate(bundle, ds, config.gamma)
        log.records.append(EpochRecord(
            epoch=epoch, acc_src=ev["acc"][0],
            acc_tgt_mean=float(np.mean(ev["acc"][1:])), acc_tgt_per_domain=ev["acc"][1:],
            pl_acc=ev["pl_acc"], gated_frac=ev["gated_frac"],
            loss_cls=float(sums[0] / steps), loss_aug=float(sums[1] / steps),
            loss_adv=float(sums[2] / steps), lr=rec.lr, grl=rec.grl))
        if progress is not None:
            progress(log.records[-1])
    return bundle, log
