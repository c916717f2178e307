"""Error-rate estimators, the blended-target error bound, and feature probes.

All conditional probabilities are plain empirical frequencies. A class
with no support where one is required raises ``E_NO_SUPPORT`` instead of
being treated as zero error, which would understate the bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from decimal import Decimal

import numpy as np

from .datagen import Dataset, label_distribution
from .errors import LabError
from .mcda import entropy


def _errors(preds, labels) -> np.ndarray:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise LabError("E_SHAPE", "predictions and labels differ in length")
    return preds != labels


def per_target_errors(preds, ds: Dataset) -> tuple[float, list[float], float]:
    """0/1 error on the source, on each target, and their unweighted target mean."""
    wrong = _errors(preds, ds.class_labels)
    rates = []
    for d in range(ds.n_domains):
        sel = ds.domain_ids == d
        if not sel.any():
            raise LabError("E_EMPTY_DOMAIN", f"domain {d} has no samples")
        rates.append(float(wrong[sel].mean()))
    return rates[0], rates[1:], float(np.mean(rates[1:]))


def class_error_rates(preds, labels, k: int) -> np.ndarray:
    """Empirical P(pred != y | y = c) for each class; raises if a class is absent."""
    wrong = _errors(preds, labels)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts[:k] == 0):
        raise LabError("E_NO_SUPPORT", f"classes {np.flatnonzero(counts[:k] == 0).tolist()} have no samples")
    return np.bincount(labels, weights=wrong.astype(float), minlength=k)[:k] / counts[:k]


def ber(preds, labels, k: int | None = None) -> float:
    """Balanced error rate: the worst per-class conditional error."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    return float(class_error_rates(preds, labels, k).max())


def delta_btce(preds, ds: Dataset) -> float:
    """Mean over targets of the largest per-class error gap to the source."""
    preds = np.asarray(preds)
    src = ds.domain_ids == 0
    e_src = class_error_rates(preds[src], ds.class_labels[src], ds.k)
    gaps = []
    for d in range(1, ds.n_domains):
        sel = ds.domain_ids == d
        e_tgt = class_error_rates(preds[sel], ds.class_labels[sel], ds.k)
        gaps.append(np.abs(e_src - e_tgt).max())
    return float(np.mean(gaps))


def l1_distance(p, q) -> float:
    """Sum of absolute differences, taken in decimal on each value's shortest repr.

    Priors are usually short decimals; binary rounding would turn
    |0.5-0.8| + |0.5-0.2| into 0.6000000000000001.
    """
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise LabError("E_SHAPE", f"prior lengths differ: {p.size} vs {q.size}")
    return float(sum(abs(Decimal(repr(a)) - Decimal(repr(b))) for a, b in zip(p.tolist(), q.tolist())))


@dataclass
class BoundReport:
    eps_src: float
    eps_tgt_per_domain: list[float]
    eps_tgt_mean: float
    l1_per_domain: list[float]
    ber: float
    delta_btce: float
    lhs: float
    rhs: float
    tol: float
    holds: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def binomial_tolerance(eps_src: float, n_src: int, eps_tgt: list[float], n_tgt: list[int],
                       n_se: float = 2.0) -> float:
    """``n_se`` standard errors of ``eps_src - mean(eps_tgt)`` under independent binomials."""
    var = eps_src * (1 - eps_src) / n_src
    K = len(eps_tgt)
    var += sum(e * (1 - e) / n for e, n in zip(eps_tgt, n_tgt)) / K**2
    return n_se * math.sqrt(var)


def bound_check(preds, ds: Dataset, tol: float | None = None) -> BoundReport:
    """Evaluate both sides of the blended-target error bound on a labeled sample.

    ``tol`` defaults to two binomial standard errors of the left-hand side.
    """
    preds = np.asarray(preds)
    eps_src, eps_tgt, eps_mean = per_target_errors(preds, ds)
    src = ds.domain_ids == 0
    p_src = label_distribution(ds, 0)
    l1 = [l1_distance(p_src, label_distribution(ds, d)) for d in range(1, ds.n_domains)]
    b = ber(preds[src], ds.class_labels[src], ds.k)
    delta = delta_btce(preds, ds)
    lhs = abs(eps_src - eps_mean)
    rhs = float(np.mean(l1)) * b + 2 * (ds.k - 1) * delta
    if tol is None:
        n_tgt = [int((ds.domain_ids == d).sum()) for d in range(1, ds.n_domains)]
        tol = binomial_tolerance(eps_src, int(src.sum()), eps_tgt, n_tgt)
    return BoundReport(eps_src, eps_tgt, eps_mean, l1, b, delta, lhs, rhs, tol, bool(lhs <= rhs + tol))


def knn_same_class_rate(features, labels, k_neighbors: int) -> tuple[np.ndarray, float]:
    """Share of each class center's nearest samples that belong to that class.

    Centers are per-class feature means; neighbors are the ``k_neighbors``
    Euclidean-nearest samples. Returns ``(rates per class, mean rate)``.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if not 1 <= k_neighbors < n:
        raise LabError("E_BAD_K", f"k_neighbors must be in [1, {n}), got {k_neighbors}")
    classes = np.unique(labels)
    rates = np.empty(labels.max() + 1)
    rates[:] = np.nan
    for c in classes:
        center = x[labels == c].mean(axis=0)
        dist = ((x - center) ** 2).sum(axis=1)
        nearest = np.argsort(dist, kind="stable")[:k_neighbors]
        rates[c] = np.mean(labels[nearest] == c)
    return rates, float(np.nanmean(rates))


def pseudo_label_stats(probs, true_labels, gamma: float) -> tuple[float, float | None]:
    """Fraction of samples with entropy below ``gamma`` and the argmax accuracy among them.

    The accuracy is ``None`` when no sample passes the threshold.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    ent = np.atleast_1d(entropy(probs))
    gated = ent < gamma
    if not gated.any():
        return 0.0, None
    acc = float(np.mean(probs[gated].argmax(axis=1) == np.asarray(true_labels)[gated]))
    return float(gated.mean()), acc
