"""Synthetic multi-domain datasets with controllable style and label shift.

Two generators are provided: procedural 16x16 RGB shape images
(:func:`make_blended_shapes`) and affine-transformed Gaussian clusters
(:func:`make_gaussian_domains`). Both return a :class:`Dataset` whose rows
are ordered by domain id and then by draw order. Domain 0 is the source.

Datasets persist in a small little-endian binary format, see
:func:`save_dataset`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LabError, StorageError
from .seeding import make_rng

IMAGE_SHAPE = (3, 16, 16)
SHAPE_NAMES = ("disk", "square", "plus", "triangle", "ring", "diamond", "xcross", "bar")

MAGIC = b"BTDA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHB6I")


@dataclass(frozen=True)
class Style:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    foreground: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = 0.0
    gradient: float = 0.0

    def __post_init__(self):
        for name in ("background", "foreground"):
            pal = getattr(self, name)
            if len(pal) != 3 or not all(0.0 <= v <= 1.0 for v in pal):
                raise LabError("E_BAD_STYLE", f"{name} palette must be 3 values in [0, 1]")
        if self.noise < 0 or self.gradient < 0:
            raise LabError("E_BAD_STYLE", "noise and gradient must be >= 0")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    style: Style
    n_samples: int
    label_prior: tuple[float, ...]

    def __post_init__(self):
        prior = np.asarray(self.label_prior, dtype=float)
        if self.n_samples < 1:
            raise LabError("E_BAD_SPEC", "n_samples must be positive")
        if prior.ndim != 1 or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
            raise LabError("E_BAD_PRIOR", f"label_prior must be a probability vector, got {self.label_prior}")


@dataclass(frozen=True)
class LabelShiftSpec:
    kind: str = "uniform"
    ratio: float = 0.5
    center: float = 0.0
    width: float = 1.0

    def prior(self, k: int) -> np.ndarray:
        """The class prior this spec induces over ``k`` classes."""
        idx = np.arange(k, dtype=float)
        if self.kind == "uniform":
            w = np.ones(k)
        elif self.kind in ("long_tailed", "reverse_long_tailed"):
            if not 0.0 < self.ratio <= 1.0:
                raise LabError("E_BAD_SHIFT", "ratio must lie in (0, 1]")
            w = self.ratio ** idx
            if self.kind == "reverse_long_tailed":
                w = w[::-1]
        elif self.kind == "gaussian":
            if self.width <= 0:
                raise LabError("E_BAD_SHIFT", "gaussian width must be positive")
            w = np.exp(-0.5 * ((idx - self.center) / self.width) ** 2)
        else:
            raise LabError("E_BAD_SHIFT", f"unknown label shift kind {self.kind!r}")
        return w / w.sum()


@dataclass
class Dataset:
    mode: str
    data: np.ndarray  # (n, c*h*w) float32
    class_labels: np.ndarray
    domain_ids: np.ndarray
    k: int
    n_domains: int
    shape: tuple[int, int, int] = field(default=IMAGE_SHAPE)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.class_labels = np.ascontiguousarray(self.class_labels, dtype=np.int64)
        self.domain_ids = np.ascontiguousarray(self.domain_ids, dtype=np.int64)
        n = len(self.class_labels)
        c, h, w = self.shape
        if self.data.shape != (n, c * h * w) or len(self.domain_ids) != n:
            raise LabError("E_SHAPE", "data, labels and domain ids disagree on n")
        if n and (self.class_labels.min() < 0 or self.class_labels.max() >= self.k):
            raise LabError("E_SHAPE", "class label out of range")
        if n and (self.domain_ids.min() < 0 or self.domain_ids.max() >= self.n_domains):
            raise LabError("E_SHAPE", "domain id out of range")

    @property
    def n(self) -> int:
        return len(self.class_labels)

    @property
    def n_targets(self) -> int:
        return self.n_domains - 1

    def inputs(self, rows=None) -> np.ndarray:
        """Float64 network inputs, reshaped to (n, c, h, w) or (n, d)."""
        x = self.data if rows is None else self.data[rows]
        x = x.astype(np.float64)
        if self.mode == "image":
            return x.reshape(-1, *self.shape)
        return x

    def rows_of(self, domain_id: int) -> np.ndarray:
        return np.flatnonzero(self.domain_ids == domain_id)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.mode == other.mode
            and self.k == other.k
            and self.n_domains == other.n_domains
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.class_labels, other.class_labels)
            and np.array_equal(self.domain_ids, other.domain_ids)
        )


def _check_specs(specs: Sequence[DomainSpec], k: int) -> None:
    if not 2 <= k <= 8:
        raise LabError("E_BAD_K", f"k must be in 2..8, got {k}")
    if not specs:
        raise LabError("E_EMPTY_SPECS", "at least one domain spec is required")
    for i, s in enumerate(specs):
        if s.domain_id != i:
            raise LabError("E_BAD_SPEC", f"spec {i} has domain_id {s.domain_id}; ids must be 0..K in order")
        if len(s.label_prior) != k:
            raise LabError("E_BAD_PRIOR", f"domain {i}: prior has {len(s.label_prior)} entries, k={k}")


def _shape_masks(cls: int, dx: np.ndarray, dy: np.ndarray, r: np.ndarray) -> np.ndarray:
    adx, ady = np.abs(dx), np.abs(dy)
    name = SHAPE_NAMES[cls]
    if name == "disk":
        return dx**2 + dy**2 <= r**2
    if name == "square":
        return np.maximum(adx, ady) <= 0.8 * r
    if name == "plus":
        arm = r / 3.0
        return ((adx <= arm) & (ady <= r)) | ((ady <= arm) & (adx <= r))
    if name == "triangle":
        return (dy <= r) & (adx <= 0.5 * (dy + r))
    if name == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if name == "diamond":
        return adx + ady <= r
    if name == "xcross":
        return (np.abs(adx - ady) <= 1.2) & (np.maximum(adx, ady) <= r)
    return (ady <= r / 3.0) & (adx <= r)  # bar


def render_shapes(labels: np.ndarray, style: Style, rng: np.random.Generator) -> np.ndarray:
    """Render one 3x16x16 image per label with the given style, float32 in [0, 1]."""
    n = len(labels)
    _, hgt, wid = IMAGE_SHAPE
    cx = (wid - 1) / 2 + rng.uniform(-1.5, 1.5, n)
    cy = (hgt - 1) / 2 + rng.uniform(-1.5, 1.5, n)
    radius = rng.uniform(4.0, 6.0, n)
    phi = rng.uniform(0.0, 2 * math.pi, n)
    noise = rng.standard_normal((n, 3, hgt, wid))

    yy, xx = np.mgrid[0:hgt, 0:wid].astype(np.float64)
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    r = radius[:, None, None]
    mask = np.zeros((n, hgt, wid), dtype=bool)
    for c in np.unique(labels):
        sel = labels == c
        mask[sel] = _shape_masks(int(c), dx[sel], dy[sel], r[sel])

    bg = np.asarray(style.background)[None, :, None, None]
    fg = np.asarray(style.foreground)[None, :, None, None]
    img = bg + (fg - bg) * mask[:, None].astype(np.float64)
    ramp = ((xx[None] - (wid - 1) / 2) * np.cos(phi)[:, None, None]
            + (yy[None] - (hgt - 1) / 2) * np.sin(phi)[:, None, None]) / (wid - 1)
    img = img + style.gradient * ramp[:, None] + style.noise * noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _draw_labels(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(spec.label_prior), size=spec.n_samples, p=np.asarray(spec.label_prior))


def make_blended_shapes(specs: Sequence[DomainSpec], k: int, seed: int) -> Dataset:
    """Shape-image dataset; one block of rows per domain spec."""
    _check_specs(specs, k)
    data, labels, domains = [], [], []
    for spec in specs:
        rng = make_rng(seed, spec.domain_id)
        y = _draw_labels(spec, rng)
        data.append(render_shapes(y, spec.style, rng).reshape(len(y), -1))
        labels.append(y)
        domains.append(np.full(len(y), spec.domain_id))
    return Dataset("image", np.concatenate(data), np.concatenate(labels),
                   np.concatenate(domains), k, len(specs), IMAGE_SHAPE)


def canonical_centers(k: int, d: int, radius: float = 3.0) -> np.ndarray:
    angles = 2 * math.pi * np.arange(k) / k
    centers = np.zeros((k, d))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def style_affine(style: Style, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear map and offset a vector-mode domain applies to every point.

    Rotation angle is ``2*pi*background[0]`` in the plane of the first two
    coordinates, the scale is ``1 + gradient`` and the translation is
    ``4 * foreground[:2]`` (zero-padded to ``d``).
    """
    theta = 2 * math.pi * style.background[0]
    lin = np.eye(d)
    c, s = math.cos(theta), math.sin(theta)
    lin[:2, :2] = [[c, -s], [s, c]]
    lin *= 1.0 + style.gradient
    shift = np.zeros(d)
    shift[:2] = 4.0 * np.asarray(style.foreground[:2])
    return lin, shift


def make_gaussian_domains(specs: Sequence[DomainSpec], k: int, seed: int, d: int = 2,
                          spread: float = 0.5) -> Dataset:
    """Vector dataset of k isotropic Gaussian clusters, affinely restyled per domain."""
    _check_specs(specs, k)
    if not 2 <= d <= 64:
        raise LabError("E_BAD_DIM", f"vector dimension must be in 2..64, got {d}")
    centers = canonical_centers(k, d)
    data, labels, domains = [], [], []
    for spec in specs:
        rng = make_rng(seed, spec.domain_id)
        y = _draw_labels(spec, rng)
        pts = centers[y] + (spread + spec.style.noise) * rng.standard_normal((len(y), d))
        lin, shift = style_affine(spec.style, d)
        data.append((pts @ lin.T + shift).astype(np.float32))
        labels.append(y)
        domains.append(np.full(len(y), spec.domain_id))
    return Dataset("vector", np.concatenate(data), np.concatenate(labels),
                   np.concatenate(domains), k, len(specs), (1, 1, d))


def label_distribution(ds: Dataset, domain_id: int) -> np.ndarray:
    y = ds.class_labels[ds.domain_ids == domain_id]
    if len(y) == 0:
        raise LabError("E_EMPTY_DOMAIN", f"domain {domain_id} has no samples")
    return np.bincount(y, minlength=ds.k) / len(y)


def resample_label_shift(ds: Dataset, domain_id: int, spec: LabelShiftSpec, seed: int) -> Dataset:
    """Resample one domain with replacement so its labels follow ``spec``.

    The domain keeps its row count and its position in the row order; the
    remaining domains are copied unchanged.
    """
    prior = spec.prior(ds.k)
    rows = ds.rows_of(domain_id)
    if len(rows) == 0:
        raise LabError("E_EMPTY_DOMAIN", f"domain {domain_id} has no samples")
    by_class = [rows[ds.class_labels[rows] == c] for c in range(ds.k)]
    missing = [c for c in range(ds.k) if prior[c] > 0 and len(by_class[c]) == 0]
    if missing:
        raise LabError("E_NO_SUPPORT", f"domain {domain_id} has no samples of classes {missing}")

    rng = make_rng(seed, 0x5EED, domain_id)
    counts = rng.multinomial(len(rows), prior)
    picked = np.concatenate([rng.choice(by_class[c], size=counts[c], replace=True)
                             for c in range(ds.k) if counts[c] > 0])
    picked = picked[rng.permutation(len(picked))]

    keep = np.flatnonzero(ds.domain_ids != domain_id)
    insert_at = int(np.searchsorted(keep, rows[0]))
    order = np.concatenate([keep[:insert_at], picked, keep[insert_at:]])
    return Dataset(ds.mode, ds.data[order], ds.class_labels[order], ds.domain_ids[order],
                   ds.k, ds.n_domains, ds.shape)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` in the BTDA binary format.

    Layout (little-endian): magic ``BTDA``, u16 version, u8 mode
    (0 image, 1 vector), u32 n, c, h, w, k, K+1, then n*c*h*w float32
    values, n u16 class labels and n u16 domain ids.
    """
    c, h, w = ds.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0 if ds.mode == "image" else 1,
                          ds.n, c, h, w, ds.k, ds.n_domains)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(ds.data.astype("<f4").tobytes())
            fh.write(ds.class_labels.astype("<u2").tobytes())
            fh.write(ds.domain_ids.astype("<u2").tobytes())
    except OSError as exc:
        raise StorageError("E_IO", str(exc)) from exc


def load_dataset(path: str | Path) -> Dataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError("E_IO", str(exc)) from exc
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise StorageError("E_BAD_MAGIC", f"{path} is not a BTDA dataset")
        raise StorageError("E_TRUNCATED", f"{path}: header incomplete")
    magic, version, mode, n, c, h, w, k, n_domains = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StorageError("E_BAD_MAGIC", f"{path} is not a BTDA dataset")
    if version != FORMAT_VERSION or mode not in (0, 1):
        raise StorageError("E_BAD_VERSION", f"unsupported version {version} / mode {mode}")
    n_vals = n * c * h * w
    need = _HEADER.size + 4 * n_vals + 4 * n
    if len(raw) < need:
        raise StorageError("E_TRUNCATED", f"{path}: {len(raw)} bytes, header declares {need}")
    off = _HEADER.size
    data = np.frombuffer(raw, "<f4", n_vals, off).reshape(n, c * h * w)
    off += 4 * n_vals
    labels = np.frombuffer(raw, "<u2", n, off)
    domains = np.frombuffer(raw, "<u2", n, off + 2 * n)
    return Dataset("image" if mode == 0 else "vector", data.astype(np.float32),
                   labels, domains, k, n_domains, (c, h, w))


# palettes of the standard benchmark: gray source; blue/yellow, pale low-contrast
# and dark-red targets
STANDARD_STYLES = (
    Style((0.10, 0.10, 0.10), (0.90, 0.90, 0.90), noise=0.05, gradient=0.0),
    Style((0.15, 0.25, 0.70), (0.95, 0.80, 0.20), noise=0.05, gradient=0.10),
    Style((0.55, 0.60, 0.50), (0.85, 0.90, 0.75), noise=0.05, gradient=0.10),
    Style((0.50, 0.20, 0.20), (0.75, 0.70, 0.40), noise=0.05, gradient=0.10),
)


def standard_shifts(k: int) -> tuple[LabelShiftSpec, ...]:
    """Label shift per domain: uniform source, two reverse long-tailed targets, one Gaussian."""
    return (
        LabelShiftSpec("uniform"),
        LabelShiftSpec("reverse_long_tailed", ratio=0.5),
        LabelShiftSpec("reverse_long_tailed", ratio=0.7),
        LabelShiftSpec("gaussian", center=(k - 1) / 2, width=1.0),
    )


def standard_benchmark(seed: int = 0, n_per_domain: int = 800, k: int = 4) -> Dataset:
    """Blended-shapes benchmark with one source, three targets and label shift."""
    uniform = tuple([1.0 / k] * k)
    specs = [DomainSpec(i, s, n_per_domain, uniform) for i, s in enumerate(STANDARD_STYLES)]
    ds = make_blended_shapes(specs, k, seed)
    for dom, shift in enumerate(standard_shifts(k)):
        ds = resample_label_shift(ds, dom, shift, seed)
    return ds
