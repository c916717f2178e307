"""Shallow extractor, deep extractor, classifier and categorical discriminator.

Image mode::

    g1: conv3x3 3->16, stride 1, pad 1, ReLU          (low-level feature map)
    g2: conv3x3 16->32, stride 2, pad 1, ReLU,
        conv3x3 32->32, stride 2, pad 1, ReLU, GAP    (32-d feature)
    h:  linear 32->k
    D:  linear 32->64, ReLU, linear 64->k             (one sigmoid per class)

Vector mode replaces g1 by ``affine d->32 + ReLU`` viewed as a one-channel
map of 32 positions, and g2 by ``affine 32->32 + ReLU``.

Parameters are plain float64 arrays held in :class:`ModelBundle`. The
``trace_*`` functions take a dict of :class:`~.autograd.Tensor` so the
same code serves evaluation and differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from ..errors import LabError
from ..seeding import make_rng
from .autograd import Tensor, conv2d, relu, sigmoid, sqrt

EPS = 1e-5


@dataclass(frozen=True)
class Arch:
    mode: str = "image"
    k: int = 4
    in_shape: tuple[int, ...] = (3, 16, 16)
    low_channels: int = 16
    feat: int = 32
    disc_hidden: int = 64
    disc_out: int | None = None  # None -> k; 1 for a binary (DANN) discriminator

    @property
    def d_out(self) -> int:
        return self.k if self.disc_out is None else self.disc_out

    def validate(self) -> None:
        if self.mode not in ("image", "vector"):
            raise LabError("E_BAD_ARCH", f"mode must be image or vector, got {self.mode!r}")
        if self.k < 1:
            raise LabError("E_BAD_ARCH", f"k must be positive, got {self.k}")
        if self.mode == "image" and len(self.in_shape) != 3:
            raise LabError("E_BAD_ARCH", "image mode needs a (c, h, w) input shape")
        if self.mode == "vector" and len(self.in_shape) != 1:
            raise LabError("E_BAD_ARCH", "vector mode needs a (d,) input shape")
        if min(self.in_shape + (self.low_channels, self.feat, self.disc_hidden, self.d_out)) < 1:
            raise LabError("E_BAD_ARCH", "all widths must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.mode == "image":
            c = self.in_shape[0]
            g = {"g1.w": (self.low_channels, c, 3, 3), "g1.b": (self.low_channels,),
                 "g2.w": (self.feat, self.low_channels, 3, 3), "g2.b": (self.feat,),
                 "g3.w": (self.feat, self.feat, 3, 3), "g3.b": (self.feat,)}
        else:
            g = {"g1.w": (self.in_shape[0], self.feat), "g1.b": (self.feat,),
                 "g2.w": (self.feat, self.feat), "g2.b": (self.feat,)}
        return {**g,
                "h.w": (self.feat, self.k), "h.b": (self.k,),
                "d1.w": (self.feat, self.disc_hidden), "d1.b": (self.disc_hidden,),
                "d2.w": (self.disc_hidden, self.d_out), "d2.b": (self.d_out,)}


def arch_for(ds, **overrides) -> Arch:
    """Default architecture matching a dataset's mode, input shape and class count."""
    in_shape = ds.shape if ds.mode == "image" else (int(np.prod(ds.shape)),)
    return Arch(mode=ds.mode, k=ds.k, in_shape=tuple(in_shape), **overrides)


FEATURE_BLOCKS = ("g1.w", "g1.b", "g2.w", "g2.b", "g3.w", "g3.b")  # g3 only in image mode
CLASSIFIER_BLOCKS = ("h.w", "h.b")
DISC_BLOCKS = ("d1.w", "d1.b", "d2.w", "d2.b")


@dataclass(frozen=True)
class ModelBundle:
    arch: Arch
    params: dict[str, np.ndarray] = field(repr=False)

    def with_params(self, params: dict[str, np.ndarray]) -> "ModelBundle":
        return replace(self, params=params)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {name: Tensor(v, requires_grad=requires_grad) for name, v in self.params.items()}

    def equals(self, other: "ModelBundle") -> bool:
        return self.arch == other.arch and self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[n], other.params[n]) for n in self.params)


def init_model(arch: Arch, seed: int) -> ModelBundle:
    """Glorot-uniform weights, zero biases."""
    arch.validate()
    rng = make_rng(seed, 0x1417)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        else:
            fan_in, fan_out = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, shape)
    return ModelBundle(arch, params)


# traced building blocks ------------------------------------------------------

def trace_g1(P: dict[str, Tensor], x: Tensor, arch: Arch) -> Tensor:
    if arch.mode == "image":
        # pixels in [0, 1] are centered before the first convolution
        return relu(conv2d(x - 0.5, P["g1.w"], P["g1.b"], stride=1, pad=1))
    z = relu(x @ P["g1.w"] + P["g1.b"])
    return z.reshape(z.shape[0], 1, 1, arch.feat)


def trace_g2(P: dict[str, Tensor], z_low: Tensor, arch: Arch) -> Tensor:
    if arch.mode == "image":
        z = relu(conv2d(z_low, P["g2.w"], P["g2.b"], stride=2, pad=1))
        return relu(conv2d(z, P["g3.w"], P["g3.b"], stride=2, pad=1)).mean(axis=(2, 3))
    return relu(z_low.reshape(z_low.shape[0], arch.feat) @ P["g2.w"] + P["g2.b"])


def trace_head(P: dict[str, Tensor], z: Tensor) -> Tensor:
    return z @ P["h.w"] + P["h.b"]


def trace_disc(P: dict[str, Tensor], z: Tensor) -> Tensor:
    """Discriminator logits; the probabilities are their elementwise sigmoids."""
    return relu(z @ P["d1.w"] + P["d1.b"]) @ P["d2.w"] + P["d2.b"]


def channel_stats_t(z: Tensor, eps: float = EPS) -> tuple[Tensor, Tensor]:
    mu = z.mean(axis=(2, 3), keepdims=True)
    centered = z - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    return mu, sqrt(var + eps)


def adain_t(z_s: Tensor, z_t: np.ndarray, eps: float = EPS) -> Tensor:
    """AdaIN with gradient through the content map only; target stats are constants."""
    mu_t, sigma_t = channel_stats(z_t, eps)
    mu_s, sigma_s = channel_stats_t(z_s, eps)
    return (z_s - mu_s) / sigma_s * sigma_t[..., None, None] + mu_t[..., None, None]


# numpy-level API ---------------------------------------------------------------

class ForwardOutput(NamedTuple):
    z_low: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def check_input(arch: Arch, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(arch.in_shape):
        x = x[None]
    if x.shape[1:] != tuple(arch.in_shape):
        raise LabError("E_SHAPE", f"expected input shape (n, {arch.in_shape}), got {x.shape}")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(bundle: ModelBundle, x: np.ndarray, chunk: int = 512) -> ForwardOutput:
    """Evaluate g1, g2 and h on a batch, in chunks, without recording gradients."""
    arch = bundle.arch
    x = check_input(arch, x)
    P = bundle.tensors()
    parts = []
    for s in range(0, len(x), chunk):
        z_low = trace_g1(P, Tensor(x[s:s + chunk]), arch)
        z = trace_g2(P, z_low, arch)
        parts.append((z_low.data, z.data, trace_head(P, z).data))
    z_low, z, logits = (np.concatenate(p) for p in zip(*parts))
    return ForwardOutput(z_low, z, logits, softmax(logits))


def discriminator_forward(bundle: ModelBundle, z: np.ndarray) -> np.ndarray:
    """Per-class source probabilities in (0, 1); no normalization across classes."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    if z.shape[1] != bundle.arch.feat:
        raise LabError("E_SHAPE", f"feature width {z.shape[1]} != {bundle.arch.feat}")
    return sigmoid(trace_disc(bundle.tensors(), Tensor(z)).data)


def _as_batched_map(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        z = z[None]
    if z.ndim != 4:
        raise LabError("E_SHAPE", f"feature map must be (C, H, W) or (N, C, H, W), got {z.shape}")
    return z


def channel_stats(z: np.ndarray, eps: float = EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial mean and eps-regularized population std.

    Accepts a single (C, H, W) map or a batch (N, C, H, W); returns arrays
    of shape (C,) or (N, C) accordingly.
    """
    single = np.ndim(z) == 3
    z = _as_batched_map(z)
    if z.shape[2] * z.shape[3] == 0:
        raise LabError("E_EMPTY", "feature map has no spatial positions")
    mu = z.mean(axis=(2, 3))
    var = ((z - mu[..., None, None]) ** 2).mean(axis=(2, 3))
    sigma = np.sqrt(var + eps)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def adain(z_s: np.ndarray, z_t: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Re-style the content map ``z_s`` with the channel statistics of ``z_t``."""
    single = np.ndim(z_s) == 3
    zs, zt = _as_batched_map(z_s), _as_batched_map(z_t)
    if zs.shape != zt.shape:
        raise LabError("E_SHAPE", f"AdaIN layouts differ: {zs.shape} vs {zt.shape}")
    out = adain_t(Tensor(zs), zt, eps).data
    return out[0] if single else out
