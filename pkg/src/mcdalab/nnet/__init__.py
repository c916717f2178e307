"""Differentiable building blocks: models, AdaIN, gradient reversal, checks."""

from .autograd import Tensor, grl
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .model import (
    EPS,
    Arch,
    ForwardOutput,
    ModelBundle,
    adain,
    arch_for,
    channel_stats,
    discriminator_forward,
    forward,
    init_model,
    softmax,
)

__all__ = [
    "EPS", "Arch", "ForwardOutput", "GradCheckReport", "ModelBundle", "Tensor",
    "adain", "arch_for", "channel_stats", "discriminator_forward", "forward", "grad_check",
    "grl", "init_model", "load_checkpoint", "save_checkpoint", "softmax",
]
