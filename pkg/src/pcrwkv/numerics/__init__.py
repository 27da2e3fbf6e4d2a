"""Dense float64 arithmetic, reverse-mode autodiff, optimizer and checkpoint IO."""

import hashlib

import numpy as np

from . import autograd as ag
from .autograd import Node, backward, const, parameter
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradReport, check_grads, numeric_grad
from .optim import AdamWState, adamw_step, cosine_lr

Rng = np.random.Generator


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical sequences on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts (python's hash() is salted)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


__all__ = [
    "AdamWState",
    "Node",
    "Rng",
    "ag",
    "adamw_step",
    "backward",
    "const",
    "cosine_lr",
    "derive_seed",
    "load_checkpoint",
    "make_rng",
    "parameter",
    "save_checkpoint",
]
