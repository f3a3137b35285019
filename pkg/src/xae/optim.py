"""Per-subnetwork optimizers with exponential learning-rate decay, and checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = [
    "ParamGroup", "GroupOptimizer", "OPTIMIZERS", "optimizer_step",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]

OPTIMIZERS = ("SGD", "Adam", "RMS")

# conventional defaults; the training protocol does not pin them
ADAM_BETAS = (0.9, 0.999)
RMS_ALPHA = 0.99
EPS = 1e-8


@dataclass
class ParamGroup:
    name: str
    params: list = field(default_factory=list)
    optimizer: str = "SGD"
    lr0: float = 1e-3
    gamma: float = 1.0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.gamma ** epoch

    def freeze(self) -> None:
        for p in self.params:
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params:
            p.requires_grad = True

    @property
    def frozen(self) -> bool:
        return bool(self.params) and not any(p.requires_grad for p in self.params)


class GroupOptimizer:
    """Holds the moment buffers for one ParamGroup."""

    def __init__(self, group: ParamGroup):
        self.group = group
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in group.params]
        self.v = [np.zeros_like(p.data) for p in group.params]
        self.last_lr: float | None = None

    def step(self, epoch: int) -> None:
        g = self.group
        if g.frozen:
            return
        lr = g.lr(epoch)
        self.last_lr = lr
        self.t += 1
        for i, p in enumerate(g.params):
            if p.grad is None:
                raise ValueError(f"group {g.name!r}: parameter {i} {p.shape} has no gradient")
            grad = p.grad
            if g.optimizer == "SGD":
                p.data -= (lr * grad).astype(p.dtype)
            elif g.optimizer == "Adam":
                b1, b2 = ADAM_BETAS
                self.m[i] = b1 * self.m[i] + (1 - b1) * grad
                self.v[i] = b2 * self.v[i] + (1 - b2) * grad * grad
                mhat = self.m[i] / (1 - b1 ** self.t)
                vhat = self.v[i] / (1 - b2 ** self.t)
                p.data -= (lr * mhat / (np.sqrt(vhat) + EPS)).astype(p.dtype)
            else:
                self.v[i] = RMS_ALPHA * self.v[i] + (1 - RMS_ALPHA) * grad * grad
                p.data -= (lr * grad / (np.sqrt(self.v[i]) + EPS)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.group.params:
            p.grad = None


def optimizer_step(group: ParamGroup, epoch: int, state: GroupOptimizer | None = None) -> GroupOptimizer:
    """Apply one update to ``group`` at ``lr0 * gamma**epoch``; returns the (possibly new) state."""
    state = state or GroupOptimizer(group)
    state.step(epoch)
    return state


# -- checkpoints ----------------------------------------------------------------------

MAGIC = b"XAE1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, groups: dict[str, list[Tensor]]) -> None:
    """Write groups as: magic, then per group name/tensor-count/tensors (little-endian)."""
    buf = bytearray(MAGIC)
    for name, tensors in groups.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", len(tensors))
        for t in tensors:
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            buf += struct.pack("<I", data.ndim)
            buf += struct.pack(f"<{data.ndim}I", *data.shape)
            buf += np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, list[np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4
    out: dict[str, list[np.ndarray]] = {}

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    while pos < len(blob):
        (n,) = take("<I")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (count,) = take("<I")
        tensors = []
        for _ in range(count):
            (rank,) = take("<I")
            shape = take(f"<{rank}I") if rank else ()
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated tensor in group {name!r}")
            tensors.append(np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy())
            pos += nbytes
        out[name] = tensors
    return out
