"""EMA shadow parameters and the fixed-capacity negative queues.

The shadow receives no gradients, ever: it is a plain elementwise moving
average of the online parameters, updated once per training step after the
optimizer. Queues are ring buffers of unit-norm projected vectors that serve
as contrastive negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .common import ConfigurationError, ContractViolation, STREAM_QUEUE, rng_from
from .encoders import ParamSet

_QUEUE_KINDS = {"text": 0, "image": 1}


@dataclass
class MomentumPair:
    online: ParamSet
    shadow: ParamSet
    m: float

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ConfigurationError(f"momentum coefficient must be in [0, 1], got {self.m}")
        if self.online.names() != self.shadow.names():
            raise ContractViolation("online and shadow parameter names differ")
        for name, t in self.online.items():
            if t.data.shape != self.shadow[name].data.shape:
                raise ContractViolation(f"shape mismatch for {name}")


def make_momentum_pair(online: ParamSet, m: float) -> MomentumPair:
    """Shadow starts as an exact copy of the online parameters."""
    return MomentumPair(online=online, shadow=online.copy(requires_grad=False), m=m)


def ema_update(pair: MomentumPair) -> ParamSet:
    """shadow <- m * shadow + (1 - m) * online, elementwise over every tensor."""
    m = pair.m
    for name, online_t in pair.online.items():
        shadow_t = pair.shadow[name]
        shadow_t.data = m * shadow_t.data + (1.0 - m) * online_t.data
    return pair.shadow


class NegativeQueue:
    """FIFO ring of the most recent `capacity` unit vectors."""

    def __init__(self, capacity: int, dim: int, kind: str, seed: int = 0, warm_start: bool = True):
        if kind not in _QUEUE_KINDS:
            raise ConfigurationError(f"queue kind must be one of {sorted(_QUEUE_KINDS)}, got {kind!r}")
        if capacity < 1:
            raise ConfigurationError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.kind = kind
        self.head = 0
        if warm_start:
            # seeded random unit vectors keep the contrastive denominator
            # well-defined from the very first step
            rng = rng_from(seed, STREAM_QUEUE, _QUEUE_KINDS[kind])
            buf = rng.normal(size=(capacity, dim))
            self.buffer = buf / np.linalg.norm(buf, axis=1, keepdims=True)
            self.filled = capacity
        else:
            self.buffer = np.zeros((capacity, dim))
            self.filled = 0

    def enqueue(self, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ContractViolation(f"expected (n, {self.dim}) batch, got {batch.shape}")
        if batch.shape[0] > self.capacity:
            raise ContractViolation("batch larger than queue capacity")
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ContractViolation(f"non-unit vector enqueued (worst norm {norms[np.argmax(np.abs(norms-1))]:.6f})")
        for row in batch:
            self.buffer[self.head] = row
            self.head = (self.head + 1) % self.capacity
        self.filled = min(self.capacity, self.filled + batch.shape[0])

    def negatives(self) -> np.ndarray:
        """Snapshot of the stored vectors, in stable storage order; gradients never flow in."""
        return self.buffer[: self.filled].copy()

    def state(self) -> dict:
        return {"buffer": self.buffer.copy(), "head": self.head, "filled": self.filled, "kind": self.kind}

    def load_state(self, state: dict):
        if state["kind"] != self.kind or state["buffer"].shape != self.buffer.shape:
            raise ContractViolation("queue state does not match this queue")
        self.buffer = np.asarray(state["buffer"], dtype=np.float64).copy()
        self.head = int(state["head"])
        self.filled = int(state["filled"])
