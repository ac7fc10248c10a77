"""Shared exceptions and deterministic RNG derivation."""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    """A config value is outside its documented domain."""


class ContractViolation(ValueError):
    """A caller broke an operation precondition."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


# Stream codes keep functionally-derived RNGs from ever colliding across
# purposes. All randomness in the package flows through rng_from(seed, code, ...)
# so any state is reproducible from (seed, step) alone.
STREAM_DATA = 1
STREAM_SYNONYM = 2
STREAM_AUGMENT = 3
STREAM_MLM = 4
STREAM_DROPOUT = 5
STREAM_ITM = 6
STREAM_QUEUE = 7
STREAM_INIT = 8
STREAM_SHUFFLE = 9
STREAM_CRITIC = 10
STREAM_GRADCHECK = 11


def rng_from(*keys: int) -> np.random.Generator:
    """Generator derived from an integer key path, independent of any global state."""
    return np.random.default_rng([abs(int(k)) for k in keys])


def derive_seed(*keys: int) -> int:
    """Well-mixed 32-bit seed from an integer key path (for APIs taking one int)."""
    return int(np.random.SeedSequence([abs(int(k)) for k in keys]).generate_state(1)[0])
