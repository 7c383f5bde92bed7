"""Control laws evaluated step by step along simulated paths.

A law maps ``(k, t, x)`` with ``x`` of shape (M, n) to controls of shape
(M, k_dim). Laws are pure; feedback laws are frozen along the base path
by the variation and SMP machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class ControlLaw:
    """Base class: subclasses implement ``evaluate``."""

    control_dim: int = 1

    def evaluate(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, k, t, x):
        return self.evaluate(k, t, x)


@dataclass(frozen=True)
class ConstantControl(ControlLaw):
    """u_t = value for all t."""

    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", np.atleast_1d(np.asarray(self.value, dtype=float)))

    @property
    def control_dim(self):
        return self.value.size

    def evaluate(self, k, t, x):
        return np.broadcast_to(self.value, (x.shape[0], self.value.size))


@dataclass(frozen=True)
class LinearFeedback(ControlLaw):
    """u = offset + gain @ x, with gain of shape (k_dim, n)."""

    gain: np.ndarray
    offset: Optional[np.ndarray] = None

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        object.__setattr__(self, "gain", gain)
        off = np.zeros(gain.shape[0]) if self.offset is None else np.atleast_1d(np.asarray(self.offset, dtype=float))
        object.__setattr__(self, "offset", off)

    @property
    def control_dim(self):
        return self.gain.shape[0]

    def evaluate(self, k, t, x):
        if self.gain.shape == (1, 1):
            return self.offset + self.gain[0, 0] * x
        return self.offset + x @ self.gain.T


@dataclass(frozen=True)
class FunctionFeedback(ControlLaw):
    """u = fn(t, x) for an arbitrary vectorized map."""

    fn: Callable[[float, np.ndarray], np.ndarray]
    dim: int = 1

    @property
    def control_dim(self):
        return self.dim

    def evaluate(self, k, t, x):
        return np.asarray(self.fn(t, x), dtype=float).reshape(x.shape[0], self.dim)


@dataclass(frozen=True)
class SpikeControl(ControlLaw):
    """Equal to ``base`` off steps [start_step, end_step) and to ``v`` on them."""

    base: ControlLaw
    start_step: int
    end_step: int
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.atleast_1d(np.asarray(self.v, dtype=float)))

    @property
    def control_dim(self):
        return self.v.size

    def active(self, k: int) -> bool:
        return self.start_step <= k < self.end_step

    def evaluate(self, k, t, x):
        if self.active(k):
            return np.broadcast_to(self.v, (x.shape[0], self.v.size))
        return self.base.evaluate(k, t, x)
