"""Noise schedules on the discrete grid t(i) = i/T and unmask-count schedules."""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, UndefinedStepError

KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Survival probability ``alpha_t`` of an unmasked token.

    ``alpha`` is exactly 1 at ``t=0`` and exactly 0 at ``t=1``.
    """

    kind: str = "cosine"
    steps: int = 15

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown schedule kind {self.kind!r}")
        if int(self.steps) < 1:
            raise InvalidInputError("schedule needs at least one step")

    def alpha(self, t):
        t = float(t)
        if not 0.0 <= t <= 1.0 or math.isnan(t):
            raise InvalidInputError(f"time must lie in [0, 1], got {t}")
        if t == 0.0:
            return 1.0
        if t == 1.0:
            return 0.0
        if self.kind == "linear":
            return 1.0 - t
        return math.cos(math.pi * t / 2.0)

    def t(self, i):
        return i / self.steps

    def s(self, i):
        return (i - 1) / self.steps

    def alpha_t(self, i):
        return self.alpha(self.t(i))

    def alpha_s(self, i):
        return self.alpha(self.s(i))

    def values(self):
        return np.array([self.alpha(self.t(i)) for i in range(self.steps + 1)])

    def reveal_weight(self, i):
        """Probability that a masked token at t(i) is revealed by s(i)."""
        i = int(i)
        if not 1 <= i <= self.steps:
            raise UndefinedStepError(f"step index must lie in [1, {self.steps}], got {i}")
        return reveal_weight_from_alphas(self.alpha_s(i), self.alpha_t(i))

    def stay_weight(self, i):
        i = int(i)
        if not 1 <= i <= self.steps:
            raise UndefinedStepError(f"step index must lie in [1, {self.steps}], got {i}")
        a_t = self.alpha_t(i)
        return (1.0 - self.alpha_s(i)) / (1.0 - a_t)


def reveal_weight_from_alphas(alpha_s, alpha_t):
    if alpha_t >= 1.0:
        raise UndefinedStepError("reveal weight undefined when alpha_t = 1")
    return (alpha_s - alpha_t) / (1.0 - alpha_t)


def unmask_counts(L, T):
    """Cumulative number of revealed positions after each of the T reverse steps.

    Follows the cosine count rule ``round(L * (1 - cos(pi j / 2T)))``, made
    non-decreasing and finishing at ``L``.
    """
    L, T = int(L), int(T)
    if L < 1 or T < 1:
        raise InvalidInputError("unmask_counts needs L >= 1 and T >= 1")
    j = np.arange(1, T + 1)
    n = np.rint(L * (1.0 - np.cos(np.pi * j / (2.0 * T)))).astype(np.int64)
    n = np.clip(np.maximum.accumulate(n), 0, L)
    n[-1] = L
    return n
