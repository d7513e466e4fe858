"""Deviation policies: how ``(u_{n+1}, v_{n+1})`` are proposed.

The solver clips every proposal to the budget, so a policy only has to
pick a direction and a size it would like.
"""

from __future__ import annotations

import numpy as np

from .fb import DeviationBudget, FbState
from .schedules import rng_for


class ZeroPolicy:
    """``u = v = 0``: the classical (relaxed, preconditioned) iteration."""

    def propose(self, state: FbState, budget: DeviationBudget):
        z = np.zeros_like(state.x)
        return z, z.copy()


class MomentumPolicy:
    """Deviations along the last step ``x_{n+1} - x_n``, as large as the budget allows.

    ``mode`` selects which deviation carries the momentum: ``"v"``, ``"u"``
    or ``"uv"`` (both equal, as in the single-deviation variant). The
    scaling is capped at ``a_max``.
    """

    def __init__(self, mode: str = "uv", a_max: float = 10.0):
        if mode not in ("u", "v", "uv"):
            raise ValueError("mode must be 'u', 'v' or 'uv'")
        self.mode = mode
        self.a_max = float(a_max)
        self.last_a = 0.0

    def propose(self, state: FbState, budget: DeviationBudget):
        d = state.x - state.last.x
        use_u = "u" in self.mode and budget.weight_u > 0
        use_v = "v" in self.mode
        zero = np.zeros_like(d)
        unit = budget.lhs(d if use_u else zero, d if use_v else zero)
        a = self.a_max if unit == 0 else min(self.a_max, float(np.sqrt(budget.rhs / unit)))
        self.last_a = a
        return (a * d if use_u else zero), (a * d if use_v else zero.copy())


class RandomPolicy:
    """Random directions filling a random fraction of the budget."""

    def __init__(self, seed: int = 0, low: float = 0.0, high: float = 1.0):
        self.rng = rng_for(seed, "policy.random")
        self.low, self.high = low, high

    def propose(self, state: FbState, budget: DeviationBudget):
        u = self.rng.standard_normal(state.x.shape)
        v = self.rng.standard_normal(state.x.shape)
        lhs = budget.lhs(u, v)
        if lhs == 0:
            return u * 0, v * 0
        frac = self.rng.uniform(self.low, self.high)
        s = np.sqrt(frac * budget.rhs / lhs)
        return s * u, s * v


class HostilePolicy:
    """Proposals ``factor`` times larger (in norm) than the budget permits.

    Exercises the solver's safeguard; never useful on its own.
    """

    def __init__(self, seed: int = 0, factor: float = 100.0):
        self.rng = rng_for(seed, "policy.hostile")
        self.factor = float(factor)

    def propose(self, state: FbState, budget: DeviationBudget):
        u = self.rng.standard_normal(state.x.shape)
        v = self.rng.standard_normal(state.x.shape)
        lhs = budget.lhs(u, v)
        if lhs == 0 or budget.rhs == 0:
            return self.factor * u, self.factor * v
        s = self.factor * np.sqrt(budget.rhs / lhs)
        return s * u, s * v


POLICIES = {"zero": ZeroPolicy, "momentum": MomentumPolicy, "random": RandomPolicy, "hostile": HostilePolicy}
