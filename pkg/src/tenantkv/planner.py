"""Reservation planning: fairness metrics, interpolated performance
models, workload signatures, stochastic hill climbing, and elastic
redistribution of allocations from slow to busy tenants.
"""

import json
import math
import random
from dataclasses import dataclass
from typing import Dict, List, Tuple

GRID_POINTS = tuple(round(0.125 * k, 6) for k in range(1, 9))
GRID_STEP = 0.05
GRID_UNITS = 20           # 1.0 / GRID_STEP
MIN_SHARE = GRID_STEP     # every tenant keeps at least one unit per resource


def violation(baseline, actual):
    """Throughput violation (baseline - actual) / baseline, floored at 0."""
    if baseline <= 0:
        raise ValueError("baseline throughput must be positive")
    return max(0.0, (baseline - actual) / baseline)


def j_index(violations):
    """Jain fairness index over the violation vector, in [1/n, 1].

    Defined as 1 for the all-zero vector (no violations to spread).
    """
    v = list(violations)
    if not v:
        raise ValueError("empty violation vector")
    total = sum(v)
    squares = sum(x * x for x in v)
    if squares == 0:
        return 1.0
    return (total * total) / (len(v) * squares)


def efficiency(violations):
    """1 minus the mean violation."""
    v = list(violations)
    if not v:
        raise ValueError("empty violation vector")
    return 1.0 - sum(v) / len(v)


def d_score(j, e, alpha=0.5):
    """Combined objective alpha * J + (1 - alpha) * E."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * j + (1.0 - alpha) * e


def score_violations(violations, alpha=0.5):
    return d_score(j_index(violations), efficiency(violations), alpha)


@dataclass
class PerfProfile:
    """Offline throughput samples over the (cache, disk) reservation grid."""

    label: str
    key_repeat_ratio: float
    grid: Dict[Tuple[float, float], float]    # (cache, disk) -> throughput
    baseline: float

    def to_json(self):
        return {
            "label": self.label,
            "key_repeat_ratio": self.key_repeat_ratio,
            "grid": [{"c": c, "h": h, "t": t} for (c, h), t in sorted(self.grid.items())],
            "baseline": self.baseline,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            label=obj["label"],
            key_repeat_ratio=obj["key_repeat_ratio"],
            grid={(round(p["c"], 6), round(p["h"], 6)): p["t"] for p in obj["grid"]},
            baseline=obj["baseline"],
        )

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


class PerfModel:
    """Bilinear interpolant over a complete profile grid."""

    def __init__(self, profile):
        for c in GRID_POINTS:
            for h in GRID_POINTS:
                if (c, h) not in profile.grid:
                    raise ValueError(f"profile {profile.label!r} missing sample ({c}, {h})")
                if profile.grid[(c, h)] < 0:
                    raise ValueError("throughput samples must be >= 0")
        self.profile = profile
        self.key_repeat_ratio = profile.key_repeat_ratio
        self.baseline = profile.baseline
        self.label = profile.label

    def predict(self, r_cache, r_disk):
        """Interpolated throughput; queries below the sampled range clamp
        to the nearest edge."""
        c = min(max(r_cache, GRID_POINTS[0]), GRID_POINTS[-1])
        h = min(max(r_disk, GRID_POINTS[0]), GRID_POINTS[-1])
        c0, c1, fc = _bracket(c)
        h0, h1, fh = _bracket(h)
        g = self.profile.grid
        top = g[(c0, h1)] * (1 - fc) + g[(c1, h1)] * fc
        bottom = g[(c0, h0)] * (1 - fc) + g[(c1, h0)] * fc
        return bottom * (1 - fh) + top * fh


def _bracket(x):
    for i in range(len(GRID_POINTS) - 1):
        if x <= GRID_POINTS[i + 1]:
            lo, hi = GRID_POINTS[i], GRID_POINTS[i + 1]
            return lo, hi, (x - lo) / (hi - lo)
    last = GRID_POINTS[-1]
    return GRID_POINTS[-2], last, 1.0


def fit(profile):
    """Validate the grid and build the interpolant."""
    return PerfModel(profile)


def signature(accesses):
    """Key repeat ratio of a trace window: repeated accesses / total."""
    window = list(accesses)
    if not window:
        raise ValueError("empty trace window")
    return (len(window) - len(set(window))) / len(window)


def match(ratio, models):
    """Model with the closest key repeat ratio; ties pick the lower ratio."""
    if not models:
        raise ValueError("no models to match against")
    return min(models, key=lambda m: (abs(m.key_repeat_ratio - ratio),
                                      m.key_repeat_ratio))


@dataclass
class ReservationPlan:
    """Per-tenant (cache, disk) fractions on the 0.05 grid."""

    allocations: List[Tuple[float, float]]
    objective: float

    def to_json(self):
        return {
            "objective": self.objective,
            "tenants": [{"cache": c, "disk": h} for c, h in self.allocations],
        }


def _plan_violations(units, models, baselines):
    out = []
    for i, model in enumerate(models):
        predicted = model.predict(units[i][0] * GRID_STEP, units[i][1] * GRID_STEP)
        out.append(violation(baselines[i], predicted))
    return out


def _equal_units(n):
    """Largest-remainder split of the 20 grid units across n tenants."""
    base = GRID_UNITS // n
    units = [base] * n
    for i in range(GRID_UNITS - base * n):
        units[i] += 1
    return units


def hill_climb(models, baselines, alpha=0.5, grid_step=GRID_STEP, seed=0,
               max_iters=500):
    """Stochastic hill climbing over discretized reservations.

    Starts from the equal reservation; each step moves one 0.05 unit of
    one resource between two tenants, choosing among strictly improving
    neighbors with probability proportional to exp(improvement). Stops at
    a local optimum or after max_iters steps; deterministic given seed.
    """
    n = len(models)
    if n != len(baselines):
        raise ValueError("one baseline per model required")
    if n < 1:
        raise ValueError("at least one tenant required")
    if n >= GRID_UNITS:
        raise ValueError(f"grid of {GRID_UNITS} units cannot serve {n} tenants")
    if abs(grid_step - GRID_STEP) > 1e-12:
        raise ValueError("grid step is fixed at 0.05")

    rng = random.Random(seed)
    eq = _equal_units(n)
    state = [[eq[i], eq[i]] for i in range(n)]
    # Both resources use the same largest-remainder start, so each sums to
    # the full 20 units.
    current = score_violations(_plan_violations(
        [(s[0], s[1]) for s in state], models, baselines), alpha)

    for _ in range(max_iters):
        improving = []
        for resource in (0, 1):
            for donor in range(n):
                if state[donor][resource] <= 1:
                    continue
                for recipient in range(n):
                    if recipient == donor:
                        continue
                    state[donor][resource] -= 1
                    state[recipient][resource] += 1
                    cand = score_violations(_plan_violations(
                        [(s[0], s[1]) for s in state], models, baselines), alpha)
                    state[donor][resource] += 1
                    state[recipient][resource] -= 1
                    if cand > current + 1e-12:
                        improving.append((cand - current, resource, donor, recipient, cand))
        if not improving:
            break
        weights = [_softmax_weight(delta) for delta, *_ in improving]
        _, resource, donor, recipient, cand = rng.choices(improving, weights)[0]
        state[donor][resource] -= 1
        state[recipient][resource] += 1
        current = cand

    allocations = [(round(s[0] * GRID_STEP, 6), round(s[1] * GRID_STEP, 6))
                   for s in state]
    return ReservationPlan(allocations, current)


def _softmax_weight(delta):
    return math.exp(delta)


def elastic_redistribute(expected, actual, allocations):
    """Stepwise reallocation from slow tenants to busy ones.

    A tenant slowing down by each full 10% of its expected throughput
    gives away 10% of its base allocation; the pooled give-aways split
    evenly among busy tenants. Resource totals are conserved exactly.
    """
    tenants = list(allocations)
    give = {}
    for t in tenants:
        if expected[t] <= 0:
            raise ValueError("expected throughput must be positive")
        slowdown = max(0.0, 1.0 - actual[t] / expected[t])
        steps = int((slowdown + 1e-9) * 10)
        give[t] = min(steps, 10) * 0.10 * allocations[t]
    busy = [t for t in tenants if give[t] == 0]
    pool = sum(give.values())
    if not busy or pool == 0:
        return dict(allocations)
    adjusted = {}
    for t in tenants:
        adjusted[t] = allocations[t] - give[t]
        if t in busy:
            adjusted[t] += pool / len(busy)
    return adjusted
