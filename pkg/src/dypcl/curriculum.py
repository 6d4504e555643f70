"""Negative-sampling curricula over intelligibility groups and difficulty bins.

Strategies:

* ``R``  - one phase, no filtering.
* ``G``  - groups H, M, L, VL in turn.
* ``P``  - difficulty bins easy to hard.
* ``PG`` - bin-major: for each bin (easy to hard), groups H to VL.
* ``GP`` - group-major: for each group, bins easy to hard.

Group filters apply to the positive's group.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .phonetics import DifficultyScheme
from .sampler import TripletSpec

log = logging.getLogger(__name__)

STRATEGIES = ("R", "G", "P", "PG", "GP")
DYSARTHRIC_GROUPS = ("H", "M", "L", "VL")


class PhaseStarvationError(RuntimeError):
    def __init__(self, groups, bin_):
        self.groups = groups
        self.bin = bin_
        g = "ALL" if groups is None else "+".join(groups)
        b = "ALL" if bin_ is None else str(bin_)
        super().__init__(f"no triplets match phase cell (group={g}, bin={b})")


@dataclass(frozen=True)
class Phase:
    groups: tuple[str, ...] | None  # None matches every group
    bin: int | None  # difficulty ordinal; None matches every bin
    budget: int

    def matches(self, t: TripletSpec) -> bool:
        if self.groups is not None and t.positive.group not in self.groups:
            return False
        return self.bin is None or t.bin == self.bin

    def describe(self, scheme: DifficultyScheme | None = None) -> tuple[str, str]:
        g = "ALL" if self.groups is None else ",".join(self.groups)
        if self.bin is None:
            b = "ALL"
        else:
            b = scheme.bin_label(self.bin) if scheme is not None else str(self.bin)
        return g, b


@dataclass(frozen=True)
class CurriculumSchedule:
    strategy: str
    scheme: DifficultyScheme
    phases: tuple[Phase, ...] = field(default_factory=tuple)

    @property
    def budget(self) -> int:
        return sum(p.budget for p in self.phases)

    def dump(self) -> str:
        """Plain-text table ``phase_index, groups, bin, budget``."""
        rows = [("phase_index", "groups", "bin", "budget")]
        for i, p in enumerate(self.phases):
            g, b = p.describe(self.scheme)
            rows.append((str(i), g, b, str(p.budget)))
        widths = [max(len(r[c]) for r in rows) for c in range(4)]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)

    def to_records(self) -> list[dict]:
        return [{"phase_index": i, "groups": list(p.groups) if p.groups else "ALL",
                 "bin": "ALL" if p.bin is None else p.bin, "budget": p.budget}
                for i, p in enumerate(self.phases)]


def _cells(strategy: str, scheme: DifficultyScheme):
    # ordinal 0 is the hardest bin, so easy -> hard is descending
    bins_easy_first = list(range(scheme.n_bins - 1, -1, -1))
    if strategy == "R":
        return [(None, None)]
    if strategy == "G":
        return [((g,), None) for g in DYSARTHRIC_GROUPS]
    if strategy == "P":
        return [(None, b) for b in bins_easy_first]
    if strategy == "PG":
        return [((g,), b) for b in bins_easy_first for g in DYSARTHRIC_GROUPS]
    if strategy == "GP":
        return [((g,), b) for g in DYSARTHRIC_GROUPS for b in bins_easy_first]
    raise ValueError(f"unknown curriculum strategy {strategy!r}; expected one of {STRATEGIES}")


def make_schedule(strategy: str, scheme: DifficultyScheme, epoch_budget: int) -> CurriculumSchedule:
    """Split ``epoch_budget`` equally over the strategy's phases, remainder to the earliest."""
    strategy = strategy.upper()
    cells = _cells(strategy, scheme)
    n = len(cells)
    if epoch_budget < n:
        raise ValueError(f"budget {epoch_budget} is smaller than the {n} phases of strategy {strategy}")
    base, rem = divmod(int(epoch_budget), n)
    phases = tuple(Phase(g, b, base + (1 if i < rem else 0)) for i, (g, b) in enumerate(cells))
    return CurriculumSchedule(strategy, scheme, phases)


def phase_filter(triplets: Sequence[TripletSpec], phase: Phase, seed: int) -> list[TripletSpec]:
    """Exactly ``phase.budget`` matching triplets, drawn uniformly.

    Sampling is without replacement unless the matching pool is smaller than
    the budget.
    """
    pool = [t for t in triplets if phase.matches(t)]
    if not pool:
        raise PhaseStarvationError(phase.groups, phase.bin)
    rng = np.random.default_rng(seed)
    replace = len(pool) < phase.budget
    if replace:
        g, b = phase.describe()
        log.info("phase (group=%s, bin=%s): pool %d < budget %d, sampling with replacement", g, b, len(pool), phase.budget)
    idx = rng.choice(len(pool), size=phase.budget, replace=replace)
    return [pool[i] for i in idx]


def run_schedule(triplets: Sequence[TripletSpec], schedule: CurriculumSchedule, seed: int):
    """Yield ``(phase_index, phase, triplets)`` in schedule order."""
    ss = np.random.SeedSequence(seed)
    for i, (phase, child) in enumerate(zip(schedule.phases, ss.spawn(len(schedule.phases)))):
        yield i, phase, phase_filter(triplets, phase, int(child.generate_state(1)[0]))
