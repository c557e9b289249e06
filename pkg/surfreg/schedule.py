"""Power-of-two staircase schedule deciding which iterations regularise."""

import math
from dataclasses import dataclass
from typing import Dict, List

from .errors import ConfigError
from .sphere import is_power_of_two

PRESETS: Dict[str, tuple] = {
    "1024-8": (1024, 8),
    "512-4": (512, 4),
    "256-2": (256, 2),
    "128-1": (128, 1),
}


@dataclass(frozen=True)
class Stage:
    """One step of the staircase: iterations [start, end) regularised every ``period``."""

    index: int
    start: int
    end: int
    period: int

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def regularized_steps(self) -> int:
        """Multiples of ``period`` in [start, end)."""
        if self.end <= self.start:
            return 0
        first = -(-self.start // self.period)
        last = (self.end - 1) // self.period
        return max(last - first + 1, 0)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Equal-length stages whose period halves from ``initial_period`` to ``final_period``."""

    initial_period: int = 512
    final_period: int = 4
    total_iterations: int = 25000

    def __post_init__(self):
        if not is_power_of_two(self.initial_period) or not is_power_of_two(self.final_period):
            raise ConfigError("schedule periods must be powers of two")
        if self.final_period > self.initial_period:
            raise ConfigError(
                f"final_period ({self.final_period}) must not exceed initial_period ({self.initial_period})"
            )
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be positive")

    @classmethod
    def preset(cls, name: str, total_iterations: int = 25000) -> "CurriculumSchedule":
        """One of the frequency variants ``1024-8``, ``512-4``, ``256-2``, ``128-1``."""
        if name not in PRESETS:
            raise ConfigError(f"unknown schedule preset '{name}', expected one of {sorted(PRESETS)}")
        initial, final = PRESETS[name]
        return cls(initial, final, total_iterations)

    @classmethod
    def constant(cls, period: int, total_iterations: int) -> "CurriculumSchedule":
        return cls(period, period, total_iterations)

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.initial_period // self.final_period))) + 1

    def stage_of(self, iteration: int) -> int:
        return min(self.n_stages - 1, iteration * self.n_stages // self.total_iterations)

    def period_at(self, iteration: int) -> int:
        return self.initial_period >> self.stage_of(iteration)

    def stages(self) -> List[Stage]:
        result = []
        for s in range(self.n_stages):
            start = -(-s * self.total_iterations // self.n_stages)
            end = -(-(s + 1) * self.total_iterations // self.n_stages)
            result.append(Stage(s, start, end, self.initial_period >> s))
        return result

    def regularized_step_count(self) -> int:
        """Closed-form number of regularised iterations."""
        return sum(stage.regularized_steps for stage in self.stages())


def is_reg_step(schedule: CurriculumSchedule, iteration: int) -> bool:
    """True when ``iteration`` is a multiple of its stage's period."""
    if iteration < 0:
        raise ConfigError("iteration must be non-negative")
    return iteration % schedule.period_at(iteration) == 0


def schedule_preview(schedule: CurriculumSchedule, extra_cost: float = 1.0) -> List[Dict[str, float]]:
    """Per-stage table rows with cumulative counts and the time overhead estimate.

    ``extra_cost`` is the cost of a regularised step beyond a plain one, in
    plain-step units (1.0 means a regularised step takes twice as long).
    """
    rows = []
    cumulative = 0
    for stage in schedule.stages():
        cumulative += stage.regularized_steps
        rows.append(
            {
                "stage": stage.index,
                "start": stage.start,
                "end": stage.end,
                "period": stage.period,
                "reg_steps": stage.regularized_steps,
                "cumulative": cumulative,
                "overhead_pct": 100.0 * cumulative * extra_cost / schedule.total_iterations,
            }
        )
    return rows
