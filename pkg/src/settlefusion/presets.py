"""Bundled run configurations.

``paper_scale`` mirrors the full-size experiment (100 scenarios, 64 steps,
126 grid points, width-100 subnets, 5000 offline iterations). ``desk`` is a
down-scaled configuration for the offline-training acceptance check, and
``study`` keeps the full 64-step horizon and monitoring grid (reduced
scenario count and width) so the measurement-fusion studies can sweep the
same step range as the full setup.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .ground import GroundModel, ScenarioSpec, make_grid
from .numkit import LrSchedule


@dataclass(frozen=True)
class RunConfig:
    name: str
    scenario: ScenarioSpec
    n_scenarios: int
    grid_x1: int
    grid_x2: int
    grid_length_m: float = 104.0
    grid_width_m: float = 80.0
    width: int = 100
    depth: int = 3
    residual_width: int = 100
    residual_depth: int = 2
    iterations: int = 5000
    online_iterations: int = 200
    batch_size: int | None = 200_000
    train_seed: int = 0
    lr: LrSchedule = field(default_factory=LrSchedule)

    def grid(self):
        return make_grid(self.grid_x1, self.grid_x2,
                         self.grid_length_m, self.grid_width_m)

    def ground_model(self) -> GroundModel:
        return GroundModel(pg_bounds=self.scenario.pg_bounds,
                           ps_bounds=self.scenario.ps_bounds)


def paper_scale() -> RunConfig:
    return RunConfig(
        name="paper-scale",
        scenario=ScenarioSpec(seed=91_000, n_steps=64),
        n_scenarios=100,
        grid_x1=14, grid_x2=9,
        width=100, depth=3,
        residual_width=100, residual_depth=2,
        iterations=5000, online_iterations=200,
        batch_size=200_000,
        train_seed=91_001,
    )


def desk() -> RunConfig:
    """Reduced configuration for fast offline training on a workstation."""
    return RunConfig(
        name="desk",
        scenario=ScenarioSpec(seed=41_000, n_steps=32),
        n_scenarios=30,
        grid_x1=16, grid_x2=3,
        width=64, depth=3,
        residual_width=32, residual_depth=2,
        iterations=2000, online_iterations=200,
        batch_size=20_000,
        train_seed=41_001,
    )


def study() -> RunConfig:
    """Full step horizon and monitoring grid with a reduced training budget."""
    return RunConfig(
        name="study",
        scenario=ScenarioSpec(seed=73_000, n_steps=64),
        n_scenarios=60,
        grid_x1=14, grid_x2=9,
        width=64, depth=3,
        residual_width=32, residual_depth=2,
        iterations=3000, online_iterations=200,
        batch_size=20_000,
        train_seed=73_001,
    )


PRESETS = {"paper-scale": paper_scale, "desk": desk, "study": study}
