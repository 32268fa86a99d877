"""Python interface to the wptsim transient simulator.

Scenarios may be given as a dict, a JSON string or a path to a JSON file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import numpy as np

from . import _wptsim
from ._wptsim import (
    SCHEMA_VERSION,
    SimulationError,
    ValidationError,
    detect_frequency,
    init_t_on,
    phase_error,
)

__all__ = [
    "SCHEMA_VERSION",
    "RunResult",
    "SimulationError",
    "ValidationError",
    "detect_frequency",
    "init_t_on",
    "load_scenario",
    "phase_error",
    "resolve",
    "run",
    "sweep",
    "tune_table",
    "write_outputs",
]

Scenario = Union[Mapping[str, Any], str, os.PathLike]


def _text(scenario: Scenario) -> str:
    if isinstance(scenario, Mapping):
        return json.dumps(scenario)
    if isinstance(scenario, os.PathLike) or (isinstance(scenario, str) and not scenario.lstrip().startswith("{")):
        with open(scenario, encoding="utf-8") as f:
            return f.read()
    return scenario


def load_scenario(scenario: Scenario) -> dict:
    """Parsed scenario document (not yet validated)."""
    return json.loads(_text(scenario))


def resolve(scenario: Scenario, **overrides) -> dict:
    """Validate and return the resolved scenario including derived quantities."""
    return json.loads(_wptsim.resolve(_text(scenario), **overrides))


@dataclass
class RunResult:
    metrics: dict
    scenario: dict
    columns: list[str]
    time: np.ndarray
    data: np.ndarray
    controller: list[tuple] = field(default_factory=list)
    crossings: list[tuple[str, float]] = field(default_factory=list)

    def probe(self, name: str) -> np.ndarray:
        """One waveform column by probe id."""
        return self.data[:, self.columns.index(name)]


def run(scenario: Scenario, *, trace: bool = True, **overrides) -> RunResult:
    """Simulate a scenario. Overrides: dt, lossy, parameter_free."""
    r = _wptsim.run(_text(scenario), trace=trace, **overrides)
    return RunResult(
        metrics=json.loads(r["metrics"]),
        scenario=json.loads(r["scenario"]),
        columns=list(r["columns"]),
        time=r["time"],
        data=r["data"],
        controller=list(r["controller"]),
        crossings=[tuple(c) for c in r["crossings"]],
    )


def write_outputs(scenario: Scenario, out_dir: Union[str, os.PathLike], **overrides) -> None:
    """Run and write waveform.csv, metrics.json, scenario.json, crossings.csv and controller.csv."""
    _wptsim.write_outputs(_text(scenario), os.fspath(out_dir), **overrides)


def sweep(scenario: Scenario, f_from: float, f_to: float, step: float, **kwargs) -> dict:
    """Frequency sweep. Keyword arguments: mode ('persistent' or 'independent'), threads, lossy."""
    return json.loads(_wptsim.sweep(_text(scenario), f_from, f_to, step, **kwargs))


def tune_table(scenario: Scenario, points: int = 21) -> list[tuple[float, float]]:
    """(frequency, on-time) pairs across the interceptor's tunable range."""
    return _wptsim.tune_table(_text(scenario), points)
