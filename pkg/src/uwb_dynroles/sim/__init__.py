from .engine import RunResult, SimulationCollapse, run_scenario, step_world
from .metrics import MetricsRecord, apply_smoothing, box_stats, records_from_csv, records_to_csv, summarize
from .presets import line_scenario, rectangle_scenario
from .scenario import Scenario, ScenarioError, apply_overrides, load, loads

__all__ = [
    "MetricsRecord", "RunResult", "Scenario", "ScenarioError", "SimulationCollapse",
    "apply_overrides", "apply_smoothing", "box_stats", "line_scenario", "load", "loads",
    "records_from_csv", "records_to_csv", "rectangle_scenario", "run_scenario", "step_world", "summarize",
]
