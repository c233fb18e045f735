"""Time-series simulation harness, metrics and report writing."""

from svvc.sim.engine import MetricsReport, SimulationError, count_violation, run_case, settle
from svvc.sim.scenario import Scenario, ScenarioError, bundled_scenarios, load_scenario

__all__ = ["MetricsReport", "Scenario", "ScenarioError", "SimulationError", "bundled_scenarios",
           "count_violation", "load_scenario", "run_case", "settle"]
