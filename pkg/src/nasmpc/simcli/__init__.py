"""Closed-loop simulation harness and example scenarios."""
from .loop import SimLog, SimResult, plot_data, run_closed_loop
from .scenarios import (
    CircularScenario,
    ParkingScenario,
    default_constraints,
    default_weights,
    scenario_circular,
    scenario_parking,
)
