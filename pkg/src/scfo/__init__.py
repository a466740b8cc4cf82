"""Safe constrained optimization of uncertain plants by iterative set-point updates."""

from .algorithms import ALGORITHMS, AlgorithmSpec, next_target
from .bench import (ExperimentCell, ExperimentGrid, benchmark_problem, make_problem, read_trace_csv, run_cell,
                    run_experiment, run_grid, summarize_trace, write_trace_csv)
from .problem import CampaignTrace, History, IterateState, RtoProblem
from .qp import Infeasible, LinearSystem, solve_projection
from .supervisor import CampaignConfig, run_campaign, run_iteration
from .uncertainty import GradientBox, NoiseModel, build_gradient_box

__all__ = ["ALGORITHMS", "AlgorithmSpec", "CampaignConfig", "CampaignTrace", "ExperimentCell", "ExperimentGrid",
           "GradientBox", "History", "Infeasible", "IterateState", "LinearSystem", "NoiseModel", "RtoProblem",
           "benchmark_problem", "build_gradient_box", "make_problem", "next_target", "read_trace_csv", "run_campaign",
           "run_cell", "run_experiment", "run_grid", "run_iteration", "solve_projection", "summarize_trace",
           "write_trace_csv"]
