"""Turnpike-based estimation workbench.

Full information estimation, truncated and pinned window problems, a
stitched approximate estimator, moving horizon estimation and tools that
measure how closely window solutions track the full-record optimum.
"""

from .cost import CostWeights, EstimateTrajectory, stage_cost, terminal_cost, total_cost
from .estimators import (
    ApproxEstimate,
    MHEEstimate,
    WindowCache,
    WindowSolution,
    approximate_estimator,
    fie_reference,
    mhe_sequence,
    solve_window,
)
from .performance import (
    PerfReport,
    averaged_performance,
    linear_growth_constants,
    perf_report,
    performance_bound,
    sne,
)
from .solver import ProblemSpec, SolveReport, SolverError, ToleranceConfig, kkt_residual, solve
from .system_model import (
    BatchReactor,
    Box,
    ConstraintSets,
    DataBatch,
    LinearModel,
    Scenario,
    batch_reactor_scenario,
    motivating_scenario,
    simulate,
)
from .turnpike import (
    EnvelopeFit,
    GapProfile,
    excursion_count,
    fit_envelope,
    gap_profile,
    sensitivity_probe,
    turnpike_scan,
)

__version__ = "0.1.0"
