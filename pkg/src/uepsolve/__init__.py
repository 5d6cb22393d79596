"""uepsolve: computing equilibria of nonlinear systems through a surrogate
gradient flow and pseudo-transient continuation, with Newton-family baselines,
a structure-preserving power-system model, and convergence-region mapping."""

from .systems import (
    DefinitenessReport,
    EvaluationFailure,
    FdConfig,
    NonlinearSystem,
    QgsSystem,
    eval_residual,
    fd_jacobian,
    qgs_field,
    qgs_jacobian_approx,
    qgs_jacobian_exact,
    system_jacobian,
    verify_qgs_sep,
)
from .solvers import (
    SOLVERS,
    SolverConfig,
    SolverResult,
    StepController,
    classify_solution,
    continuous_newton_solve,
    hybrid_solve,
    newton_solve,
    psitc_exact_solve,
    psitc_solve,
    qgs_psitc_solve,
    qgs_psitc_step,
    ser_update,
    step_norm_update,
)
from .power_model import (
    Bus,
    Contingency,
    Line,
    Machine,
    PowerCase,
    PowerFlowError,
    SepSolution,
    SpmSystem,
    apply_contingency,
    assemble_spm,
    build_ybus,
    bundled_case_path,
    bundled_contingencies_path,
    coi_quantities,
    fold_constant_impedance_loads,
    load_case,
    load_contingencies,
    power_flow_sep,
    spm_residual,
)
from .region import (
    GridSpec,
    PointOutcome,
    RegionMap,
    RegionStats,
    classify_point,
    connected_stats,
    generate_grid,
    map_region,
)
from . import synthetic

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
