"""Solvers for driving a nonlinear system to an equilibrium.

Five methods are provided:

* ``newton_solve`` -- damped-free Newton-Raphson iteration.
* ``continuous_newton_solve`` -- RK4 integration of the Newton flow
  x' = -DF(x)^{-1} F(x).
* ``psitc_solve`` -- pseudo-transient continuation for a generic flow
  x' = -G(x): implicit-Euler-like steps (h^{-1} I + DG) s = -G with an
  adaptively growing pseudo-time step.
* ``psitc_exact_solve`` / ``qgs_psitc_solve`` -- pseudo-transient continuation
  applied to the surrogate gradient flow of a system, with either the exact
  (finite-differenced) flow Jacobian or the Gauss-Newton approximation
  DF^T DF.  The approximate variant solves a shifted normal-equation or
  stacked least-squares problem per step, and is guarded so that it reports
  success only at regular roots of F, never at stationary points of the flow
  that are not roots (or are degenerate roots).
* ``hybrid_solve`` -- Newton first, gradient-flow continuation as a restart
  when Newton fails, Newton again for the endgame.

All solvers share SolverConfig/SolverResult and count one outer loop pass as
one iteration (a CNR iteration performs four stage solves).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .systems import (
    FD_SOLVER,
    EvaluationFailure,
    FdConfig,
    NonlinearSystem,
    QgsSystem,
    eval_residual,
    ldl_pivots,
    qgs_jacobian_exact,
    system_jacobian,
)

# result statuses
CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
DIVERGED = "diverged"
SPURIOUS_STATIONARY = "spurious-stationary"
LINEAR_SOLVE_FAILURE = "linear-solve-failure"

# solution classes
TYPE_1 = "type-1"
TYPE_2 = "type-2"
TYPE_3 = "type-3"
NOT_CLASSIFIED = "not-classified"

SER = "ser"
STEP_NORM = "step-norm"
NORMAL_EQUATIONS = "normal-equations"
LEAST_SQUARES = "least-squares"


@dataclass
class SolverConfig:
    """Shared solver settings.

    tolerance is the convergence threshold on ||F(x)||_2.  h0/h_max control
    the pseudo-time step (h_max defaults to infinity; experiments in the
    source material run uncapped).  step_rule selects how h evolves: "ser"
    scales h by the ratio of successive flow-field norms, "step-norm" scales
    it by the norm of the last step (the latter is ambiguous in its published
    form and implemented literally as h <- min(h * ||step||, h_max)).
    inexactness is a recorded bound for diagnostics only; the direct solves
    used here are exact to roundoff.
    """

    tolerance: float = 1e-6
    h0: float = 0.1
    h_max: float = math.inf
    max_iterations: int = 100
    step_rule: str = SER
    linear_strategy: str = NORMAL_EQUATIONS
    inexactness: float = 0.0
    cnr_step: float = 1.0
    hybrid_switch_threshold: float = 1e-2
    hybrid_nr_budget: int = 20
    stagnation_window: int = 8
    degenerate_pivot_ratio: float = 100.0
    divergence_factor: float = 1e6
    fd: FdConfig = field(default_factory=lambda: FD_SOLVER)

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.h0 <= 0.0:
            raise ValueError("h0 must be positive")
        if self.h_max < self.h0:
            raise ValueError("h_max must be at least h0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be a positive integer")
        if self.step_rule not in (SER, STEP_NORM):
            raise ValueError("step_rule must be 'ser' or 'step-norm'")
        if self.linear_strategy not in (NORMAL_EQUATIONS, LEAST_SQUARES):
            raise ValueError(
                "linear_strategy must be 'normal-equations' or 'least-squares'"
            )
        if self.hybrid_switch_threshold < self.tolerance:
            raise ValueError("hybrid_switch_threshold must be >= tolerance")
        if self.stagnation_window < 1:
            raise ValueError("stagnation_window must be a positive integer")

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "tolerance",
                "h0",
                "h_max",
                "max_iterations",
                "step_rule",
                "linear_strategy",
                "inexactness",
                "cnr_step",
                "hybrid_switch_threshold",
                "hybrid_nr_budget",
                "stagnation_window",
                "degenerate_pivot_ratio",
                "divergence_factor",
            )
        }
        d["fd_perturbation"] = self.fd.perturbation
        d["fd_scheme"] = self.fd.scheme
        return d


@dataclass
class TraceRecord:
    iteration: int
    residual_norm: float
    h: float


@dataclass
class SolverResult:
    status: str
    solution: np.ndarray
    residual_norm: float
    iterations: int
    classification: str = NOT_CLASSIFIED
    trace: list[TraceRecord] = field(default_factory=list)
    wall_time: float = 0.0
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "solution": [float(v) for v in np.atleast_1d(self.solution)],
            "residual_norm": float(self.residual_norm),
            "iterations": int(self.iterations),
            "classification": self.classification,
            "wall_time": float(self.wall_time),
            "message": self.message,
            "trace": [
                {"iteration": t.iteration, "residual_norm": t.residual_norm, "h": t.h}
                for t in self.trace
            ],
        }


@dataclass
class StepController:
    """Pseudo-time step state: current h, its cap, and the last field norm."""

    rule: str = SER
    h: float = 0.1
    h_max: float = math.inf
    previous_residual_norm: float = math.nan


def ser_update(ctrl: StepController, current_residual_norm: float) -> float:
    """Grow/shrink h by the ratio of successive flow-field norms.

    Callers must not consult the controller once the field norm hits zero;
    that means the flow has reached a stationary point.
    """
    if current_residual_norm <= 0.0:
        raise ValueError("SER update requires a positive current residual norm")
    if math.isfinite(ctrl.previous_residual_norm):
        ctrl.h = min(ctrl.h * ctrl.previous_residual_norm / current_residual_norm,
                     ctrl.h_max)
    ctrl.previous_residual_norm = current_residual_norm
    return ctrl.h


def step_norm_update(ctrl: StepController, step: np.ndarray) -> float:
    """Scale h by the norm of the step just taken (literal published form)."""
    ctrl.h = min(ctrl.h * float(np.linalg.norm(step)), ctrl.h_max)
    return ctrl.h


def classify_solution(sys: NonlinearSystem, x, tolerance: float,
                      fd: FdConfig = FD_SOLVER) -> str:
    """Classify a stationary point of the surrogate gradient flow.

    Requires ||DF^T F|| <= tolerance (otherwise "not-classified").  A point
    with ||F|| <= tolerance is "type-1" when DF^T DF is numerically positive
    definite and "type-3" when it is singular; a stationary point whose
    residual stays above tolerance is "type-2".
    """
    f = eval_residual(sys, x)
    jac = system_jacobian(sys, x, fd)
    grad = jac.T @ f
    if np.linalg.norm(grad) > tolerance:
        return NOT_CLASSIFIED
    if np.linalg.norm(f) > tolerance:
        return TYPE_2
    gram = jac.T @ jac
    piv = ldl_pivots(0.5 * (gram + gram.T))
    n = gram.shape[0]
    max_diag = float(np.max(np.abs(np.diag(gram))))
    if piv.min() <= n * np.finfo(float).eps * max_diag:
        return TYPE_3
    return TYPE_1


def _finish(status, x, rnorm, iters, trace, t0, classification=NOT_CLASSIFIED,
            message="") -> SolverResult:
    return SolverResult(
        status=status,
        solution=np.array(x, dtype=float),
        residual_norm=float(rnorm),
        iterations=iters,
        classification=classification,
        trace=trace,
        wall_time=time.perf_counter() - t0,
        message=message,
    )


def _classified_success(sys, x, rnorm, iters, trace, t0, cfg) -> SolverResult:
    """Declare convergence, downgrading to spurious when DF^T DF is singular
    at the accepted point (keeps converged => type-1 everywhere)."""
    jac = system_jacobian(sys, x, cfg.fd)
    gram = jac.T @ jac
    piv = ldl_pivots(0.5 * (gram + gram.T))
    n = gram.shape[0]
    max_diag = float(np.max(np.abs(np.diag(gram))))
    if piv.min() <= n * np.finfo(float).eps * max_diag:
        return _finish(
            SPURIOUS_STATIONARY, x, rnorm, iters, trace, t0, TYPE_3,
            message="residual tolerance met only at a degenerate root",
        )
    return _finish(CONVERGED, x, rnorm, iters, trace, t0, TYPE_1)


def newton_solve(sys: NonlinearSystem, x0, cfg: SolverConfig = None) -> SolverResult:
    """Newton-Raphson iteration x <- x - DF(x)^{-1} F(x).

    Each step is a forward-Euler step of the Newton flow with unit time step.
    Declares divergence when the residual grows past divergence_factor times
    its initial value or iterates go non-finite.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    trace: list[TraceRecord] = []
    r0 = None
    for it in range(cfg.max_iterations + 1):
        try:
            f = eval_residual(sys, x)
        except EvaluationFailure as exc:
            return _finish(DIVERGED, x, math.inf, it, trace, t0, message=str(exc))
        rnorm = float(np.linalg.norm(f))
        trace.append(TraceRecord(it, rnorm, 1.0))
        if rnorm <= cfg.tolerance:
            return _classified_success(sys, x, rnorm, it, trace, t0, cfg)
        if r0 is None:
            r0 = rnorm
        if not math.isfinite(rnorm) or rnorm > cfg.divergence_factor * r0:
            return _finish(DIVERGED, x, rnorm, it, trace, t0)
        if it == cfg.max_iterations:
            break
        jac = system_jacobian(sys, x, cfg.fd)
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return _finish(LINEAR_SOLVE_FAILURE, x, rnorm, it, trace, t0,
                           message=f"singular Jacobian at iteration {it}")
        x = x + step
    return _finish(MAX_ITERATIONS, x, trace[-1].residual_norm,
                   cfg.max_iterations, trace, t0)


def continuous_newton_solve(sys: NonlinearSystem, x0,
                            cfg: SolverConfig = None) -> SolverResult:
    """Integrate the Newton flow x' = -DF(x)^{-1} F(x) with fixed-step RK4.

    One iteration = one RK4 step = four stage solves.  More robust than the
    plain Newton step against overshoot, at the price of more iterations.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    h = cfg.cnr_step
    trace: list[TraceRecord] = []

    def newton_field(y):
        jac = system_jacobian(sys, y, cfg.fd)
        return np.linalg.solve(jac, -eval_residual(sys, y))

    r0 = None
    for it in range(cfg.max_iterations + 1):
        try:
            f = eval_residual(sys, x)
        except EvaluationFailure as exc:
            return _finish(DIVERGED, x, math.inf, it, trace, t0, message=str(exc))
        rnorm = float(np.linalg.norm(f))
        trace.append(TraceRecord(it, rnorm, h))
        if rnorm <= cfg.tolerance:
            return _classified_success(sys, x, rnorm, it, trace, t0, cfg)
        if r0 is None:
            r0 = rnorm
        if not math.isfinite(rnorm) or rnorm > cfg.divergence_factor * r0:
            return _finish(DIVERGED, x, rnorm, it, trace, t0)
        if it == cfg.max_iterations:
            break
        try:
            k1 = newton_field(x)
            k2 = newton_field(x + 0.5 * h * k1)
            k3 = newton_field(x + 0.5 * h * k2)
            k4 = newton_field(x + h * k3)
        except np.linalg.LinAlgError:
            return _finish(LINEAR_SOLVE_FAILURE, x, rnorm, it, trace, t0,
                           message=f"singular Jacobian in RK4 stage at iteration {it}")
        except EvaluationFailure as exc:
            return _finish(DIVERGED, x, rnorm, it, trace, t0, message=str(exc))
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return _finish(MAX_ITERATIONS, x, trace[-1].residual_norm,
                   cfg.max_iterations, trace, t0)


def psitc_solve(g: Callable[[np.ndarray], np.ndarray],
                dg: Callable[[np.ndarray], np.ndarray],
                x0, cfg: SolverConfig = None) -> SolverResult:
    """Pseudo-transient continuation for a generic flow x' = -G(x).

    Repeats: solve (h^{-1} I + DG(x)) s = -G(x), advance x by s, update h by
    the configured rule.  Convergence is declared on ||G|| <= tolerance.  For
    driving a system's surrogate gradient flow toward a root of F, use
    psitc_exact_solve / qgs_psitc_solve instead: those watch ||F|| and guard
    against stationary points of the flow that are not roots.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    x = np.array(np.atleast_1d(x0), dtype=float)
    n = x.size
    ctrl = StepController(rule=cfg.step_rule, h=cfg.h0, h_max=cfg.h_max)
    trace: list[TraceRecord] = []
    for it in range(cfg.max_iterations + 1):
        gval = np.atleast_1d(np.asarray(g(x), dtype=float))
        gnorm = float(np.linalg.norm(gval))
        if cfg.step_rule == SER and gnorm > 0.0:
            ser_update(ctrl, gnorm)
        trace.append(TraceRecord(it, gnorm, ctrl.h))
        if gnorm <= cfg.tolerance:
            return _finish(CONVERGED, x, gnorm, it, trace, t0)
        if not np.all(np.isfinite(gval)):
            return _finish(DIVERGED, x, gnorm, it, trace, t0)
        if it == cfg.max_iterations:
            break
        shifted = np.eye(n) / ctrl.h + np.atleast_2d(np.asarray(dg(x), dtype=float))
        try:
            step = np.linalg.solve(shifted, -gval)
        except np.linalg.LinAlgError:
            return _finish(LINEAR_SOLVE_FAILURE, x, gnorm, it, trace, t0,
                           message=f"singular shifted matrix at iteration {it}")
        x = x + step
        if cfg.step_rule == STEP_NORM:
            step_norm_update(ctrl, step)
    return _finish(MAX_ITERATIONS, x, trace[-1].residual_norm,
                   cfg.max_iterations, trace, t0)


def qgs_psitc_step(base: NonlinearSystem, x, h: float,
                   strategy: str = NORMAL_EQUATIONS,
                   f: np.ndarray = None, jac: np.ndarray = None,
                   fd: FdConfig = FD_SOLVER) -> np.ndarray:
    """One continuation step on the surrogate gradient flow.

    Solves (h^{-1} I + DF^T DF) s = -DF^T F.  The matrix is symmetric positive
    definite for every finite h > 0 and any DF (including rank-deficient), so
    the normal-equations route factors it with Cholesky; the least-squares
    route minimizes ||[DF; h^{-1/2} I] s + [F; 0]|| instead, which is the same
    problem solved without forming the Gram matrix.  Both agree to roundoff.
    """
    if f is None:
        f = eval_residual(base, x)
    if jac is None:
        jac = system_jacobian(base, np.asarray(x, dtype=float), fd)
    n = base.dimension
    if strategy == NORMAL_EQUATIONS:
        gram = jac.T @ jac + (1.0 / h) * np.eye(n)
        rhs = -jac.T @ f
        c, low = scipy.linalg.cho_factor(gram, check_finite=False)
        return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
    if strategy == LEAST_SQUARES:
        a = np.vstack([jac, (1.0 / math.sqrt(h)) * np.eye(n)])
        b = -np.concatenate([f, np.zeros(n)])
        sol, *_ = scipy.linalg.lstsq(a, b, check_finite=False,
                                     lapack_driver="gelsd")
        return sol
    raise ValueError(f"unknown linear strategy {strategy!r}")


def _gradient_flow_ptc(base: NonlinearSystem, x0, cfg: SolverConfig,
                       exact: bool, stop_residual: float = None) -> SolverResult:
    """Shared pseudo-transient loop on the surrogate gradient flow of `base`.

    exact=True differences the flow field for the step Jacobian (one extra
    field evaluation per dimension per iteration); exact=False uses the
    Gauss-Newton approximation, making each step a single Cholesky or
    least-squares solve.

    Convergence is judged on ||F||, not on the flow field: the field also
    vanishes at stationary points that are not roots.  Two guards keep such
    points from being reported as solutions:

    * stagnation: the field norm sits at or below tolerance while ||F|| stays
      above it for stagnation_window consecutive iterations;
    * degeneracy: when ||F|| first dips below tolerance, the smallest LDL^T
      pivot of DF^T DF must exceed degenerate_pivot_ratio * ||F||.  Near a
      regular root that pivot approaches a positive constant while ||F|| -> 0;
      near a degenerate (multiple) root it decays proportionally to ||F||.

    stop_residual, when given, ends the loop as soon as ||F|| falls below it
    (handoff mode for the hybrid method; no classification is attempted).
    """
    t0 = time.perf_counter()
    x = np.array(np.atleast_1d(x0), dtype=float)
    n = base.dimension
    qgs = QgsSystem(base, fd=cfg.fd)
    ctrl = StepController(rule=cfg.step_rule, h=cfg.h0, h_max=cfg.h_max)
    trace: list[TraceRecord] = []
    stagnant = 0
    for it in range(cfg.max_iterations + 1):
        try:
            f = eval_residual(base, x)
            jac = system_jacobian(base, x, cfg.fd)
        except EvaluationFailure as exc:
            return _finish(DIVERGED, x, math.inf, it, trace, t0, message=str(exc))
        grad = jac.T @ f
        fnorm = float(np.linalg.norm(f))
        gnorm = float(np.linalg.norm(grad))
        if cfg.step_rule == SER and gnorm > 0.0:
            ser_update(ctrl, gnorm)
        trace.append(TraceRecord(it, fnorm, ctrl.h))
        if stop_residual is not None and fnorm <= stop_residual:
            return _finish(CONVERGED, x, fnorm, it, trace, t0,
                           message="reached handoff threshold")
        if fnorm <= cfg.tolerance:
            gram = jac.T @ jac
            piv = ldl_pivots(0.5 * (gram + gram.T))
            if piv.min() <= cfg.degenerate_pivot_ratio * fnorm:
                return _finish(
                    SPURIOUS_STATIONARY, x, fnorm, it, trace, t0, TYPE_3,
                    message="residual tolerance met only at a degenerate root "
                            "(smallest normal-matrix pivot comparable to ||F||)",
                )
            return _classified_success(base, x, fnorm, it, trace, t0, cfg)
        if gnorm == 0.0:
            return _finish(SPURIOUS_STATIONARY, x, fnorm, it, trace, t0,
                           classify_solution(base, x, cfg.tolerance, cfg.fd),
                           message="flow field vanished away from any root")
        stagnant = stagnant + 1 if gnorm <= cfg.tolerance else 0
        if stagnant >= cfg.stagnation_window:
            return _finish(SPURIOUS_STATIONARY, x, fnorm, it, trace, t0,
                           classify_solution(base, x, cfg.tolerance, cfg.fd),
                           message="flow field collapsed while the residual "
                                   f"stalled above tolerance for {stagnant} "
                                   "iterations")
        if it == cfg.max_iterations:
            break
        if exact:
            flow_jac = qgs_jacobian_exact(qgs, x, cfg.fd)
            shifted = np.eye(n) / ctrl.h - flow_jac
            try:
                step = np.linalg.solve(shifted, -grad)
            except np.linalg.LinAlgError:
                return _finish(LINEAR_SOLVE_FAILURE, x, fnorm, it, trace, t0,
                               message=f"singular shifted matrix at iteration {it}")
        else:
            try:
                step = qgs_psitc_step(base, x, ctrl.h, cfg.linear_strategy,
                                      f=f, jac=jac)
            except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
                return _finish(LINEAR_SOLVE_FAILURE, x, fnorm, it, trace, t0,
                               message=f"step solve failed at iteration {it}")
        x = x + step
        if cfg.step_rule == STEP_NORM:
            step_norm_update(ctrl, step)
    return _finish(MAX_ITERATIONS, x, trace[-1].residual_norm,
                   cfg.max_iterations, trace, t0)


def psitc_exact_solve(base: NonlinearSystem, x0,
                      cfg: SolverConfig = None) -> SolverResult:
    """Pseudo-transient continuation on the surrogate flow with its exact
    Jacobian (finite-differenced field).  Reference-quality but expensive:
    every iteration costs n extra field evaluations."""
    return _gradient_flow_ptc(base, x0, cfg or SolverConfig(), exact=True)


def qgs_psitc_solve(base: NonlinearSystem, x0,
                    cfg: SolverConfig = None) -> SolverResult:
    """Pseudo-transient continuation on the surrogate flow with the
    Gauss-Newton Jacobian approximation DF^T DF.

    The shifted step matrix is symmetric positive definite for every h > 0,
    so steps never fail on finite inputs, and the approximation structure
    guarantees that reported solutions are regular roots of F."""
    return _gradient_flow_ptc(base, x0, cfg or SolverConfig(), exact=False)


def hybrid_solve(base: NonlinearSystem, x0,
                 cfg: SolverConfig = None) -> SolverResult:
    """Newton first; on failure, restart with gradient-flow continuation from
    the original start until ||F|| drops below hybrid_switch_threshold, then
    finish with Newton from the handoff point.

    Iteration counts of all phases add up in the returned result.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    nr_cfg = replace(cfg, max_iterations=min(cfg.hybrid_nr_budget,
                                             cfg.max_iterations))
    phase1 = newton_solve(base, x0, nr_cfg)
    if phase1.converged:
        phase1.message = "phase 1 (newton) converged"
        phase1.wall_time = time.perf_counter() - t0
        return phase1

    phase2 = _gradient_flow_ptc(base, x0, cfg, exact=False,
                                stop_residual=cfg.hybrid_switch_threshold)
    iters = phase1.iterations + phase2.iterations
    trace = phase1.trace + phase2.trace
    if not phase2.converged:
        return SolverResult(
            status=phase2.status, solution=phase2.solution,
            residual_norm=phase2.residual_norm, iterations=iters,
            classification=phase2.classification, trace=trace,
            wall_time=time.perf_counter() - t0,
            message="phase 2 (gradient-flow continuation) failed: "
                    + (phase2.message or phase2.status),
        )

    phase3 = newton_solve(base, phase2.solution, nr_cfg)
    iters += phase3.iterations
    trace = trace + phase3.trace
    message = ("phase 3 (newton endgame) " +
               ("converged" if phase3.converged else
                "failed: " + (phase3.message or phase3.status)))
    return SolverResult(
        status=phase3.status, solution=phase3.solution,
        residual_norm=phase3.residual_norm, iterations=iters,
        classification=phase3.classification, trace=trace,
        wall_time=time.perf_counter() - t0, message=message,
    )


#: registry used by the CLI and the region mapper
SOLVERS: dict[str, Callable] = {
    "nr": newton_solve,
    "cnr": continuous_newton_solve,
    "psitc-exact": psitc_exact_solve,
    "qgs-psitc": qgs_psitc_solve,
    "hybrid": hybrid_solve,
}
