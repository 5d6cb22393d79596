"""Convergence-region mapping.

Sweeps a grid of initial points, runs a solver from each, and records whether
the run converged to a designated target equilibrium.  The connected portion
of the target set (orthogonal adjacency on the grid lattice) is the headline
statistic: methods whose convergence region is large *and* connected tolerate
initial guesses far from the target.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.ndimage

from .solvers import CONVERGED, SolverConfig, SolverResult

TARGET = "target"
OTHER_SOLUTION = "other-solution"
DIVERGED_OUTCOME = "diverged"
UNRESOLVABLE = "unresolvable"


@dataclass(frozen=True)
class GridSpec:
    """Cartesian grid centered on the target's swept coordinates.

    resolution entries must be odd (>= 3) so the center is a grid node.
    swept_dims lists which state coordinates the grid varies; the remaining
    coordinates are supplied by the completion rule (anchored at the target
    by default).
    """

    center: tuple[float, ...]
    half_widths: tuple[float, ...]
    resolution: tuple[int, ...]
    swept_dims: tuple[int, ...]

    def __post_init__(self):
        d = len(self.center)
        if not (len(self.half_widths) == len(self.resolution)
                == len(self.swept_dims) == d):
            raise ValueError("center, half_widths, resolution and swept_dims "
                             "must have equal length")
        if any(w <= 0 for w in self.half_widths):
            raise ValueError("half_widths must be positive")
        if any(r < 3 or r % 2 == 0 for r in self.resolution):
            raise ValueError("resolution must be odd and at least 3 per axis")

    @property
    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(c - w, c + w, r)
            for c, w, r in zip(self.center, self.half_widths, self.resolution)
        ]


def generate_grid(spec: GridSpec) -> np.ndarray:
    """All grid nodes as an (N, d) array in row-major (last axis fastest)
    order; deterministic."""
    mesh = np.meshgrid(*spec.axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


@dataclass(frozen=True)
class PointOutcome:
    outcome: str
    iterations: int
    residual_norm: float


def classify_point(solver: Callable[..., SolverResult], system, x0_full,
                   target, tol: float) -> PointOutcome:
    """Run the solver from one complete initial state and bucket the result.

    "target" requires convergence with the solution within tol of the target
    state in L2; any other convergence is "other-solution"; everything else
    (including solver errors) counts as "diverged".
    """
    target = np.asarray(target, dtype=float)
    try:
        res = solver(system, x0_full)
    except Exception:
        return PointOutcome(DIVERGED_OUTCOME, 0, float("inf"))
    if res.status == CONVERGED:
        dist = float(np.linalg.norm(np.asarray(res.solution) - target))
        kind = TARGET if dist <= tol else OTHER_SOLUTION
        return PointOutcome(kind, res.iterations, res.residual_norm)
    return PointOutcome(DIVERGED_OUTCOME, res.iterations, res.residual_norm)


@dataclass
class RegionMap:
    spec: GridSpec
    points: np.ndarray            # (N, d) swept coordinates
    outcomes: list[PointOutcome]
    target: np.ndarray
    match_tolerance: float
    solver_name: str = ""
    solver_config: dict = field(default_factory=dict)

    def count(self, outcome: str) -> int:
        return sum(1 for o in self.outcomes if o.outcome == outcome)

    def outcome_lattice(self) -> np.ndarray:
        """Boolean lattice of target-outcome nodes, shaped by the grid."""
        flags = np.array([o.outcome == TARGET for o in self.outcomes])
        return flags.reshape(self.spec.resolution)

    def to_csv(self, path) -> None:
        """One row per node: swept coordinates, outcome, iterations, residual."""
        d = len(self.spec.swept_dims)
        header = [f"coord_{k}" for k in self.spec.swept_dims]
        header += ["outcome", "iterations", "residual_norm"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for pt, o in zip(self.points, self.outcomes):
                w.writerow([repr(float(pt[k])) for k in range(d)]
                           + [o.outcome, o.iterations, repr(o.residual_norm)])

    def summary_dict(self) -> dict:
        stats = connected_stats(self)
        return {
            "solver": self.solver_name,
            "solver_config": self.solver_config,
            "match_tolerance": self.match_tolerance,
            "target": [float(v) for v in self.target],
            "grid": {
                "center": list(self.spec.center),
                "half_widths": list(self.spec.half_widths),
                "resolution": list(self.spec.resolution),
                "swept_dims": list(self.spec.swept_dims),
            },
            "counts": {
                kind: self.count(kind)
                for kind in (TARGET, OTHER_SOLUTION, DIVERGED_OUTCOME,
                             UNRESOLVABLE)
            },
            "connected": {
                "total_target_points": stats.total_target_points,
                "inside_connected": stats.inside_connected,
                "outside_connected": stats.outside_connected,
                "empty": stats.empty,
            },
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary_dict(), indent=2))


def map_region(solver: Callable[..., SolverResult], system, spec: GridSpec,
               target, tol: float,
               complete_state: Optional[Callable[[np.ndarray],
                                                 Optional[np.ndarray]]] = None,
               solver_name: str = "",
               solver_config: Optional[SolverConfig] = None) -> RegionMap:
    """Classify every grid node; deterministic regardless of evaluation order.

    complete_state turns a swept-coordinate point into a full initial state
    (returning None marks the node unresolvable).  The default rule copies
    the target state and overwrites the swept coordinates, which suits
    synthetic systems where the grid covers the whole state.
    """
    target = np.asarray(target, dtype=float)
    swept = list(spec.swept_dims)

    if complete_state is None:
        def complete_state(pt):
            full = target.copy()
            full[swept] = pt
            return full

    pts = generate_grid(spec)
    outcomes = []
    for pt in pts:
        full = complete_state(pt)
        if full is None:
            outcomes.append(PointOutcome(UNRESOLVABLE, 0, float("inf")))
            continue
        outcomes.append(classify_point(solver, system, full, target, tol))
    return RegionMap(
        spec=spec, points=pts, outcomes=outcomes, target=target,
        match_tolerance=tol, solver_name=solver_name,
        solver_config=solver_config.to_dict() if solver_config else {},
    )


@dataclass(frozen=True)
class RegionStats:
    """Size of the connected component of target nodes that contains the node
    nearest the target, versus target nodes outside it."""

    total_target_points: int
    inside_connected: int
    outside_connected: int
    empty: bool = False


def connected_stats(region: RegionMap) -> RegionStats:
    """Flood-fill the target-outcome lattice with orthogonal (von Neumann)
    adjacency and count the component containing the node nearest the target."""
    lattice = region.outcome_lattice()
    total = int(lattice.sum())
    if total == 0:
        return RegionStats(0, 0, 0, empty=True)
    structure = scipy.ndimage.generate_binary_structure(lattice.ndim, 1)
    labels, _ = scipy.ndimage.label(lattice, structure=structure)

    swept = list(region.spec.swept_dims)
    target_pt = region.target[swept]
    dists = np.linalg.norm(region.points - target_pt[None, :], axis=1)
    nearest = np.unravel_index(int(np.argmin(dists)), region.spec.resolution)
    home = labels[nearest]
    if home == 0:
        # nearest node itself did not converge to the target; count the
        # largest component as the connected region instead
        sizes = np.bincount(labels.reshape(-1))
        sizes[0] = 0
        inside = int(sizes.max())
    else:
        inside = int((labels == home).sum())
    return RegionStats(total, inside, total - inside)
