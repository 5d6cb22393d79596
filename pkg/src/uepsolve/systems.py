"""Nonlinear-system abstraction, finite-difference derivatives, and the
surrogate gradient flow used to turn any root of F into a stable attractor.

A system is a residual map F: R^n -> R^n together with an optional analytic
Jacobian.  The surrogate flow is x' = -DF(x)^T F(x), i.e. the negative
gradient of the merit function 0.5*||F(x)||^2, so every root of F becomes a
stable equilibrium of the flow regardless of its stability in the original
dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

_EPS = float(np.finfo(float).eps)


class EvaluationFailure(RuntimeError):
    """Residual or Jacobian evaluation produced non-finite values."""


@dataclass(frozen=True)
class FdConfig:
    """Finite-difference settings.

    perturbation is a relative step: column j is perturbed by
    perturbation * max(1, |x_j|).  Scheme is "forward" (n+1 evaluations)
    or "central" (2n evaluations, O(perturbation^2) truncation error).
    """

    perturbation: float = float(np.sqrt(_EPS))
    scheme: str = "central"

    def __post_init__(self):
        if self.perturbation <= 0.0:
            raise ValueError("perturbation must be positive")
        if self.scheme not in ("forward", "central"):
            raise ValueError("scheme must be 'forward' or 'central'")


#: default used when verifying Jacobians (accuracy over cost)
FD_VERIFY = FdConfig(scheme="central")
#: default used inside solver loops (cost over accuracy)
FD_SOLVER = FdConfig(scheme="forward")


@dataclass(frozen=True)
class NonlinearSystem:
    """A square nonlinear system F(x) = 0.

    residual maps an n-vector to an n-vector; jacobian, when given, maps an
    n-vector to the n x n matrix DF(x).  Instances are immutable and safe to
    share across threads.
    """

    dimension: int
    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be a positive integer")


def _as_state(sys: NonlinearSystem, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (sys.dimension,):
        raise ValueError(
            f"state has shape {x.shape}, expected ({sys.dimension},) for system "
            f"{sys.name!r}"
        )
    return x


def eval_residual(sys: NonlinearSystem, x) -> np.ndarray:
    """Evaluate F(x), validating shape and finiteness."""
    x = _as_state(sys, x)
    f = np.atleast_1d(np.asarray(sys.residual(x), dtype=float))
    if f.shape != (sys.dimension,):
        raise ValueError(
            f"residual returned shape {f.shape}, expected ({sys.dimension},)"
        )
    if not np.all(np.isfinite(f)):
        raise EvaluationFailure(f"non-finite residual at x={x!r}")
    return f


def fd_jacobian(sys: NonlinearSystem, x, cfg: FdConfig = FD_VERIFY) -> np.ndarray:
    """Finite-difference Jacobian of the residual; column j ~ dF/dx_j."""
    x = _as_state(sys, x)
    return _fd_matrix(lambda y: eval_residual(sys, y), x, cfg)


def _fd_matrix(fn, x: np.ndarray, cfg: FdConfig) -> np.ndarray:
    """FD Jacobian of an arbitrary vector map fn at x."""
    n = x.size
    steps = cfg.perturbation * np.maximum(1.0, np.abs(x))
    if cfg.scheme == "forward":
        f0 = fn(x)
        cols = []
        for j in range(n):
            xp = x.copy()
            xp[j] += steps[j]
            cols.append((fn(xp) - f0) / steps[j])
    else:
        cols = []
        for j in range(n):
            xp = x.copy()
            xm = x.copy()
            xp[j] += steps[j]
            xm[j] -= steps[j]
            cols.append((fn(xp) - fn(xm)) / (2.0 * steps[j]))
    jac = np.column_stack(cols)
    if not np.all(np.isfinite(jac)):
        raise EvaluationFailure("non-finite finite-difference Jacobian")
    return jac


def system_jacobian(sys: NonlinearSystem, x, cfg: FdConfig = FD_SOLVER) -> np.ndarray:
    """DF(x): analytic when the system provides it, finite differences otherwise."""
    x = _as_state(sys, x)
    if sys.jacobian is not None:
        jac = np.asarray(sys.jacobian(x), dtype=float)
        if jac.shape != (sys.dimension, sys.dimension):
            raise ValueError(
                f"jacobian returned shape {jac.shape}, expected square of "
                f"dimension {sys.dimension}"
            )
        if not np.all(np.isfinite(jac)):
            raise EvaluationFailure(f"non-finite Jacobian at x={x!r}")
        return jac
    return fd_jacobian(sys, x, cfg)


@dataclass(frozen=True)
class QgsSystem:
    """Surrogate gradient flow x' = Q(x) = -DF(x)^T F(x) of a base system.

    Q is the negative gradient of 0.5*||F||^2, so roots of F are stable
    equilibria of the flow.  fd controls the Jacobian scheme used when the
    base system has no analytic Jacobian.
    """

    base: NonlinearSystem
    fd: FdConfig = field(default_factory=lambda: FD_SOLVER)


def qgs_field(q: QgsSystem, x) -> np.ndarray:
    """The flow field -DF(x)^T F(x); exactly zero wherever F(x) = 0."""
    f = eval_residual(q.base, x)
    jac = system_jacobian(q.base, x, q.fd)
    return -jac.T @ f


def qgs_jacobian_exact(q: QgsSystem, x, cfg: FdConfig = FD_SOLVER) -> np.ndarray:
    """Jacobian of the flow field, by finite differences on the field itself.

    Differencing the field keeps the second-derivative contraction implicit:
    assembling it analytically needs n Hessians and is easy to get wrong,
    while n+1 (forward) or 2n (central) field evaluations suffice here.
    """
    x = _as_state(q.base, x)
    return _fd_matrix(lambda y: qgs_field(q, y), x, cfg)


def qgs_jacobian_approx(q: QgsSystem, x) -> np.ndarray:
    """Gauss-Newton style approximation -DF(x)^T DF(x).

    Drops the second-derivative term, which vanishes as F -> 0.  The result
    is symmetric negative semi-definite by construction.
    """
    jac = system_jacobian(q.base, x, q.fd)
    approx = -jac.T @ jac
    return 0.5 * (approx + approx.T)


def ldl_pivots(a: np.ndarray) -> np.ndarray:
    """Diagonal pivots of the unpivoted LDL^T factorization of symmetric a.

    Stops at the first non-positive pivot (factorization breakdown), so the
    returned array may be shorter than n; its minimum is the decisive pivot
    either way.
    """
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    piv = np.empty(n)
    for k in range(n):
        piv[k] = a[k, k]
        if piv[k] <= 0.0:
            return piv[: k + 1]
        a[k + 1 :, k + 1 :] -= np.outer(a[k + 1 :, k], a[k + 1 :, k]) / piv[k]
    return piv


def sym_eigenvalues_small(a: np.ndarray) -> tuple[float, ...]:
    """Eigenvalues of a symmetric 1x1, 2x2 or 3x3 matrix from the
    characteristic polynomial (ascending).  No general eigensolver involved.
    """
    n = a.shape[0]
    if n == 1:
        return (float(a[0, 0]),)
    if n == 2:
        mean = 0.5 * (a[0, 0] + a[1, 1])
        disc = np.hypot(0.5 * (a[0, 0] - a[1, 1]), a[0, 1])
        return (float(mean - disc), float(mean + disc))
    if n == 3:
        # trigonometric solution of the cubic for symmetric matrices
        p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        q = np.trace(a) / 3.0
        if p1 == 0.0:
            return tuple(sorted(float(a[i, i]) for i in range(3)))
        p2 = sum((a[i, i] - q) ** 2 for i in range(3)) + 2.0 * p1
        p = np.sqrt(p2 / 6.0)
        b = (a - q * np.eye(3)) / p
        r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
        phi = np.arccos(r) / 3.0
        e1 = q + 2.0 * p * np.cos(phi)
        e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
        return (float(e3), float(3.0 * q - e1 - e3), float(e1))
    raise ValueError("closed-form eigenvalues only available up to 3x3")


@dataclass(frozen=True)
class DefinitenessReport:
    """Outcome of testing DF^T DF for positive definiteness at a candidate root.

    positive_definite comes from a Cholesky attempt; smallest_pivot from the
    LDL^T pivots.  eigenvalues is filled for dimensions <= 3 (characteristic
    polynomial).  at_equilibrium is False when the residual at x was not small,
    in which case the dropped second-derivative term is not negligible and the
    verdict should be treated as a warning, not a proof.
    """

    positive_definite: bool
    smallest_pivot: float
    residual_norm: float
    at_equilibrium: bool
    eigenvalues: Optional[tuple[float, ...]] = None


def verify_qgs_sep(q: QgsSystem, x, residual_tol: float = 1e-6) -> DefinitenessReport:
    """Check whether x is a stable equilibrium of the surrogate flow.

    At a root of F the flow Jacobian reduces to -DF^T DF, so x is a stable
    equilibrium exactly when DF^T DF is positive definite.
    """
    x = _as_state(q.base, x)
    f = eval_residual(q.base, x)
    jac = system_jacobian(q.base, x, q.fd)
    gram = jac.T @ jac
    gram = 0.5 * (gram + gram.T)
    try:
        np.linalg.cholesky(gram)
        posdef = True
    except np.linalg.LinAlgError:
        posdef = False
    piv = ldl_pivots(gram)
    eigs = sym_eigenvalues_small(gram) if gram.shape[0] <= 3 else None
    rnorm = float(np.linalg.norm(f))
    return DefinitenessReport(
        positive_definite=posdef,
        smallest_pivot=float(piv.min()),
        residual_norm=rnorm,
        at_equilibrium=rnorm <= residual_tol,
        eigenvalues=eigs,
    )
