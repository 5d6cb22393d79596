"""Builtin synthetic test systems.

Every system here ships with an analytic Jacobian so the whole test and
acceptance suite runs with zero external data.  `type2` and `type3` are
constructed so the surrogate gradient flow has stationary points that are
not regular roots: `type2` has a stationary locus where F never vanishes,
`type3` has a double root with singular Jacobian.
"""

from __future__ import annotations

import numpy as np

from .systems import NonlinearSystem


def quadratic() -> NonlinearSystem:
    """Scalar F(x) = x^2 - 4; regular roots at +/-2."""
    return NonlinearSystem(
        dimension=1,
        residual=lambda x: np.array([x[0] ** 2 - 4.0]),
        jacobian=lambda x: np.array([[2.0 * x[0]]]),
        name="quadratic",
    )


def pendulum(damping: float = 0.1) -> NonlinearSystem:
    """Damped pendulum equilibrium equations F = (omega, -sin(delta) - d*omega).

    Roots sit at (k*pi, 0); even k are stable equilibria of the pendulum,
    odd k are the inverted (unstable) ones.
    """

    def residual(x):
        return np.array([x[1], -np.sin(x[0]) - damping * x[1]])

    def jacobian(x):
        return np.array([[0.0, 1.0], [-np.cos(x[0]), -damping]])

    return NonlinearSystem(2, residual, jacobian, name="pendulum")


def type2() -> NonlinearSystem:
    """F(x, y) = (x, 1): no root anywhere, yet -DF^T F = (-x, 0) vanishes on
    the whole line x = 0.  Exercises stationary-but-not-root detection."""
    return NonlinearSystem(
        dimension=2,
        residual=lambda x: np.array([x[0], 1.0]),
        jacobian=lambda x: np.array([[1.0, 0.0], [0.0, 0.0]]),
        name="type2",
    )


def type3() -> NonlinearSystem:
    """Scalar F(x) = x^2: double root at 0 with singular Jacobian there."""
    return NonlinearSystem(
        dimension=1,
        residual=lambda x: np.array([x[0] ** 2]),
        jacobian=lambda x: np.array([[2.0 * x[0]]]),
        name="type3",
    )


def random_polynomial(seed: int, dimension: int = 3) -> NonlinearSystem:
    """Seeded quadratic-polynomial system for property tests.

    F_i(x) = b_i + (B x)_i + x^T A_i x with symmetric A_i; coefficients are
    scaled so that the system has moderate curvature near the origin.
    """
    rng = np.random.default_rng(seed)
    n = dimension
    b = rng.normal(size=n)
    lin = rng.normal(size=(n, n)) + n * np.eye(n)
    quad = rng.normal(size=(n, n, n)) * 0.3
    quad = 0.5 * (quad + np.transpose(quad, (0, 2, 1)))

    def residual(x):
        return b + lin @ x + np.einsum("ijk,j,k->i", quad, x, x)

    def jacobian(x):
        return lin + 2.0 * np.einsum("ijk,k->ij", quad, x)

    return NonlinearSystem(n, residual, jacobian, name=f"poly-{seed}-{n}")


def get_builtin(name: str) -> NonlinearSystem:
    """Resolve a builtin system by name.

    Accepted names: quadratic, pendulum, type2, type3, poly-<seed> and
    poly-<seed>-<dim>.  A leading "builtin:" prefix is tolerated.
    """
    key = name.removeprefix("builtin:").strip().lower()
    simple = {
        "quadratic": quadratic,
        "pendulum": pendulum,
        "type2": type2,
        "type3": type3,
    }
    if key in simple:
        return simple[key]()
    if key.startswith("poly-"):
        parts = key.split("-")[1:]
        try:
            seed = int(parts[0])
            dim = int(parts[1]) if len(parts) > 1 else 3
        except (ValueError, IndexError):
            raise ValueError(f"malformed polynomial system name: {name!r}") from None
        return random_polynomial(seed, dim)
    raise ValueError(
        f"unknown builtin system {name!r}; available: quadratic, pendulum, "
        "type2, type3, poly-<seed>[-<dim>]"
    )
