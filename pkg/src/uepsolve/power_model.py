"""Structure-preserving power-system equilibrium model with classical machines.

The chain is: load a case (buses, lines, machines) -> run a Newton power flow
on the pre-fault network to anchor the stable operating point and initialize
machine internals (E', delta, Pm) -> optionally remove a line (contingency)
-> assemble the post-fault equilibrium equations in the center-of-inertia
(COI) frame as a square NonlinearSystem for the solver suite.

State vector layout (dimension (n-1) + 2m for n machines, m buses):

    x = [machine COI angles 2..n | bus COI angles 1..m | bus voltages 1..m]

Machine 1's COI angle is eliminated through the constraint
sum_i M_i * delta_i = 0, and its swing mismatch (the redundant one) is
dropped, which makes the system square.  Machine speeds are identically zero
at equilibrium and do not appear.  Loads are folded into the admittance
matrix as constant impedances computed at the pre-fault operating voltages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph

from .systems import NonlinearSystem


@dataclass(frozen=True)
class Bus:
    id: int
    type: str  # "generator" | "load"
    p_load: float = 0.0
    q_load: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_half: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class Machine:
    """Classical generator: constant EMF magnitude behind transient reactance.

    m is the inertia coefficient (2H/omega_s when the case file carries an
    inertia constant H instead).  pm and eq_prime may be omitted and are then
    derived from the pre-fault power flow.  pg/v_set are the dispatch used by
    that power flow; the first machine in the case acts as the slack and may
    omit pg.
    """

    bus: int
    m: float
    d: float
    xd_prime: float
    pm: Optional[float] = None
    eq_prime: Optional[float] = None
    pg: Optional[float] = None
    v_set: float = 1.0


@dataclass(frozen=True)
class PowerCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    machines: tuple[Machine, ...]
    freq_hz: float = 60.0

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        idset = set(ids)
        for ln in self.lines:
            if ln.from_bus not in idset or ln.to_bus not in idset:
                raise ValueError(
                    f"line {ln.from_bus}-{ln.to_bus} references unknown bus")
        gen_ids = {b.id for b in self.buses if b.type == "generator"}
        mach_ids = [mc.bus for mc in self.machines]
        for mid in mach_ids:
            if mid not in gen_ids:
                raise ValueError(f"machine at bus {mid} is not on a generator bus")
        if len(set(mach_ids)) != len(mach_ids):
            raise ValueError("more than one machine on the same bus")
        for mc in self.machines:
            if mc.m <= 0.0:
                raise ValueError(f"machine at bus {mc.bus}: inertia must be positive")
            if mc.xd_prime <= 0.0:
                raise ValueError(
                    f"machine at bus {mc.bus}: transient reactance must be positive")

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}


@dataclass(frozen=True)
class Contingency:
    """Removal of one in-service line; fault_bus is bookkeeping metadata."""

    id: int
    fault_bus: int
    removed_line: tuple[int, int]


class PowerFlowError(RuntimeError):
    """Newton power flow failed to converge."""


def load_case(path) -> PowerCase:
    """Read a case from JSON (keys: name, base_mva, freq_hz, buses, lines,
    machines).  Machines carry either "m" or "h"; h is converted via
    m = 2 h / omega_s."""
    raw = json.loads(Path(path).read_text())
    freq = float(raw.get("freq_hz", 60.0))
    omega_s = 2.0 * math.pi * freq
    buses = tuple(
        Bus(int(b["id"]), str(b["type"]), float(b.get("p_load", 0.0)),
            float(b.get("q_load", 0.0)), float(b.get("shunt_b", 0.0)))
        for b in raw["buses"]
    )
    lines = tuple(
        Line(int(ln["from"]), int(ln["to"]), float(ln["r"]), float(ln["x"]),
             float(ln.get("b_half", 0.0)), bool(ln.get("in_service", True)))
        for ln in raw["lines"]
    )
    machines = []
    for mc in raw["machines"]:
        if ("m" in mc) == ("h" in mc):
            raise ValueError(
                f"machine at bus {mc.get('bus')}: give exactly one of 'm' or 'h'")
        m = float(mc["m"]) if "m" in mc else 2.0 * float(mc["h"]) / omega_s
        machines.append(Machine(
            bus=int(mc["bus"]), m=m, d=float(mc["d"]),
            xd_prime=float(mc["xd_prime"]),
            pm=None if mc.get("pm") is None else float(mc["pm"]),
            eq_prime=None if mc.get("eq_prime") is None else float(mc["eq_prime"]),
            pg=None if mc.get("pg") is None else float(mc["pg"]),
            v_set=float(mc.get("v_set", 1.0)),
        ))
    return PowerCase(
        name=str(raw.get("name", Path(path).stem)),
        base_mva=float(raw["base_mva"]),
        buses=buses, lines=lines, machines=tuple(machines), freq_hz=freq,
    )


def load_contingencies(path) -> list[Contingency]:
    """Read a contingency list from JSON: [{id, fault_bus, from, to}, ...]."""
    raw = json.loads(Path(path).read_text())
    return [
        Contingency(int(c["id"]), int(c["fault_bus"]),
                    (int(c["from"]), int(c["to"])))
        for c in raw
    ]


def bundled_case_path(name: str = "wscc9") -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def bundled_contingencies_path(name: str = "wscc9") -> Path:
    return Path(__file__).parent / "data" / f"{name}_contingencies.json"


def build_ybus(case: PowerCase) -> np.ndarray:
    """Bus admittance matrix: series admittances, half line charging, and bus
    shunt susceptances; out-of-service lines excluded."""
    idx = case.bus_index()
    m = len(case.buses)
    y = np.zeros((m, m), dtype=complex)
    for ln in case.lines:
        if not ln.in_service:
            continue
        if ln.r == 0.0 and ln.x == 0.0:
            raise ValueError(
                f"line {ln.from_bus}-{ln.to_bus} has zero series impedance")
        ys = 1.0 / complex(ln.r, ln.x)
        i, k = idx[ln.from_bus], idx[ln.to_bus]
        y[i, i] += ys + 1j * ln.b_half
        y[k, k] += ys + 1j * ln.b_half
        y[i, k] -= ys
        y[k, i] -= ys
    for b in case.buses:
        y[idx[b.id], idx[b.id]] += 1j * b.shunt_b
    return y


def fold_constant_impedance_loads(ybus: np.ndarray, case: PowerCase,
                                  sep_voltages: Sequence[float]) -> np.ndarray:
    """Convert each load P+jQ into the shunt admittance (P - jQ)/|V|^2 drawn
    at the operating-point voltage, added to the matching diagonal entry."""
    v = np.asarray(sep_voltages, dtype=float)
    if v.shape != (len(case.buses),):
        raise ValueError("need one operating voltage per bus")
    out = np.array(ybus, dtype=complex, copy=True)
    for i, b in enumerate(case.buses):
        if b.p_load == 0.0 and b.q_load == 0.0:
            continue
        if v[i] < 0.1:
            raise ValueError(
                f"bus {b.id}: operating voltage {v[i]:.3f} p.u. too low to "
                "define a constant-impedance load")
        out[i, i] += complex(b.p_load, -b.q_load) / v[i] ** 2
    return out


def _connected_components(case: PowerCase) -> list[set[int]]:
    idx = case.bus_index()
    m = len(case.buses)
    rows, cols = [], []
    for ln in case.lines:
        if ln.in_service:
            rows.append(idx[ln.from_bus])
            cols.append(idx[ln.to_bus])
    adj = scipy.sparse.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(m, m))
    ncomp, labels = scipy.sparse.csgraph.connected_components(
        adj, directed=False)
    comps: list[set[int]] = [set() for _ in range(ncomp)]
    for b, lab in zip(case.buses, labels):
        comps[lab].add(b.id)
    return comps


def apply_contingency(case: PowerCase, c: Contingency) -> PowerCase:
    """Return the post-fault case with the listed line out of service.

    The line is matched in either orientation and must currently be in
    service; removals that split the network are rejected.
    """
    target = frozenset(c.removed_line)
    hit = None
    for i, ln in enumerate(case.lines):
        if frozenset((ln.from_bus, ln.to_bus)) == target and ln.in_service:
            hit = i
            break
    if hit is None:
        raise ValueError(
            f"contingency {c.id}: no in-service line "
            f"{c.removed_line[0]}-{c.removed_line[1]} in case {case.name!r}")
    lines = tuple(
        replace(ln, in_service=False) if i == hit else ln
        for i, ln in enumerate(case.lines)
    )
    post = replace(case, lines=lines, name=f"{case.name}+ctg{c.id}")
    comps = _connected_components(post)
    if len(comps) > 1:
        raise ValueError(
            f"contingency {c.id}: removing line "
            f"{c.removed_line[0]}-{c.removed_line[1]} islands the network "
            f"into {comps}")
    return post


def coi_quantities(delta: Sequence[float], omega: Sequence[float],
                   m_list: Sequence[float]):
    """Center-of-inertia aggregates and COI-relative angles/speeds.

    Returns (delta0, omega0, m_total, delta_tilde, omega_tilde) with
    sum(M * delta_tilde) = sum(M * omega_tilde) = 0 to roundoff.
    """
    delta = np.asarray(delta, dtype=float)
    omega = np.asarray(omega, dtype=float)
    m = np.asarray(m_list, dtype=float)
    if not (delta.shape == omega.shape == m.shape):
        raise ValueError("delta, omega and m must have equal length")
    m_t = float(m.sum())
    delta0 = float(m @ delta / m_t)
    omega0 = float(m @ omega / m_t)
    return delta0, omega0, m_t, delta - delta0, omega - omega0


@dataclass
class SepSolution:
    """Pre-fault operating point: solved network voltages plus the machine
    internals that make it an exact equilibrium of the machine model."""

    v_mag: np.ndarray
    v_ang: np.ndarray
    machine_delta: np.ndarray
    eq_prime: np.ndarray
    pm: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    iterations: int
    max_mismatch: float
    coi_angle: float

    @property
    def v_complex(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def power_flow_sep(case: PowerCase, tol: float = 1e-10,
                   max_iter: int = 20) -> SepSolution:
    """Newton power flow on the pre-fault network, then classical-machine
    initialization.

    The first machine's bus is the slack; other machine buses hold PV
    constraints from their dispatch (pg, v_set).  Machine internals follow
    from terminal conditions: E' arg/mag from V + jX'd I, and Pm equal to the
    electrical output, so the solved point is an exact equilibrium of the
    assembled machine model.
    """
    if not case.machines:
        raise ValueError("case has no machines")
    comps = _connected_components(case)
    if len(comps) > 1:
        raise ValueError(f"network is islanded: {comps}")
    idx = case.bus_index()
    m = len(case.buses)
    ybus = build_ybus(case)

    mach_bus = np.array([idx[mc.bus] for mc in case.machines])
    slack = mach_bus[0]
    pv = mach_bus[1:]
    pq = np.array([i for i in range(m) if i not in set(mach_bus)], dtype=int)
    pvpq = np.concatenate([pv, pq]).astype(int)

    p_spec = -np.array([b.p_load for b in case.buses])
    q_spec = -np.array([b.q_load for b in case.buses])
    for mc, bi in zip(case.machines, mach_bus):
        if bi != slack:
            if mc.pg is None:
                raise ValueError(
                    f"machine at bus {mc.bus}: pg required for power flow")
            p_spec[bi] += mc.pg

    v = np.ones(m, dtype=complex)
    for mc, bi in zip(case.machines, mach_bus):
        v[bi] = mc.v_set

    mismatch_trace = []
    for it in range(max_iter + 1):
        s = v * np.conj(ybus @ v)
        dp = s.real - p_spec
        dq = s.imag - q_spec
        f = np.concatenate([dp[pvpq], dq[pq]])
        worst = float(np.max(np.abs(f))) if f.size else 0.0
        mismatch_trace.append(worst)
        if worst <= tol:
            break
        if it == max_iter or not math.isfinite(worst):
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations; "
                f"mismatch trace {mismatch_trace}")
        # polar Jacobian via complex derivatives of S(V)
        ibus = ybus @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(v / np.abs(v))
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
        ds_dvm = diag_v @ np.conj(ybus @ diag_vn) + np.conj(diag_i) @ diag_vn
        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}") from exc
        ang = np.angle(v)
        mag = np.abs(v)
        ang[pvpq] += dx[: pvpq.size]
        mag[pq] += dx[pvpq.size:]
        v = mag * np.exp(1j * ang)

    # classical machine internals from terminal conditions
    n = len(case.machines)
    delta = np.empty(n)
    eq = np.empty(n)
    pm = np.empty(n)
    p_gen = np.empty(n)
    q_gen = np.empty(n)
    loads = np.array([complex(b.p_load, b.q_load) for b in case.buses])
    s_inj = v * np.conj(ybus @ v)
    for k, (mc, bi) in enumerate(zip(case.machines, mach_bus)):
        s_gen = s_inj[bi] + loads[bi]
        i_gen = np.conj(s_gen / v[bi])
        e = v[bi] + 1j * mc.xd_prime * i_gen
        delta[k] = np.angle(e)
        eq[k] = abs(e) if mc.eq_prime is None else mc.eq_prime
        pm[k] = s_gen.real if mc.pm is None else mc.pm
        p_gen[k] = s_gen.real
        q_gen[k] = s_gen.imag

    m_arr = np.array([mc.m for mc in case.machines])
    coi_angle = float(m_arr @ delta / m_arr.sum())
    return SepSolution(
        v_mag=np.abs(v), v_ang=np.angle(v), machine_delta=delta,
        eq_prime=eq, pm=pm, p_gen=p_gen, q_gen=q_gen,
        iterations=it, max_mismatch=worst, coi_angle=coi_angle,
    )


class SpmSystem:
    """Assembled structure-preserving equilibrium system in the COI frame.

    Exposes residual/jacobian over the reduced state
    x = [machine angles 2..n, bus angles, bus voltages] and helpers to build
    states (from the operating point, or from a machine-angle grid point with
    the network equations re-solved).  Instances are immutable in practice:
    nothing mutates after construction, so they can be shared freely.
    """

    def __init__(self, case: PowerCase, ybus: np.ndarray,
                 eq_prime: np.ndarray, pm: np.ndarray,
                 contingency: Optional[Contingency] = None):
        self.case = case
        self.contingency = contingency
        self.ybus = np.asarray(ybus, dtype=complex)
        self.n = len(case.machines)
        self.m = len(case.buses)
        if self.n < 2:
            raise ValueError("the COI reduction needs at least two machines")
        idx = case.bus_index()
        self.mach_bus = np.array([idx[mc.bus] for mc in case.machines])
        self.m_i = np.array([mc.m for mc in case.machines])
        self.d_i = np.array([mc.d for mc in case.machines])
        self.xdp = np.array([mc.xd_prime for mc in case.machines])
        self.m_t = float(self.m_i.sum())
        self.eq_prime = np.asarray(eq_prime, dtype=float)
        self.pm = np.asarray(pm, dtype=float)
        ratios = self.d_i / self.m_i
        if np.max(np.abs(ratios - ratios[0])) > 1e-9 * max(abs(ratios[0]), 1.0):
            raise ValueError(
                "the COI reduction assumes uniform damping; D/M ratios are "
                f"{ratios}")
        self.dimension = (self.n - 1) + 2 * self.m
        self.name = case.name

    # ---- state layout -------------------------------------------------
    @property
    def layout(self) -> dict:
        """Slice map of the flat state vector."""
        n, m = self.n, self.m
        return {
            "machine_angles_2_to_n": (0, n - 1),
            "bus_angles": (n - 1, n - 1 + m),
            "bus_voltages": (n - 1 + m, n - 1 + 2 * m),
        }

    def split_state(self, x):
        x = np.asarray(x, dtype=float)
        n, m = self.n, self.m
        return x[: n - 1], x[n - 1: n - 1 + m], x[n - 1 + m:]

    def machine_angles(self, x) -> np.ndarray:
        """All n machine COI angles, the first reconstructed from the COI
        constraint sum(M * delta) = 0."""
        a, _, _ = self.split_state(x)
        delta = np.empty(self.n)
        delta[1:] = a
        delta[0] = -(self.m_i[1:] @ a) / self.m_i[0]
        return delta

    def state_from_sep(self, sep: SepSolution) -> np.ndarray:
        """COI-frame state at the pre-fault operating point."""
        delta_t = sep.machine_delta - sep.coi_angle
        theta_t = sep.v_ang - sep.coi_angle
        return np.concatenate([delta_t[1:], theta_t, sep.v_mag])

    # ---- equilibrium equations ----------------------------------------
    def _electrical_power(self, delta, theta, vmag):
        vb = vmag[self.mach_bus]
        tb = theta[self.mach_bus]
        return self.eq_prime * vb * np.sin(delta - tb) / self.xdp

    def residual(self, x) -> np.ndarray:
        """(n-1) swing mismatches for machines 2..n, then the real and
        imaginary parts of the m complex current balances."""
        a, theta, vmag = self.split_state(x)
        delta = self.machine_angles(x)
        pe = self._electrical_power(delta, theta, vmag)
        p_coi = float(self.pm.sum() - pe.sum())
        swing = self.pm[1:] - pe[1:] - (self.m_i[1:] / self.m_t) * p_coi

        vc = vmag * np.exp(1j * theta)
        ec = self.eq_prime * np.exp(1j * delta)
        inj = np.zeros(self.m, dtype=complex)
        inj[self.mach_bus] = (ec - vc[self.mach_bus]) / (1j * self.xdp)
        bal = inj - self.ybus @ vc
        return np.concatenate([swing, bal.real, bal.imag])

    def jacobian(self, x) -> np.ndarray:
        a, theta, vmag = self.split_state(x)
        n, m = self.n, self.m
        delta = self.machine_angles(x)
        mb = self.mach_bus
        vb = vmag[mb]
        tb = theta[mb]
        kk = self.eq_prime * vb / self.xdp
        sind = np.sin(delta - tb)
        cosd = np.cos(delta - tb)

        # d(all machine angles)/d(reduced angles)
        dd = np.zeros((n, n - 1))
        dd[0, :] = -self.m_i[1:] / self.m_i[0]
        dd[1:, :] = np.eye(n - 1)

        # electrical power derivatives
        dpe_da = (kk * cosd)[:, None] * dd
        dpe_dth = np.zeros((n, m))
        dpe_dth[np.arange(n), mb] = -kk * cosd
        dpe_dv = np.zeros((n, m))
        dpe_dv[np.arange(n), mb] = self.eq_prime * sind / self.xdp

        def swing_block(dpe):
            return -dpe[1:] + (self.m_i[1:] / self.m_t)[:, None] * dpe.sum(axis=0)

        vc = vmag * np.exp(1j * theta)
        ec = self.eq_prime * np.exp(1j * delta)
        eexp = np.exp(1j * theta)

        dbal_dth = -self.ybus * (1j * vc)[None, :]
        dbal_dth[mb, mb] += -vc[mb] / self.xdp
        dbal_dv = -self.ybus * eexp[None, :]
        dbal_dv[mb, mb] += 1j * eexp[mb] / self.xdp
        dbal_da = np.zeros((m, n - 1), dtype=complex)
        dbal_da[mb, :] = (ec / self.xdp)[:, None] * dd

        return np.block([
            [swing_block(dpe_da), swing_block(dpe_dth), swing_block(dpe_dv)],
            [dbal_da.real, dbal_dth.real, dbal_dv.real],
            [dbal_da.imag, dbal_dth.imag, dbal_dv.imag],
        ])

    def as_nonlinear_system(self) -> NonlinearSystem:
        return NonlinearSystem(self.dimension, self.residual, self.jacobian,
                               name=self.name)

    # ---- grid-point completion ----------------------------------------
    def grid_initial_state(self, angle_point, anchor_state,
                           tol: float = 1e-10,
                           max_iter: int = 40) -> Optional[np.ndarray]:
        """Complete a machine-angle grid point into a full state.

        The reduced machine angles are pinned to angle_point and the 2m
        network equations are re-solved for bus angles and voltages by Newton
        iteration started from the anchor state's algebraic values.  Returns
        None when the network subsolve fails (the point is unresolvable).
        """
        a = np.asarray(angle_point, dtype=float)
        if a.shape != (self.n - 1,):
            raise ValueError(f"angle point must have length {self.n - 1}")
        _, theta, vmag = self.split_state(np.asarray(anchor_state, dtype=float))
        x = np.concatenate([a, theta, vmag])
        n1 = self.n - 1
        for _ in range(max_iter):
            res = self.residual(x)[n1:]
            if not np.all(np.isfinite(res)):
                return None
            if np.linalg.norm(res, ord=np.inf) <= tol:
                if np.min(x[n1 + self.m:]) < 0.05:
                    return None
                return x
            jac = self.jacobian(x)[n1:, n1:]
            try:
                step = np.linalg.solve(jac, -res)
            except np.linalg.LinAlgError:
                return None
            x[n1:] += step
        return None


def spm_residual(sys: SpmSystem, x) -> np.ndarray:
    """Equilibrium mismatches of the assembled system at state x."""
    return sys.residual(x)


def assemble_spm(case: PowerCase, contingency: Optional[Contingency],
                 sep: SepSolution) -> SpmSystem:
    """Build the (post-fault) equilibrium system.

    Loads are folded as constant impedances at the pre-fault voltages; machine
    EMFs and mechanical powers come from the pre-fault initialization in
    `sep` (or from explicit case values captured there).
    """
    post = apply_contingency(case, contingency) if contingency else case
    ybus = fold_constant_impedance_loads(build_ybus(post), post, sep.v_mag)
    return SpmSystem(post, ybus, sep.eq_prime, sep.pm, contingency)
