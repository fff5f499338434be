"""Newton-Raphson AC power flow in polar coordinates.

Everything is per-unit on the case base.  The admittance model is the usual
pi-equivalent with the off-nominal tap on the from side:

    Yff = (ys + j b/2) / tap^2    Yft = -ys / tap
    Ytf = -ys / tap               Ytt =  ys + j b/2
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .netmodel import PQ, PV, SLACK, GridCase

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20
DENSE_BELOW = 50
# PV->PQ switching is only considered once the iterate is this close
Q_CHECK_MISMATCH = 1e-3


class PowerFlowError(RuntimeError):
    pass


class SingularJacobian(PowerFlowError):
    pass


@dataclass(frozen=True)
class SolvedState:
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    # buses switched from PV to PQ on a reactive limit
    q_limited: tuple[int, ...] = ()
    # generator Q held at its limit on the q_limited buses (zeros elsewhere)
    q_fixed: np.ndarray | None = field(default=None, repr=False)
    p_load: np.ndarray | None = field(default=None, repr=False)
    q_load: np.ndarray | None = field(default=None, repr=False)
    p_gen: np.ndarray | None = field(default=None, repr=False)

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass(frozen=True)
class BranchFlows:
    p_from: np.ndarray
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray

    @property
    def losses(self) -> np.ndarray:
        return self.p_from + self.p_to


def branch_admittances(case: GridCase):
    """Per-branch (yff, yft, ytf, ytt); out-of-service branches get zeros."""
    a = case.arrays
    if np.any(a.x == 0):
        bad = int(np.flatnonzero(a.x == 0)[0])
        raise PowerFlowError(f"branch {bad} has zero reactance")
    ys = a.br_on / (a.r + 1j * a.x)
    bc = a.br_on * a.b
    ytt = ys + 0.5j * bc
    yff = ytt / (a.tap * a.tap)
    yft = -ys / a.tap
    return yff, yft, yft.copy(), ytt


def build_ybus(case: GridCase) -> sp.csr_matrix:
    a = case.arrays
    n = case.n_bus
    yff, yft, ytf, ytt = branch_admittances(case)
    rows = np.concatenate([a.f, a.f, a.t, a.t, np.arange(n)])
    cols = np.concatenate([a.f, a.t, a.f, a.t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, a.gs + 1j * a.bs])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_ybus_dense(case: GridCase) -> np.ndarray:
    """Element-by-element dense construction (kept as an independent route)."""
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for i, bus in enumerate(case.buses):
        y[i, i] += bus.shunt_g + 1j * bus.shunt_b
    for br in case.branches:
        if not br.in_service:
            continue
        ys = 1.0 / complex(br.r, br.x)
        half = 0.5j * br.b
        f, t = br.from_bus, br.to_bus
        y[f, f] += (ys + half) / br.tap ** 2
        y[t, t] += ys + half
        y[f, t] -= ys / br.tap
        y[t, f] -= ys / br.tap
    return y


def bus_injections(case: GridCase, p_load, q_load, p_gen=None) -> np.ndarray:
    """Scheduled complex injection per bus (generation minus load)."""
    a = case.arrays
    gp = a.gen_p if p_gen is None else np.asarray(p_gen, dtype=float)
    pg = np.bincount(a.gen_bus, weights=gp * a.gen_on, minlength=case.n_bus)
    return pg - np.asarray(p_load) - 1j * np.asarray(q_load)


def bus_types(case: GridCase):
    """(slack, pv, pq) index arrays; PV buses without a running unit count as PQ."""
    a = case.arrays
    has_gen = np.zeros(case.n_bus, dtype=bool)
    has_gen[a.gen_bus[a.gen_on]] = True
    kinds = np.array([b.kind for b in case.buses])
    slack = int(np.flatnonzero(kinds == SLACK)[0])
    pv = np.flatnonzero((kinds == PV) & has_gen)
    pq = np.flatnonzero((kinds == PQ) | ((kinds == PV) & ~has_gen))
    return slack, pv, pq


def voltage_setpoints(case: GridCase) -> np.ndarray:
    a = case.arrays
    vset = np.array([b.v_set for b in case.buses])
    # first running unit at a bus fixes its voltage
    for g in np.flatnonzero(a.gen_on)[::-1]:
        vset[a.gen_bus[g]] = a.gen_v[g]
    return vset


def mismatch_vector(ybus, v: np.ndarray, sbus: np.ndarray) -> np.ndarray:
    return v * np.conj(ybus @ v) - sbus


def max_mismatch(case: GridCase, state: SolvedState, ybus=None) -> float:
    """Recompute the largest P/Q residual of ``state`` from scratch."""
    ybus = build_ybus(case) if ybus is None else ybus
    p_load = case.arrays.p_load if state.p_load is None else state.p_load
    q_load = case.arrays.q_load if state.q_load is None else state.q_load
    sbus = bus_injections(case, p_load, q_load, state.p_gen)
    mis = mismatch_vector(ybus, state.voltage, sbus)
    slack, pv, pq = bus_types(case)
    pq = np.union1d(pq, np.asarray(state.q_limited, dtype=int))
    pv = np.setdiff1d(pv, pq)
    if state.q_fixed is not None:
        mis = mis - 1j * state.q_fixed
    pvpq = np.concatenate([pv, pq])
    parts = [np.abs(mis.real[pvpq]), np.abs(mis.imag[pq])]
    return float(max(np.max(p) if p.size else 0.0 for p in parts))


def _bus_q_limits(case: GridCase):
    a = case.arrays
    on = a.gen_on
    qmin = np.bincount(a.gen_bus[on], weights=a.gen_qmin[on], minlength=case.n_bus)
    qmax = np.bincount(a.gen_bus[on], weights=a.gen_qmax[on], minlength=case.n_bus)
    return qmin, qmax


class _Jacobian:
    """Sparse Jacobian assembly with the index pattern computed once."""

    def __init__(self, ybus: sp.csr_matrix, pvpq: np.ndarray, pq: np.ndarray, dense: bool):
        self.ybus = ybus.tocsr()
        self.dense = dense
        self.pvpq, self.pq = pvpq, pq
        n = ybus.shape[0]
        coo = self.ybus.tocoo()
        self.i, self.j, self.y = coo.row, coo.col, coo.data
        # position of each bus inside the angle block / magnitude block
        ang_pos = np.full(n, -1)
        ang_pos[pvpq] = np.arange(pvpq.size)
        mag_pos = np.full(n, -1)
        mag_pos[pq] = np.arange(pq.size)
        self.size = pvpq.size + pq.size
        ai, aj = ang_pos[self.i], ang_pos[self.j]
        mi, mj = mag_pos[self.i], mag_pos[self.j]
        off = pvpq.size
        blocks = []
        # (row-mask, col-mask, row index, col index, which derivative, real/imag)
        blocks.append(((ai >= 0) & (aj >= 0), ai, aj, "a", "re"))
        blocks.append(((ai >= 0) & (mj >= 0), ai, mj + off, "m", "re"))
        blocks.append(((mi >= 0) & (aj >= 0), mi + off, aj, "a", "im"))
        blocks.append(((mi >= 0) & (mj >= 0), mi + off, mj + off, "m", "im"))
        self.blocks = [(np.flatnonzero(mask), r[mask], c[mask], d, part)
                       for mask, r, c, d, part in blocks]
        self.rows = np.concatenate([b[1] for b in self.blocks])
        self.cols = np.concatenate([b[2] for b in self.blocks])

    def values(self, v: np.ndarray) -> np.ndarray:
        i, j, y = self.i, self.j, self.y
        ibus = self.ybus @ v
        vm = np.abs(v)
        vn = v / vm
        # dS/dVa and dS/dVm on the nonzero pattern of Ybus
        dva = -1j * v[i] * np.conj(y * v[j])
        dvm = v[i] * np.conj(y * vn[j])
        diag = i == j
        dva[diag] += 1j * v[i[diag]] * np.conj(ibus[i[diag]])
        dvm[diag] += np.conj(ibus[i[diag]]) * vn[i[diag]]
        out = []
        for idx, _, _, d, part in self.blocks:
            src = dva if d == "a" else dvm
            vals = src[idx]
            out.append(vals.real if part == "re" else vals.imag)
        return np.concatenate(out)

    def solve(self, v: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        vals = self.values(v)
        if self.dense:
            jac = np.zeros((self.size, self.size))
            np.add.at(jac, (self.rows, self.cols), vals)
            try:
                return np.linalg.solve(jac, rhs)
            except np.linalg.LinAlgError as exc:
                raise SingularJacobian(str(exc)) from None
        jac = sp.csc_matrix((vals, (self.rows, self.cols)), shape=(self.size, self.size))
        try:
            return splu(jac).solve(rhs)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from None


def solve_nr(case: GridCase, p_load=None, q_load=None, *, p_gen=None,
             tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
             warm_start: SolvedState | None = None, enforce_q_limits: bool = True,
             ybus=None, dense: bool | None = None) -> SolvedState:
    """Solve the AC power flow for the given per-bus loads.

    Loads default to the case's nominal values and generator dispatch to the
    case's set points.  Starts flat unless ``warm_start`` is given.  A solve
    that fails to reach ``tol`` within ``max_iter`` returns a state with
    ``converged=False``; a singular Jacobian raises :class:`SingularJacobian`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = case.arrays
    p_load = a.p_load if p_load is None else np.asarray(p_load, dtype=float)
    q_load = a.q_load if q_load is None else np.asarray(q_load, dtype=float)
    ybus = build_ybus(case) if ybus is None else ybus
    n = case.n_bus
    dense = n < DENSE_BELOW if dense is None else dense
    sbus = bus_injections(case, p_load, q_load, p_gen)
    slack, pv, pq = bus_types(case)
    vset = voltage_setpoints(case)
    qmin, qmax = _bus_q_limits(case)

    if warm_start is not None:
        v = warm_start.voltage.astype(complex)
    else:
        v = np.ones(n, dtype=complex)
    gen_buses = np.concatenate([[slack], pv])
    v[gen_buses] = vset[gen_buses] * np.exp(1j * np.angle(v[gen_buses]))
    # the reference angle is pinned to zero
    v = v * np.exp(-1j * np.angle(v[slack]))

    q_fixed = np.zeros(n)
    limited: list[int] = []
    jac = _Jacobian(ybus, np.concatenate([pv, pq]), pq, dense)
    it = 0
    while True:
        s_target = sbus + 1j * q_fixed
        mis = mismatch_vector(ybus, v, s_target)
        pvpq = np.concatenate([pv, pq])
        f = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        norm = float(np.max(np.abs(f))) if f.size else 0.0

        if enforce_q_limits and pv.size and norm < Q_CHECK_MISMATCH:
            qg = (v * np.conj(ybus @ v)).imag[pv] + q_load[pv]
            over = (qg > qmax[pv] + tol) | (qg < qmin[pv] - tol)
            if np.any(over):
                for b, q in zip(pv[over], qg[over]):
                    q_fixed[b] = qmax[b] if q > qmax[b] else qmin[b]
                    limited.append(int(b))
                pv = pv[~over]
                pq = np.sort(np.concatenate([pq, np.array(limited[-int(over.sum()):])]))
                jac = _Jacobian(ybus, np.concatenate([pv, pq]), pq, dense)
                continue

        if norm <= tol:
            converged = True
            break
        if it >= max_iter:
            converged = False
            break
        dx = jac.solve(v, -f)
        it += 1
        va = np.angle(v)
        vm = np.abs(v)
        va[pvpq] += dx[:pvpq.size]
        vm[pq] += dx[pvpq.size:]
        v = vm * np.exp(1j * va)

    if not converged:
        log.debug("NR did not converge in %d iterations (mismatch %.3e)", it, norm)
    v_ang = np.angle(v) - np.angle(v[slack])
    v_ang[slack] = 0.0
    return SolvedState(
        v_mag=np.abs(v), v_ang=v_ang, converged=converged, iterations=it,
        max_mismatch=norm, q_limited=tuple(sorted(limited)), q_fixed=q_fixed,
        p_load=p_load, q_load=q_load,
        p_gen=None if p_gen is None else np.asarray(p_gen, dtype=float))


def branch_flows(case: GridCase, state: SolvedState) -> BranchFlows:
    """Complex power entering each branch at both terminals."""
    a = case.arrays
    yff, yft, ytf, ytt = branch_admittances(case)
    v = state.voltage
    vf, vt = v[a.f], v[a.t]
    sf = vf * np.conj(yff * vf + yft * vt)
    st = vt * np.conj(ytf * vf + ytt * vt)
    return BranchFlows(sf.real, sf.imag, st.real, st.imag)


def slack_injection(case: GridCase, state: SolvedState, ybus=None) -> complex:
    ybus = build_ybus(case) if ybus is None else ybus
    v = state.voltage
    slack = bus_types(case)[0]
    return complex(v[slack] * np.conj((ybus @ v)[slack]))


def power_balance(case: GridCase, state: SolvedState, ybus=None) -> float:
    """Total generation - load - losses (active), per-unit.

    Slack output is taken from the solved state, other units from their
    dispatch, and losses from the branch flows plus shunt consumption.
    """
    ybus = build_ybus(case) if ybus is None else ybus
    a = case.arrays
    p_load = a.p_load if state.p_load is None else state.p_load
    gp = a.gen_p if state.p_gen is None else state.p_gen
    slack = bus_types(case)[0]
    p_slack_inj = slack_injection(case, state, ybus).real
    on = a.gen_on
    other = on & (a.gen_bus != slack)
    gen_total = float(np.sum(gp[other])) + p_slack_inj + float(p_load[slack])
    flows = branch_flows(case, state)
    vm2 = state.v_mag ** 2
    losses = float(np.sum(flows.losses)) + float(np.sum(a.gs * vm2))
    return gen_total - float(np.sum(p_load)) - losses
