import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridstress import netmodel as nm
from gridstress import powerflow as pf
from conftest import branch_row, bus_row, gen_row, matpower_text


def naive_ybus(case):
    """Element-by-element nodal admittance, one branch and shunt at a time."""
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        ys = 1.0 / complex(br.r, br.x)
        f, t, tap = br.from_bus, br.to_bus, br.tap
        y[f, f] += (ys + 0.5j * br.b) / tap ** 2
        y[t, t] += ys + 0.5j * br.b
        y[f, t] -= ys / tap
        y[t, f] -= ys / tap
    for k, bus in enumerate(case.buses):
        y[k, k] += complex(bus.shunt_g, bus.shunt_b)
    return y


def single_branch(r=0.0, x=0.1, b=0.0):
    return nm.GridCase(100.0, [nm.Bus(0, nm.SLACK), nm.Bus(1, nm.PQ)],
                       [nm.Branch(0, 1, r, x, b)], [nm.Generator(0, 0.0)])


def test_ybus_single_branch():
    y = pf.build_ybus(single_branch()).toarray()
    assert y[0, 1] == pytest.approx(10j) and y[1, 0] == pytest.approx(10j)
    assert y[0, 0] == pytest.approx(-10j) and y[1, 1] == pytest.approx(-10j)


def test_ybus_line_charging_half_each_end():
    y0 = pf.build_ybus(single_branch()).toarray()
    y1 = pf.build_ybus(single_branch(b=0.2)).toarray()
    assert np.allclose(np.diag(y1 - y0), [0.1j, 0.1j])


def test_ybus_118_matches_naive_oracle(case118):
    y = pf.build_ybus(case118).toarray()
    oracle = naive_ybus(case118)
    assert np.max(np.abs(y - oracle)) < 1e-12
    assert np.max(np.abs(y.sum(axis=1) - oracle.sum(axis=1))) < 1e-12


def test_zero_load_flat_solution():
    case = single_branch()
    s = pf.solve_nr(case, np.zeros(2), np.zeros(2))
    assert s.converged and s.iterations <= 1
    assert np.all(s.v_ang == 0) and np.allclose(s.v_mag, 1.0)


def gauss_seidel_two_bus(p, q, x, tol=1e-10, damping=0.8):
    """Damped Gauss-Seidel on a lossless 2-bus feeder, slack 1.0 at bus 0."""
    ys = 1 / (1j * x)
    v0, v1 = 1.0 + 0j, 1.0 + 0j
    s1 = -(p + 1j * q)
    for _ in range(10000):
        new = (np.conj(s1 / v1) + ys * v0) / ys
        v_next = v1 + damping * (new - v1)
        if abs(v_next - v1) < tol:
            return v_next
        v1 = v_next
    raise RuntimeError("oracle did not converge")


def test_two_bus_against_gauss_seidel(two_bus):
    s = pf.solve_nr(two_bus)
    assert s.converged and s.max_mismatch < 1e-8
    v1 = gauss_seidel_two_bus(0.1, 0.0, 0.1)
    assert abs(s.v_ang[1] - np.angle(v1)) < 1e-6
    assert abs(s.v_mag[1] - abs(v1)) < 1e-6


def test_118_base_case(case118):
    t0 = time.perf_counter()
    s = pf.solve_nr(case118)
    elapsed = time.perf_counter() - t0
    assert s.converged and s.iterations <= 10 and s.max_mismatch <= 1e-8
    assert s.v_ang[case118.slack] == 0.0
    assert abs(pf.max_mismatch(case118, s) - s.max_mismatch) <= 1e-12
    assert abs(pf.power_balance(case118, s)) <= 1e-6
    assert elapsed < 1.0


def test_dense_and_sparse_agree(case118):
    a = pf.solve_nr(case118, dense=True)
    b = pf.solve_nr(case118, dense=False)
    assert np.allclose(a.v_ang, b.v_ang, atol=1e-10) and np.allclose(a.v_mag, b.v_mag, atol=1e-10)


def test_warm_start_fewer_iterations(case118):
    base = pf.solve_nr(case118)
    again = pf.solve_nr(case118, case118.arrays.p_load * 1.01, case118.arrays.q_load * 1.01,
                        warm_start=base)
    assert again.converged and again.iterations < base.iterations


def test_q_limits_hold(case118):
    s = pf.solve_nr(case118)
    a = case118.arrays
    ybus = pf.build_ybus(case118)
    v = s.voltage
    q_inj = (v * np.conj(ybus @ v)).imag
    slack, pv, pq = pf.bus_types(case118)
    qmin, qmax = pf._bus_q_limits(case118)
    q_gen = q_inj + a.q_load
    remaining_pv = [b for b in pv if b not in s.q_limited]
    for b in remaining_pv:
        assert qmin[b] - 1e-6 <= q_gen[b] <= qmax[b] + 1e-6
        assert s.v_mag[b] == pytest.approx(pf.voltage_setpoints(case118)[b])
    for b in s.q_limited:
        assert q_gen[b] == pytest.approx(qmin[b]) or q_gen[b] == pytest.approx(qmax[b])


def test_non_convergence_reported(case118):
    s = pf.solve_nr(case118, case118.arrays.p_load * 6, case118.arrays.q_load * 6, max_iter=5)
    assert not s.converged


def test_bad_tolerance(two_bus):
    with pytest.raises(ValueError):
        pf.solve_nr(two_bus, tol=0)


def state_from(v_mag, v_ang):
    return pf.SolvedState(np.asarray(v_mag, float), np.asarray(v_ang, float), True, 0, 0.0)


def test_transfer_equation_hand_value():
    case = single_branch(x=0.5)
    flows = pf.branch_flows(case, state_from([1, 1], [math.radians(30), 0]))
    assert flows.p_from[0] == pytest.approx(1.0, abs=1e-12)
    flows = pf.branch_flows(case, state_from([1, 1], [0.2, 0.2]))
    assert flows.p_from[0] == pytest.approx(0.0, abs=1e-15)


def test_transfer_equation_1000_lossless(rng):
    worst = 0.0
    for _ in range(1000):
        x = rng.uniform(0.01, 1.0)
        vr, vs = rng.uniform(0.9, 1.1, 2)
        ang = rng.uniform(-0.8, 0.8, 2)
        flows = pf.branch_flows(single_branch(x=x), state_from([vr, vs], ang))
        exact = vr * vs / x * math.sin(ang[0] - ang[1])
        worst = max(worst, abs(flows.p_from[0] - exact), abs(flows.p_from[0] + flows.p_to[0]))
    assert worst < 1e-9


def test_lossy_flows_match_injection_oracle(rng):
    for _ in range(50):
        r, x, b = rng.uniform(0.001, 0.1), rng.uniform(0.02, 0.5), rng.uniform(0, 0.4)
        tap = rng.uniform(0.9, 1.1)
        case = nm.GridCase(100.0, [nm.Bus(0, nm.SLACK), nm.Bus(1, nm.PQ)],
                           [nm.Branch(0, 1, r, x, b, tap)], [nm.Generator(0, 0.0)])
        state = state_from(rng.uniform(0.9, 1.1, 2), rng.uniform(-0.5, 0.5, 2))
        v = state.voltage
        # with one branch, bus injections are exactly the terminal flows
        s = v * np.conj(naive_ybus(case) @ v)
        flows = pf.branch_flows(case, state)
        assert abs(flows.p_from[0] + 1j * flows.q_from[0] - s[0]) < 1e-10
        assert abs(flows.p_to[0] + 1j * flows.q_to[0] - s[1]) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3))
def test_angle_shift_leaves_flows(shift):
    case = nm.ieee118()
    s = pf.solve_nr(case)
    a = pf.branch_flows(case, s)
    b = pf.branch_flows(case, state_from(s.v_mag, s.v_ang + shift))
    assert np.allclose(a.p_from, b.p_from, atol=1e-9) and np.allclose(a.q_to, b.q_to, atol=1e-9)


def test_three_bus_balance(three_bus):
    s = pf.solve_nr(three_bus)
    assert s.converged and abs(pf.power_balance(three_bus, s)) < 1e-6
    assert abs(pf.max_mismatch(three_bus, s) - s.max_mismatch) <= 1e-12
