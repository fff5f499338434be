import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridstress import netmodel as nm
from gridstress import powerflow as pf
from gridstress import scenario as sc
from gridstress import stress
from conftest import branch_row, bus_row, gen_row, matpower_text

LIM = stress.StressLimits(0.9, 1.1)


def test_profile_length_paper_scale():
    assert sc.build_load_profile(30, 480).size == 14400


def test_profile_constant():
    assert np.all(sc.build_load_profile(1, 24, sc.LoadShape(constant=1.0)) == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 96), st.integers(0, 1000),
       st.floats(0, 0.3), st.floats(0, 24), st.floats(0.5, 6))
def test_profile_within_band(days, slots, seed, jitter, hour, width):
    shape = sc.LoadShape(0.7, 1.2, peaks=((hour, width, 1.0),), day_jitter=jitter)
    out = sc.build_load_profile(days, slots, shape, seed)
    assert out.size == days * slots
    assert np.all((out >= 0.7) & (out <= 1.2))


def test_profile_inverted_band():
    with pytest.raises(ValueError):
        sc.build_load_profile(1, 24, sc.LoadShape(1.2, 0.7))


def test_profile_has_two_peaks():
    out = sc.build_load_profile(1, 480, sc.LoadShape(day_jitter=0.0))
    interior = (out[1:-1] > out[:-2]) & (out[1:-1] >= out[2:])
    assert interior.sum() == 2


def test_perturb_zero_sigma_is_identity(case118):
    oc = sc.nominal_condition(case118)
    assert sc.perturb_loads(oc, 0.0, seed=3) is oc


def test_perturb_statistics(two_bus):
    nominal = sc.nominal_condition(two_bus)
    values = np.array([sc.perturb_loads(sc.OperatingCondition(k, 0, nominal.p_load,
                                                              nominal.q_load), 0.02, 7).p_load[1]
                       for k in range(10000)])
    assert abs(values.std() - 0.02 * nominal.p_load[1]) <= 0.05 * 0.02 * nominal.p_load[1]
    assert np.all(values >= 0)


def test_perturb_deterministic(case118):
    oc = sc.nominal_condition(case118, oc_id=4)
    a, b = sc.perturb_loads(oc, 0.05, 11), sc.perturb_loads(oc, 0.05, 11)
    assert np.array_equal(a.p_load, b.p_load) and np.array_equal(a.q_load, b.q_load)
    c = sc.perturb_loads(oc, 0.05, 12)
    assert not np.array_equal(a.p_load, c.p_load)


def test_negative_load_rejected():
    with pytest.raises(ValueError):
        sc.OperatingCondition(0, 0, np.array([-1.0]), np.array([0.0]))


def test_118_contingency_count(case118):
    conts = sc.enumerate_contingencies(case118)
    assert len(conts) == 240
    assert len({(c.kind, c.element) for c in conts}) == 240
    assert [c.id for c in conts] == list(range(240))
    kinds = [c.kind for c in conts]
    assert kinds == sorted(kinds, key=lambda k: k != sc.BRANCH_OUTAGE)


def test_two_bus_contingencies(two_bus):
    conts = sc.enumerate_contingencies(two_bus)
    assert [(c.kind, c.element) for c in conts] == [(sc.BRANCH_OUTAGE, 0),
                                                   (sc.GENERATOR_OUTAGE, 0)]


def test_enumeration_matches_brute_force(three_bus):
    expected = {("branch", k) for k in range(3)} | {("generator", k) for k in range(2)}
    got = {(c.kind.split("_")[0], c.element) for c in sc.enumerate_contingencies(three_bus)}
    assert got == expected


def test_parallel_pair_outage_stays_connected():
    case = nm.parse_case(matpower_text([bus_row(1, 3), bus_row(2, 1, pd=5.0)], [gen_row(1)],
                                       [branch_row(1, 2), branch_row(1, 2)]))
    out = sc.apply_contingency(case, sc.Contingency(0, sc.BRANCH_OUTAGE, 0))
    assert not sc.is_islanding(out)
    assert case.branches[0].in_service  # original untouched


def test_radial_outage_islands(two_bus):
    out = sc.apply_contingency(two_bus, sc.Contingency(0, sc.BRANCH_OUTAGE, 0))
    assert sc.is_islanding(out)


def test_generator_outage_shifts_to_slack(three_bus):
    gen = 1  # 0.6 p.u. unit at bus 2
    base = pf.solve_nr(three_bus)
    out = sc.apply_contingency(three_bus, sc.Contingency(0, sc.GENERATOR_OUTAGE, gen))
    post = pf.solve_nr(out)
    loss = lambda case, s: float(np.sum(pf.branch_flows(case, s).losses))
    rise = pf.slack_injection(out, post).real - pf.slack_injection(three_bus, base).real
    assert rise == pytest.approx(0.6 + loss(out, post) - loss(three_bus, base), abs=1e-8)


def test_slack_unit_outage_moves_slack(three_bus):
    out = sc.apply_contingency(three_bus, sc.Contingency(0, sc.GENERATOR_OUTAGE, 0))
    assert out.buses[1].kind == nm.SLACK and out.buses[0].kind != nm.SLACK
    assert pf.solve_nr(out).converged


def small_dataset(case, n_oc=3, keep_flows=False, workers=1, seed=0):
    ocs = [sc.perturb_loads(sc.nominal_condition(case, m, oc_id=k, slot=k), 0.02, seed)
           for k, m in enumerate(np.linspace(0.9, 1.1, n_oc))]
    conts = sc.enumerate_contingencies(case)
    ratings = case.arrays.rating
    return sc.generate_patterns(case, ocs, conts, LIM, 1, seed=seed, config={"t": 1},
                                ratings=ratings, keep_flows=keep_flows, workers=workers)


def square_case():
    """Four-bus ring with a diagonal; no branch outage islands it."""
    return nm.parse_case(matpower_text(
        [bus_row(1, 3), bus_row(2, 2, pd=30.0, vm=1.01), bus_row(3, 1, pd=80.0, qd=20.0),
         bus_row(4, 1, pd=60.0, qd=10.0)],
        [gen_row(1), gen_row(2, pg=70.0, vg=1.01)],
        [branch_row(1, 2, r=0.01, x=0.08, rate=80), branch_row(2, 3, r=0.01, x=0.1, rate=60),
         branch_row(3, 4, r=0.02, x=0.12, rate=40), branch_row(4, 1, r=0.01, x=0.09, rate=90),
         branch_row(1, 3, r=0.01, x=0.11, rate=70)]))


def test_cardinality_three_by_four():
    case = square_case()
    ocs = [sc.nominal_condition(case, m, oc_id=k) for k, m in enumerate((0.9, 1.0, 1.1))]
    conts = sc.enumerate_contingencies(case)[:4]
    ds = sc.generate_patterns(case, ocs, conts, LIM, ratings=case.arrays.rating)
    assert len(ds) == 12 and ds.feasible.all()


def test_labels_match_end_to_end_oracle(three_bus):
    ds = small_dataset(three_bus)
    for k in range(len(ds)):
        oc_row = ds.oc_index[k]
        c = ds.contingencies[ds.contingency_id[k]]
        m = np.linspace(0.9, 1.1, 3)[oc_row]
        oc = sc.perturb_loads(sc.nominal_condition(three_bus, m, oc_id=oc_row), 0.02, 0)
        # independent outage: rebuild the case by hand
        branches = [nm.Branch(b.from_bus, b.to_bus, b.r, b.x, b.b, b.tap, b.rating_normal,
                              not (c.kind == sc.BRANCH_OUTAGE and i == c.element))
                    for i, b in enumerate(three_bus.branches)]
        case = three_bus.with_branches(branches)
        p_gen = oc.p_gen.copy()
        if c.kind == sc.GENERATOR_OUTAGE:
            case = sc.apply_contingency(three_bus, c)
            p_gen[c.element] = 0.0
        if len(nm.validate_connectivity(case)) > 1:
            assert not ds.feasible[k]
            continue
        state = pf.solve_nr(case, oc.p_load, oc.q_load, p_gen=p_gen)
        flows = pf.branch_flows(case, state)
        load = np.maximum(np.abs(flows.p_from), np.abs(flows.p_to))
        si = stress.brute_force_si(load, three_bus.arrays.rating, LIM)
        assert ds.feasible[k]
        # both solves stop at a 1e-8 mismatch from different starts (warm vs flat)
        assert ds.label_si[k] == pytest.approx(si, abs=1e-6)
        assert ds.label_stressed[k] == bool(np.any(load > 1.1 * three_bus.arrays.rating))


def test_paper_scale_bookkeeping():
    assert 14400 * 240 == 3_456_000


def test_pattern_invariants(three_bus):
    ds = small_dataset(three_bus, keep_flows=True)
    for k in range(len(ds)):
        p = ds.pattern(k)
        assert np.array_equal(p.angle_diff, -p.angle_diff.T)
        assert np.all(np.diag(p.angle_diff) == 0)
        if p.feasible:
            assert p.label_si >= 0
            if p.label_stressed:
                assert p.label_si >= 1
            again = stress.stress_report(ds.debug_flows[k], ds.ratings, LIM).si
            assert abs(again - p.label_si) <= 1e-10
        else:
            assert np.isnan(p.label_si)
    assert len(ds) <= ds.n_contingencies * ds.angles.shape[0]


def test_worker_count_does_not_change_content(three_bus):
    a = sc.dataset_bytes(small_dataset(three_bus, workers=1))
    b = sc.dataset_bytes(small_dataset(three_bus, workers=2))
    assert a == b


def test_base_failure_excludes_oc(three_bus):
    good = sc.nominal_condition(three_bus, 1.0, oc_id=0)
    bad = sc.nominal_condition(three_bus, 30.0, oc_id=1)
    ds = sc.generate_patterns(three_bus, [good, bad], sc.enumerate_contingencies(three_bus),
                              LIM, ratings=three_bus.arrays.rating)
    assert list(ds.oc_ids) == [0]
    assert ds.excluded_ocs and ds.excluded_ocs[0]["oc_id"] == 1


def fake_dataset(n=100, stressed_every=4):
    labels = np.arange(n) % stressed_every == 0
    return sc.Dataset("x", (1, 2), [sc.Contingency(0, sc.BRANCH_OUTAGE, 0)],
                      np.arange(n), np.arange(n), np.zeros((n, 2), np.float32),
                      np.arange(n), np.zeros(n, np.int64), labels * 1.5, labels,
                      np.ones(n, bool))


def test_split_seventy_thirty():
    split = sc.split_dataset(fake_dataset(100), 0.7, seed=1)
    assert (split == sc.TRAIN).sum() == 70 and (split == sc.TEST).sum() == 30
    ds = fake_dataset(100)
    assert ds.label_stressed[split == sc.TEST].any() and ds.label_stressed[split == sc.TRAIN].any()
    assert np.array_equal(split, sc.split_dataset(fake_dataset(100), 0.7, seed=1))


def test_split_that_empties_a_side():
    with pytest.raises(ValueError):
        sc.split_dataset(fake_dataset(2), 0.99, seed=0)
    with pytest.raises(ValueError):
        sc.split_dataset(fake_dataset(10), 1.0, seed=0)


def test_container_round_trip(tmp_path, three_bus):
    ds = small_dataset(three_bus)
    ds = ds.with_split(sc.split_dataset(ds, 0.7, 0))
    path = tmp_path / "d.gsds"
    sc.save_dataset(ds, path)
    back = sc.load_dataset(path)
    assert back.fingerprint == ds.fingerprint
    for name in ("oc_ids", "slots", "angles", "oc_index", "contingency_id", "label_stressed",
                 "feasible", "split", "norm_mean", "norm_scale", "ratings"):
        assert np.array_equal(getattr(back, name), getattr(ds, name)), name
    assert np.array_equal(back.label_si, ds.label_si, equal_nan=True)
    assert sc.dataset_bytes(back) == sc.dataset_bytes(ds)


def test_container_layout(three_bus):
    import struct
    blob = sc.dataset_bytes(small_dataset(three_bus))
    assert blob[:4] == b"GSDS"
    version, reserved, hlen = struct.unpack_from("<HHQ", blob, 4)
    assert (version, reserved) == (1, 0)
    assert sc.RECORD_DTYPE.itemsize == 24


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.gsds"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(sc.DatasetFormatError):
        sc.load_dataset(path)


def test_csv_export(three_bus):
    ds = small_dataset(three_bus)
    buf = io.StringIO()
    sc.export_csv(ds, buf)
    rows = buf.getvalue().strip().splitlines()
    assert len(rows) == len(ds) + 1 and rows[0].startswith("oc_id")


def test_normalization_uses_train_only(three_bus):
    ds = small_dataset(three_bus)
    split = sc.split_dataset(ds, 0.7, 0)
    ds2 = ds.with_split(split)
    mean, scale = sc.normalization_stats(ds, np.flatnonzero(split == sc.TRAIN))
    assert np.array_equal(ds2.norm_mean, mean) and np.array_equal(ds2.norm_scale, scale)
    assert np.all(scale > 0)
