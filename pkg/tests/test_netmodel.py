import math

import pytest
from hypothesis import given, settings, strategies as st

from gridstress import netmodel as nm
from conftest import branch_row, bus_row, gen_row, matpower_text


def test_two_bus_case_parses(two_bus):
    assert two_bus.n_bus == 2 and two_bus.n_branch == 1
    assert two_bus.buses[0].kind == nm.SLACK and two_bus.buses[1].kind == nm.PQ
    # loads are stored per-unit on the case base
    assert two_bus.buses[1].p_load == pytest.approx(0.1)
    assert two_bus.branches[0].rating_normal == pytest.approx(0.5)


def test_ieee118_counts(case118):
    assert case118.n_bus == 118
    assert len(case118.generators) == 54
    assert case118.n_branch == 186
    transformers = sum(br.is_transformer for br in case118.branches)
    assert transformers == 9
    assert case118.n_branch - transformers == 177


def test_missing_bus_reference_names_the_bus():
    text = matpower_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)],
                         [branch_row(1, 999)])
    with pytest.raises(nm.CaseSemanticError, match="999"):
        nm.parse_case(text)


@pytest.mark.parametrize("mutate,needle", [
    (lambda b, g, br: br.__setitem__(0, branch_row(1, 2, x=0.0)), "reactance"),
    (lambda b, g, br: b.__setitem__(0, bus_row(1, 1)), "slack"),
    (lambda b, g, br: b.__setitem__(1, bus_row(1, 1)), "duplicate"),
])
def test_semantic_errors(mutate, needle):
    buses, gens, branches = [bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)]
    mutate(buses, gens, branches)
    with pytest.raises(nm.CaseSemanticError, match=needle):
        nm.parse_case(matpower_text(buses, gens, branches))


def test_syntax_error_has_location():
    text = matpower_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)])
    text = text.replace("0.1", "0.1x", 1)
    with pytest.raises(nm.CaseSyntaxError) as err:
        nm.parse_case(text)
    assert err.value.line > 0 and err.value.column > 0


def test_malformed_number_is_not_coerced():
    text = matpower_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2)])
    with pytest.raises(nm.CaseSyntaxError):
        nm.parse_case(text.replace("345", "3-45", 1))


def test_unknown_format():
    with pytest.raises(ValueError):
        nm.parse_case("", "psse")


def _triangle(status_middle=1):
    return nm.parse_case(matpower_text(
        [bus_row(1, 3), bus_row(2, 1), bus_row(3, 1)], [gen_row(1)],
        [branch_row(1, 2), branch_row(2, 3, status=status_middle), branch_row(3, 1)]))


def test_triangle_is_one_island():
    assert nm.validate_connectivity(_triangle()) == [{0, 1, 2}]


def test_chain_with_middle_out_splits():
    case = nm.GridCase(100.0, [nm.Bus(0, nm.SLACK), nm.Bus(1, nm.PQ), nm.Bus(2, nm.PQ)],
                       [nm.Branch(0, 1, 0, 0.1, in_service=False), nm.Branch(1, 2, 0, 0.1)],
                       [nm.Generator(0, 0.0)])
    islands = sorted(nm.validate_connectivity(case), key=len)
    assert islands == [{0}, {1, 2}]


def test_ieee118_is_connected(case118):
    islands = nm.validate_connectivity(case118)
    assert len(islands) == 1 and islands[0] == set(range(118))


def test_json_round_trip(case118, three_bus):
    for case in (case118, three_bus):
        again = nm.parse_case(nm.to_json(case), "json")
        assert again == case


def test_normalize_idempotent():
    text = matpower_text([bus_row(30, 1, pd=5.0), bus_row(10, 3), bus_row(20, 2, vm=1.02)],
                         [gen_row(10), gen_row(20, pg=3.0, vg=1.02)],
                         [branch_row(10, 20), branch_row(20, 30), branch_row(30, 10)])
    case = nm.parse_case(text)
    once = nm.normalize(case)
    assert once.bus_ids == (10, 20, 30)
    assert nm.normalize(once) == once
    assert once.buses[0].kind == nm.SLACK and once.buses[2].p_load == pytest.approx(0.05)


def test_zero_rating_means_unrated(two_bus):
    text = matpower_text([bus_row(1, 3), bus_row(2, 1)], [gen_row(1)], [branch_row(1, 2, rate=0)])
    assert math.isinf(nm.parse_case(text).branches[0].rating_normal)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 0.1), st.floats(0.01, 1.0), st.floats(0, 0.5)),
                min_size=1, max_size=5))
def test_json_round_trip_random(params):
    n = len(params) + 1
    buses = [bus_row(1, 3)] + [bus_row(k + 2, 1, pd=10.0 * k) for k in range(n - 1)]
    branches = [branch_row(1, k + 2, r=r, x=x, b=b) for k, (r, x, b) in enumerate(params)]
    case = nm.parse_case(matpower_text(buses, [gen_row(1)], branches))
    assert nm.parse_case(nm.to_json(case), "json") == case
