import numpy as np
import pytest

from gridstress import netmodel as nm


def matpower_text(buses, gens, branches, base=100.0):
    """Assemble MATPOWER-layout text from row lists (bus 13, gen 10, branch 13 cols)."""
    def block(name, rows):
        body = "\n".join("\t" + "\t".join(repr(float(v)) if isinstance(v, float) else str(v)
                                          for v in row) + ";" for row in rows)
        return f"mpc.{name} = [\n{body}\n];\n"
    return (f"function mpc = small\nmpc.version = '2';\nmpc.baseMVA = {base};\n"
            + block("bus", buses) + block("gen", gens) + block("branch", branches))


def bus_row(i, kind, pd=0.0, qd=0.0, vm=1.0, gs=0.0, bs=0.0):
    return [i, kind, pd, qd, gs, bs, 1, vm, 0, 345, 1, 1.1, 0.9]


def gen_row(bus, pg=0.0, vg=1.0, qmax=999.0, qmin=-999.0, status=1):
    return [bus, pg, 0, qmax, qmin, vg, 100, status, 999, 0]


def branch_row(f, t, r=0.0, x=0.1, b=0.0, rate=0, tap=0, status=1):
    return [f, t, r, x, b, rate, rate, rate, tap, 0, status, -360, 360]


@pytest.fixture(scope="session")
def case118():
    return nm.ieee118()


@pytest.fixture
def two_bus():
    text = matpower_text([bus_row(1, 3), bus_row(2, 1, pd=10.0)], [gen_row(1)],
                         [branch_row(1, 2, x=0.1, rate=50)])
    return nm.parse_case(text)


@pytest.fixture
def three_bus():
    """Triangle: slack at 1, PV at 2, load at 3; every line rated 100 MW."""
    text = matpower_text(
        [bus_row(1, 3), bus_row(2, 2, pd=20.0, vm=1.01), bus_row(3, 1, pd=90.0, qd=30.0)],
        [gen_row(1, pg=0.0), gen_row(2, pg=60.0, vg=1.01)],
        [branch_row(1, 2, r=0.01, x=0.1, b=0.02, rate=100),
         branch_row(2, 3, r=0.02, x=0.15, b=0.02, rate=100),
         branch_row(1, 3, r=0.01, x=0.12, b=0.02, rate=100)])
    return nm.parse_case(text)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
