"""Grid case model: parsing, validation and serialization.

Two input layouts are understood:

* a subset of the MATPOWER case layout (``mpc.baseMVA``, ``mpc.bus``,
  ``mpc.gen`` and ``mpc.branch`` matrices; every other assignment is skipped),
* a native JSON schema produced by :func:`to_json`.

All quantities are converted to per-unit on ``base_mva`` at parse time and
bus numbers are renumbered to contiguous 0-based indices.  The original
external numbers are kept in :attr:`GridCase.bus_ids`.
"""
from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

SLACK, PV, PQ = "slack", "PV", "PQ"
_MATPOWER_KIND = {1: PQ, 2: PV, 3: SLACK}
_KIND_MATPOWER = {v: k for k, v in _MATPOWER_KIND.items()}

NATIVE_SCHEMA = "gridstress-case/1"


class CaseError(ValueError):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CaseSemanticError(CaseError):
    def __init__(self, message: str, element: str):
        super().__init__(f"{element}: {message}")
        self.element = element


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_set: float = 1.0
    p_load: float = 0.0
    q_load: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    rating_normal: float = math.inf
    in_service: bool = True

    @property
    def is_transformer(self) -> bool:
        return self.tap != 1.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    v_set: float = 1.0
    q_min: float = -math.inf
    q_max: float = math.inf
    in_service: bool = True


@dataclass(frozen=True)
class GridCase:
    """Immutable network description; loads, dispatch and ratings are per-unit."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    bus_ids: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(b.id for b in self.buses))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == SLACK)

    @cached_property
    def arrays(self) -> "CaseArrays":
        return CaseArrays.from_case(self)

    def with_branches(self, branches: Iterable[Branch]) -> "GridCase":
        return replace(self, branches=tuple(branches))

    def with_generators(self, generators: Iterable[Generator]) -> "GridCase":
        return replace(self, generators=tuple(generators))

    def with_ratings(self, ratings: Sequence[float]) -> "GridCase":
        if len(ratings) != self.n_branch:
            raise ValueError("one rating per branch required")
        return self.with_branches(
            replace(br, rating_normal=float(r)) for br, r in zip(self.branches, ratings))

    def external_id(self, index: int) -> int:
        return self.bus_ids[index]


@dataclass(frozen=True, eq=False)
class CaseArrays:
    """Column arrays of a case, convenient for vectorized math."""

    f: np.ndarray
    t: np.ndarray
    r: np.ndarray
    x: np.ndarray
    b: np.ndarray
    tap: np.ndarray
    rating: np.ndarray
    br_on: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    gen_bus: np.ndarray
    gen_p: np.ndarray
    gen_v: np.ndarray
    gen_qmin: np.ndarray
    gen_qmax: np.ndarray
    gen_on: np.ndarray

    @classmethod
    def from_case(cls, case: GridCase) -> "CaseArrays":
        def col(items, attr, dtype=float):
            return np.array([getattr(it, attr) for it in items], dtype=dtype)

        br, bu, ge = case.branches, case.buses, case.generators
        return cls(
            f=col(br, "from_bus", int), t=col(br, "to_bus", int),
            r=col(br, "r"), x=col(br, "x"), b=col(br, "b"), tap=col(br, "tap"),
            rating=col(br, "rating_normal"), br_on=col(br, "in_service", bool),
            p_load=col(bu, "p_load"), q_load=col(bu, "q_load"),
            gs=col(bu, "shunt_g"), bs=col(bu, "shunt_b"),
            gen_bus=col(ge, "bus", int), gen_p=col(ge, "p_set"), gen_v=col(ge, "v_set"),
            gen_qmin=col(ge, "q_min"), gen_qmax=col(ge, "q_max"),
            gen_on=col(ge, "in_service", bool),
        )


# ---------------------------------------------------------------------------
# validation

def check_case(case: GridCase) -> GridCase:
    """Raise :class:`CaseSemanticError` unless every type invariant holds."""
    n = case.n_bus
    if case.base_mva <= 0:
        raise CaseSemanticError("base_mva must be positive", "case")
    n_slack = 0
    for i, bus in enumerate(case.buses):
        who = f"bus {case.bus_ids[i]}"
        if bus.kind not in (SLACK, PV, PQ):
            raise CaseSemanticError(f"unknown bus kind {bus.kind!r}", who)
        if bus.kind == SLACK:
            n_slack += 1
        if bus.kind != PQ and not bus.v_set > 0:
            raise CaseSemanticError("voltage setpoint must be positive", who)
        for name in ("p_load", "q_load", "shunt_g", "shunt_b", "v_set"):
            if not math.isfinite(getattr(bus, name)):
                raise CaseSemanticError(f"non-finite {name}", who)
    if n_slack != 1:
        raise CaseSemanticError(f"expected exactly one slack bus, found {n_slack}", "case")
    for k, br in enumerate(case.branches):
        who = f"branch {k} ({_ext(case, br.from_bus)}-{_ext(case, br.to_bus)})"
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < n:
                raise CaseSemanticError(f"references missing bus {end}", f"branch {k}")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError("from and to bus coincide", who)
        if br.x == 0:
            raise CaseSemanticError("zero series reactance", who)
        if not br.rating_normal > 0:
            raise CaseSemanticError("rating must be positive", who)
        if not br.tap > 0:
            raise CaseSemanticError("tap ratio must be positive", who)
    for k, gen in enumerate(case.generators):
        who = f"generator {k}"
        if not 0 <= gen.bus < n:
            raise CaseSemanticError(f"references missing bus {gen.bus}", who)
        if gen.q_min > gen.q_max:
            raise CaseSemanticError("q_min exceeds q_max", who)
    islands = validate_connectivity(case)
    if len(islands) != 1:
        raise CaseSemanticError(f"network splits into {len(islands)} islands", "case")
    return case


def _ext(case: GridCase, index: int) -> int:
    return case.bus_ids[index] if 0 <= index < len(case.bus_ids) else index


def validate_connectivity(case: GridCase) -> list[set[int]]:
    """Connected components (as sets of bus indices) over in-service branches."""
    adj: list[list[int]] = [[] for _ in range(case.n_bus)]
    for br in case.branches:
        if br.in_service:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = [False] * case.n_bus
    islands = []
    for start in range(case.n_bus):
        if seen[start]:
            continue
        seen[start] = True
        comp = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    comp.add(v)
                    queue.append(v)
        islands.append(comp)
    return islands


# ---------------------------------------------------------------------------
# MATPOWER subset

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?(?:Inf|inf|NaN|nan)")
_BUS_COLS, _GEN_COLS, _BRANCH_COLS = 13, 10, 11


def _strip_comment(line: str) -> str:
    out, quoted = [], False
    for ch in line:
        if ch == "'":
            quoted = not quoted
        if ch == "%" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _read_matpower(text: str) -> dict[str, object]:
    """Return scalar and matrix assignments keyed by field name."""
    lines = text.splitlines()
    out: dict[str, object] = {}
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        stripped = raw.strip()
        if not stripped or stripped.startswith("function"):
            i += 1
            continue
        m = _ASSIGN.search(raw)
        if not m:
            raise CaseSyntaxError("expected an mpc.<field> assignment",
                                  i + 1, len(raw) - len(raw.lstrip()) + 1)
        name = m.group(1)
        rest_col = m.end()
        rest = raw[rest_col:]
        if rest.lstrip().startswith("["):
            rows, i = _read_matrix(lines, i, rest_col + rest.index("["))
            out[name] = rows
            continue
        if rest.lstrip().startswith("{"):
            # cell arrays (e.g. bus_name) are outside the supported subset: skip
            while "}" not in _strip_comment(lines[i]):
                i += 1
                if i >= len(lines):
                    raise CaseSyntaxError("unterminated cell array", len(lines), 1)
            i += 1
            continue
        value = rest.strip().rstrip(";").strip()
        if value.startswith("'"):
            out[name] = value.strip("'")
        else:
            if not _NUMBER.fullmatch(value):
                raise CaseSyntaxError(f"malformed number {value!r}", i + 1, rest_col + 1)
            out[name] = float(value)
        i += 1
    return out


def _read_matrix(lines: list[str], i: int, col: int):
    rows: list[list[tuple[float, int, int]]] = []
    current: list[tuple[float, int, int]] = []
    pos = col + 1
    while i < len(lines):
        raw = _strip_comment(lines[i])
        j = pos
        while j < len(raw):
            ch = raw[j]
            if ch in " \t,":
                j += 1
            elif ch == ";":
                if current:
                    rows.append(current)
                current = []
                j += 1
            elif ch == "]":
                if current:
                    rows.append(current)
                return rows, i + 1
            else:
                m = _NUMBER.match(raw, j)
                end = m.end() if m else j
                if not m or (end < len(raw) and raw[end] not in " \t,;]"):
                    bad = re.match(r"[^\s,;\]]+", raw[j:]).group(0)
                    raise CaseSyntaxError(f"malformed number {bad!r}", i + 1, j + 1)
                current.append((float(m.group(0)), i + 1, j + 1))
                j = end
        if current:
            rows.append(current)
            current = []
        i += 1
        pos = 0
    raise CaseSyntaxError("unterminated matrix", len(lines), 1)


def _matrix(data: dict, name: str, min_cols: int) -> list[list[tuple[float, int, int]]]:
    if name not in data:
        raise CaseSemanticError(f"missing mpc.{name} matrix", "case")
    rows = data[name]
    for row in rows:
        if len(row) < min_cols:
            _, line, col = row[0]
            raise CaseSyntaxError(
                f"mpc.{name} row has {len(row)} columns, need at least {min_cols}", line, col)
    return rows


def parse_matpower(text: str) -> GridCase:
    data = _read_matpower(text)
    base = float(data.get("baseMVA", 100.0))
    bus_rows = _matrix(data, "bus", _BUS_COLS)
    gen_rows = _matrix(data, "gen", _GEN_COLS)
    branch_rows = _matrix(data, "branch", _BRANCH_COLS)

    index: dict[int, int] = {}
    for row in bus_rows:
        value, line, col = row[0]
        if value != int(value):
            raise CaseSyntaxError(f"bus number {value} is not an integer", line, col)
        if int(value) in index:
            raise CaseSemanticError("duplicate bus id", f"bus {int(value)}")
        index[int(value)] = len(index)

    def bus_index(entry, who):
        value, _, _ = entry
        if value != int(value) or int(value) not in index:
            raise CaseSemanticError(f"references missing bus {value:g}", who)
        return index[int(value)]

    v_set: dict[int, float] = {}
    generators = []
    for k, row in enumerate(gen_rows):
        vals = [v for v, _, _ in row]
        bi = bus_index(row[0], f"generator {k}")
        on = vals[7] > 0
        generators.append(Generator(
            bus=bi, p_set=vals[1] / base, v_set=vals[5],
            q_min=vals[4] / base, q_max=vals[3] / base, in_service=on))
        if on:
            v_set.setdefault(bi, vals[5])

    buses = []
    for row in bus_rows:
        vals = [v for v, _, _ in row]
        code = int(vals[1])
        if code not in _MATPOWER_KIND:
            raise CaseSemanticError(f"unsupported bus type {code}", f"bus {int(vals[0])}")
        i = index[int(vals[0])]
        buses.append(Bus(
            id=i, kind=_MATPOWER_KIND[code], v_set=v_set.get(i, vals[7]),
            p_load=vals[2] / base, q_load=vals[3] / base,
            shunt_g=vals[4] / base, shunt_b=vals[5] / base))

    branches = []
    for k, row in enumerate(branch_rows):
        vals = [v for v, _, _ in row]
        who = f"branch {k}"
        f, t = bus_index(row[0], who), bus_index(row[1], who)
        if len(vals) > 9 and vals[9] != 0:
            raise CaseSemanticError("phase-shifting transformers are not supported", who)
        rate = vals[5]
        branches.append(Branch(
            from_bus=f, to_bus=t, r=vals[2], x=vals[3], b=vals[4],
            tap=vals[8] if vals[8] != 0 else 1.0,
            rating_normal=rate / base if rate > 0 else math.inf,
            in_service=vals[10] > 0))

    ids = tuple(sorted(index, key=index.get))
    return check_case(GridCase(base, buses, branches, generators, bus_ids=ids,
                               name=str(data.get("name", ""))))


# ---------------------------------------------------------------------------
# native JSON

def _jnum(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _num(x, who: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float, str)):
        raise CaseSemanticError(f"expected a number, got {x!r}", who)
    if isinstance(x, str):
        if x not in ("inf", "-inf"):
            raise CaseSemanticError(f"expected a number, got {x!r}", who)
        return float(x)
    return float(x)


def to_json(case: GridCase) -> str:
    doc = {
        "schema": NATIVE_SCHEMA,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [
            {"id": case.bus_ids[i], "kind": b.kind, "v_set": b.v_set,
             "p_load": b.p_load, "q_load": b.q_load,
             "shunt_g": b.shunt_g, "shunt_b": b.shunt_b}
            for i, b in enumerate(case.buses)],
        "branches": [
            {"from": case.bus_ids[br.from_bus], "to": case.bus_ids[br.to_bus],
             "r": br.r, "x": br.x, "b": br.b, "tap": br.tap,
             "rating": _jnum(br.rating_normal), "in_service": br.in_service}
            for br in case.branches],
        "generators": [
            {"bus": case.bus_ids[g.bus], "p_set": g.p_set, "v_set": g.v_set,
             "q_min": _jnum(g.q_min), "q_max": _jnum(g.q_max), "in_service": g.in_service}
            for g in case.generators],
    }
    return json.dumps(doc, indent=1)


def parse_json(text: str) -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict) or doc.get("schema") != NATIVE_SCHEMA:
        raise CaseSemanticError(f"schema must be {NATIVE_SCHEMA!r}", "case")
    index: dict[int, int] = {}
    buses = []
    for k, b in enumerate(doc.get("buses", [])):
        ext = b.get("id")
        if not isinstance(ext, int) or isinstance(ext, bool):
            raise CaseSemanticError("bus id must be an integer", f"bus record {k}")
        if ext in index:
            raise CaseSemanticError("duplicate bus id", f"bus {ext}")
        index[ext] = len(index)
        who = f"bus {ext}"
        buses.append(Bus(
            id=index[ext], kind=b.get("kind", PQ), v_set=_num(b.get("v_set", 1.0), who),
            p_load=_num(b.get("p_load", 0.0), who), q_load=_num(b.get("q_load", 0.0), who),
            shunt_g=_num(b.get("shunt_g", 0.0), who), shunt_b=_num(b.get("shunt_b", 0.0), who)))

    def ref(ext, who):
        if ext not in index:
            raise CaseSemanticError(f"references missing bus {ext}", who)
        return index[ext]

    branches = []
    for k, br in enumerate(doc.get("branches", [])):
        who = f"branch {k}"
        branches.append(Branch(
            from_bus=ref(br.get("from"), who), to_bus=ref(br.get("to"), who),
            r=_num(br.get("r", 0.0), who), x=_num(br.get("x"), who), b=_num(br.get("b", 0.0), who),
            tap=_num(br.get("tap", 1.0), who), rating_normal=_num(br.get("rating", "inf"), who),
            in_service=bool(br.get("in_service", True))))
    generators = []
    for k, g in enumerate(doc.get("generators", [])):
        who = f"generator {k}"
        generators.append(Generator(
            bus=ref(g.get("bus"), who), p_set=_num(g.get("p_set", 0.0), who),
            v_set=_num(g.get("v_set", 1.0), who),
            q_min=_num(g.get("q_min", "-inf"), who), q_max=_num(g.get("q_max", "inf"), who),
            in_service=bool(g.get("in_service", True))))
    ids = tuple(sorted(index, key=index.get))
    return check_case(GridCase(_num(doc.get("base_mva", 100.0), "case"), buses, branches,
                               generators, bus_ids=ids, name=str(doc.get("name", ""))))


def parse_case(text: str, format: str = "matpower") -> GridCase:
    """Parse case-file text in ``"matpower"`` or ``"json"`` format."""
    if format in ("matpower", "matpower-subset", "m"):
        return parse_matpower(text)
    if format in ("json", "native-json"):
        return parse_json(text)
    raise ValueError(f"unknown case format {format!r}")


def load_case(path) -> GridCase:
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_case(text, "json" if path.endswith(".json") else "matpower")


def ieee118() -> GridCase:
    """The bundled IEEE 118-bus case."""
    text = resources.files("gridstress.data").joinpath("case118.m").read_text()
    return replace(parse_matpower(text), name="case118")


def normalize(case: GridCase) -> GridCase:
    """Renumber buses to contiguous indices ordered by external id.

    Already-normalized cases come back unchanged, so the operation is
    idempotent.
    """
    order = sorted(range(case.n_bus), key=lambda i: case.bus_ids[i])
    if order == list(range(case.n_bus)):
        return case
    new = {old: k for k, old in enumerate(order)}
    buses = [replace(case.buses[old], id=new[old]) for old in order]
    branches = [replace(br, from_bus=new[br.from_bus], to_bus=new[br.to_bus])
                for br in case.branches]
    gens = [replace(g, bus=new[g.bus]) for g in case.generators]
    ids = tuple(case.bus_ids[old] for old in order)
    return GridCase(case.base_mva, buses, branches, gens, bus_ids=ids, name=case.name)
