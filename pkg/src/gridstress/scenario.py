"""Operating conditions, N-1 contingencies and the labeled pattern database.

A pattern pairs the *pre*-contingency bus angles of one operating condition
(OC) with one contingency id; its labels are the security index and stress
state of the *post*-contingency power flow.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import powerflow as pf
from .netmodel import SLACK, PV, GridCase, to_json, validate_connectivity
from .stress import StressLimits, line_loading, stress_report

log = logging.getLogger(__name__)

BRANCH_OUTAGE, GENERATOR_OUTAGE = "branch_outage", "generator_outage"

# ---------------------------------------------------------------------------
# operating conditions


@dataclass(frozen=True)
class LoadShape:
    """Daily load curve: two Gaussian bumps mapped onto ``[low, high]``.

    ``peaks`` holds ``(hour, width_hours, relative_height)`` triples.  With
    ``constant`` set every multiplier equals that value.
    """

    low: float = 0.70
    high: float = 1.00
    peaks: tuple[tuple[float, float, float], ...] = ((9.0, 2.5, 0.8), (19.0, 3.0, 1.0))
    day_jitter: float = 0.03
    constant: float | None = None


def build_load_profile(days: int, slots_per_day: int, shape: LoadShape = LoadShape(),
                       seed: int = 0) -> np.ndarray:
    """System load multiplier per slot, ``days * slots_per_day`` values."""
    if slots_per_day < 1 or days < 1:
        raise ValueError("days and slots_per_day must be at least 1")
    if shape.low > shape.high:
        raise ValueError(f"inverted load band [{shape.low}, {shape.high}]")
    n = days * slots_per_day
    if shape.constant is not None:
        return np.full(n, float(shape.constant))
    hours = (np.arange(slots_per_day) + 0.5) * 24.0 / slots_per_day
    curve = np.zeros(slots_per_day)
    for hour, width, height in shape.peaks:
        dist = np.abs(hours - hour)
        dist = np.minimum(dist, 24.0 - dist)
        curve += height * np.exp(-0.5 * (dist / width) ** 2)
    span = curve.max() - curve.min()
    curve = (curve - curve.min()) / span if span > 0 else np.ones_like(curve)
    daily = shape.low + (shape.high - shape.low) * curve
    rng = np.random.default_rng([seed, 0x10AD])
    day_scale = 1.0 + shape.day_jitter * rng.standard_normal(days)
    out = (daily[None, :] * day_scale[:, None]).ravel()
    return np.clip(out, shape.low, shape.high)


@dataclass(frozen=True, eq=False)
class OperatingCondition:
    oc_id: int
    slot: int
    p_load: np.ndarray
    q_load: np.ndarray
    # generator dispatch, per-unit; None keeps the case set points
    p_gen: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.p_load < 0) or np.any(self.q_load < 0):
            raise ValueError(f"OC {self.oc_id}: negative load")


def nominal_condition(case: GridCase, multiplier: float = 1.0, oc_id: int = 0,
                      slot: int = 0) -> OperatingCondition:
    """Case loads and dispatch scaled by a system multiplier.

    Negative nominal loads (none in the bundled case) are clipped to zero.
    """
    a = case.arrays
    return OperatingCondition(
        oc_id=oc_id, slot=slot,
        p_load=np.maximum(a.p_load * multiplier, 0.0),
        q_load=np.maximum(a.q_load * multiplier, 0.0),
        p_gen=a.gen_p * multiplier)


def perturb_loads(oc: OperatingCondition, sigma_frac: float, seed: int,
                  nominal: OperatingCondition | None = None) -> OperatingCondition:
    """Add zero-mean Gaussian noise to every bus load.

    The standard deviation is ``sigma_frac`` times the bus's load in ``oc``
    (or in ``nominal`` when given); P and Q share the draw so the power factor
    holds.  Values are truncated at zero.  The stream is keyed by
    ``(seed, oc.oc_id)`` and consumed in bus order, so the result for a bus is
    fixed by ``(seed, oc_id, bus index)`` regardless of evaluation order.
    """
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be non-negative")
    if sigma_frac == 0:
        return oc
    ref = oc if nominal is None else nominal
    z = np.random.default_rng([seed, 0x5EED, oc.oc_id]).standard_normal(oc.p_load.size)
    noise = sigma_frac * z
    p = np.maximum(oc.p_load + noise * ref.p_load, 0.0)
    q = np.maximum(oc.q_load + noise * ref.q_load, 0.0)
    return replace(oc, p_load=p, q_load=q)


def make_conditions(case: GridCase, multipliers: np.ndarray, sigma_frac: float, seed: int,
                    slots: Sequence[int] | None = None) -> list[OperatingCondition]:
    """One perturbed OC per selected slot of a load profile."""
    slots = range(len(multipliers)) if slots is None else slots
    out = []
    for k, slot in enumerate(slots):
        oc = nominal_condition(case, float(multipliers[slot]), oc_id=k, slot=int(slot))
        out.append(perturb_loads(oc, sigma_frac, seed))
    return out


def sample_slots(n_total: int, n_ocs: int | None, seed: int) -> np.ndarray:
    if n_ocs is None or n_ocs >= n_total:
        return np.arange(n_total)
    rng = np.random.default_rng([seed, 0x5107])
    return np.sort(rng.choice(n_total, size=n_ocs, replace=False))


# ---------------------------------------------------------------------------
# contingencies


@dataclass(frozen=True)
class Contingency:
    id: int
    kind: str
    element: int

    @property
    def label(self) -> str:
        return f"{'br' if self.kind == BRANCH_OUTAGE else 'gen'}{self.element}"


def enumerate_contingencies(case: GridCase, screening: Sequence[int] | None = None
                            ) -> list[Contingency]:
    """All single-element outages: in-service branches first, then generators.

    ``screening`` optionally keeps only the listed positions of the full list
    (ids are reassigned contiguously).
    """
    items = [(BRANCH_OUTAGE, k) for k, br in enumerate(case.branches) if br.in_service]
    items += [(GENERATOR_OUTAGE, k) for k, g in enumerate(case.generators) if g.in_service]
    if screening is not None:
        items = [items[k] for k in screening]
    return [Contingency(i, kind, el) for i, (kind, el) in enumerate(items)]


def apply_contingency(case: GridCase, c: Contingency) -> GridCase:
    """Outaged copy of ``case``; the original is untouched.

    A generator outage drops the unit's dispatch and the slack absorbs the
    deficit.  If the outage removes the last unit at the slack bus, the bus of
    the largest remaining unit becomes the new slack.
    """
    if c.kind == BRANCH_OUTAGE:
        br = case.branches[c.element]
        if not br.in_service:
            raise ValueError(f"branch {c.element} is already out of service")
        branches = list(case.branches)
        branches[c.element] = replace(br, in_service=False)
        return case.with_branches(branches)
    if c.kind != GENERATOR_OUTAGE:
        raise ValueError(f"unknown contingency kind {c.kind!r}")
    gen = case.generators[c.element]
    if not gen.in_service:
        raise ValueError(f"generator {c.element} is already out of service")
    gens = list(case.generators)
    gens[c.element] = replace(gen, in_service=False)
    out = case.with_generators(gens)
    slack = case.slack
    if gen.bus == slack and not any(g.in_service and g.bus == slack for g in gens):
        running = [g for g in gens if g.in_service]
        if running:
            new = max(running, key=lambda g: (g.p_set, -g.bus)).bus
            buses = list(out.buses)
            buses[slack] = replace(buses[slack], kind=PV)
            buses[new] = replace(buses[new], kind=SLACK)
            out = replace(out, buses=tuple(buses))
    return out


def is_islanding(case: GridCase) -> bool:
    return len(validate_connectivity(case)) > 1


# ---------------------------------------------------------------------------
# ratings


def derive_ratings(case: GridCase, state: pf.SolvedState, margin: float = 1.5,
                   floor: float = 0.3) -> np.ndarray:
    """Normal ratings from a reference solution: ``max(floor, margin * |PF|)``.

    Used when the case carries no usable ratings (the bundled 118-bus data
    only has 9900 MVA placeholders).
    """
    load = line_loading(pf.branch_flows(case, state))
    return np.maximum(floor, margin * load)


# ---------------------------------------------------------------------------
# patterns and datasets

TRAIN, TEST, UNASSIGNED = 1, 0, 255


@dataclass(frozen=True, eq=False)
class Pattern:
    oc_id: int
    contingency_id: int
    angle_diff: np.ndarray
    label_si: float
    label_stressed: bool
    feasible: bool


def angle_difference_matrix(angles: np.ndarray) -> np.ndarray:
    """``out[..., r, s] = angles[..., r] - angles[..., s]``."""
    a = np.asarray(angles, dtype=np.float64)
    return a[..., :, None] - a[..., None, :]


@dataclass(eq=False)
class Dataset:
    """Pattern database plus everything needed to reproduce and consume it.

    Bulk angle data is held once per OC (``angles[oc_index]``); each pattern
    row references its OC, so the N x N image of a pattern is rebuilt on
    demand by :meth:`pattern` or :meth:`images`.
    """

    case_fingerprint: str
    bus_ids: tuple[int, ...]
    contingencies: list[Contingency]
    oc_ids: np.ndarray          # [n_oc] int
    slots: np.ndarray           # [n_oc] int
    angles: np.ndarray          # [n_oc, N] float32, radians
    oc_index: np.ndarray        # [P] int, row into angles
    contingency_id: np.ndarray  # [P] int
    label_si: np.ndarray        # [P] float64, NaN when infeasible
    label_stressed: np.ndarray  # [P] bool
    feasible: np.ndarray        # [P] bool
    seed: int = 0
    config: dict = field(default_factory=dict)
    excluded_ocs: list = field(default_factory=list)
    split: np.ndarray | None = None         # [P] uint8: TRAIN/TEST/UNASSIGNED
    norm_mean: np.ndarray | None = None     # [N*N]
    norm_scale: np.ndarray | None = None    # [N*N]
    debug_flows: np.ndarray | None = None   # [P, n_branch] |PF| after the outage
    ratings: np.ndarray | None = None

    @property
    def n_bus(self) -> int:
        return self.angles.shape[1]

    @property
    def n_contingencies(self) -> int:
        return len(self.contingencies)

    def __len__(self) -> int:
        return self.oc_index.size

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.case_fingerprint.encode())
        h.update(json.dumps(self.config, sort_keys=True).encode())
        h.update(str(self.seed).encode())
        return h.hexdigest()[:16]

    def pattern(self, k: int) -> Pattern:
        oc = int(self.oc_index[k])
        return Pattern(
            oc_id=int(self.oc_ids[oc]), contingency_id=int(self.contingency_id[k]),
            angle_diff=angle_difference_matrix(self.angles[oc]),
            label_si=float(self.label_si[k]), label_stressed=bool(self.label_stressed[k]),
            feasible=bool(self.feasible[k]))

    def images(self, oc_rows: np.ndarray, normalized: bool = True) -> np.ndarray:
        """Angle-difference images ``[len(oc_rows), N, N]`` for OC rows."""
        img = angle_difference_matrix(self.angles[np.asarray(oc_rows)])
        if normalized:
            if self.norm_mean is None:
                raise ValueError("dataset has no normalization statistics")
            n = self.n_bus
            img = (img - self.norm_mean.reshape(n, n)) / self.norm_scale.reshape(n, n)
        return img

    def indices(self, which: str = "all", feasible_only: bool = True) -> np.ndarray:
        mask = self.feasible.copy() if feasible_only else np.ones(len(self), bool)
        if which != "all":
            if self.split is None:
                raise ValueError("dataset has not been split")
            mask &= self.split == (TRAIN if which == "train" else TEST)
        return np.flatnonzero(mask)

    def subset_stats(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return normalization_stats(self, idx)

    def with_split(self, split: np.ndarray) -> "Dataset":
        mean, scale = normalization_stats(self, np.flatnonzero(split == TRAIN))
        return replace(self, split=np.asarray(split, dtype=np.uint8),
                       norm_mean=mean, norm_scale=scale)


def normalization_stats(ds: Dataset, idx: np.ndarray, floor: float = 1e-6):
    """Per-feature mean and standard deviation of the images of ``idx``.

    Patterns of one OC share an image, so the moments are OC-weighted sums.
    Features with (near) zero spread, such as the diagonal, get scale 1.
    """
    counts = np.bincount(ds.oc_index[idx], minlength=ds.angles.shape[0]).astype(float)
    total = counts.sum()
    if total == 0:
        raise ValueError("no patterns to compute statistics from")
    w = counts / total
    img = angle_difference_matrix(ds.angles).reshape(ds.angles.shape[0], -1)
    mean = w @ img
    var = w @ (img - mean) ** 2
    std = np.sqrt(var)
    return mean, np.where(std > floor, std, 1.0)


@dataclass(frozen=True)
class ContingencyCase:
    contingency: Contingency
    case: GridCase
    ybus: object
    islanded: bool


def prepare_contingencies(case: GridCase, contingencies: Sequence[Contingency]
                          ) -> list[ContingencyCase]:
    out = []
    for c in contingencies:
        cc = apply_contingency(case, c)
        island = is_islanding(cc)
        out.append(ContingencyCase(c, cc, None if island else pf.build_ybus(cc), island))
    return out


def _post_dispatch(cc: GridCase, oc: OperatingCondition, c: Contingency):
    if oc.p_gen is None or c.kind != GENERATOR_OUTAGE:
        return oc.p_gen
    p = oc.p_gen.copy()
    p[c.element] = 0.0
    return p


def solve_condition(case: GridCase, oc: OperatingCondition, prepared: Sequence[ContingencyCase],
                    ratings: np.ndarray, limits: StressLimits, n: int, *,
                    tol: float = pf.DEFAULT_TOL, max_iter: int = pf.DEFAULT_MAX_ITER,
                    base_ybus=None, keep_flows: bool = False):
    """Pre-contingency state and per-contingency labels for one OC.

    Returns ``(base_state, si, stressed, feasible, flows)``, or ``None`` when
    the base case does not converge.
    """
    base = pf.solve_nr(case, oc.p_load, oc.q_load, p_gen=oc.p_gen, tol=tol,
                       max_iter=max_iter, ybus=base_ybus)
    if not base.converged:
        return None
    nc = len(prepared)
    si = np.full(nc, np.nan)
    stressed = np.zeros(nc, bool)
    feasible = np.zeros(nc, bool)
    flows = np.full((nc, case.n_branch), np.nan) if keep_flows else None
    for k, pc in enumerate(prepared):
        if pc.islanded:
            continue
        try:
            post = pf.solve_nr(pc.case, oc.p_load, oc.q_load,
                               p_gen=_post_dispatch(pc.case, oc, pc.contingency),
                               tol=tol, max_iter=max_iter, warm_start=base, ybus=pc.ybus)
        except pf.SingularJacobian:
            continue
        if not post.converged:
            continue
        load = line_loading(pf.branch_flows(pc.case, post))
        rep = stress_report(load, ratings, limits, n)
        si[k], stressed[k], feasible[k] = rep.si, rep.stressed, True
        if keep_flows:
            flows[k] = load
    return base, si, stressed, feasible, flows


def case_fingerprint(case: GridCase) -> str:
    return hashlib.sha256(to_json(case).encode()).hexdigest()[:16]


def generate_patterns(case: GridCase, ocs: Sequence[OperatingCondition],
                      contingencies: Sequence[Contingency], limits: StressLimits,
                      n: int = 1, *, seed: int = 0, config: dict | None = None,
                      ratings: np.ndarray | None = None, keep_flows: bool = False,
                      workers: int = 1, progress=None) -> Dataset:
    """Solve every OC and contingency and label the resulting patterns.

    Pattern rows are ordered by (OC, contingency).  Pairs that island the
    network or fail to converge are kept with ``feasible=False``.  OCs whose
    base case does not converge are left out and listed in ``excluded_ocs``.
    The output does not depend on ``workers``.
    """
    ratings = np.asarray(case.arrays.rating if ratings is None else ratings, dtype=float)
    prepared = prepare_contingencies(case, contingencies)
    base_ybus = pf.build_ybus(case)
    args = (case, prepared, ratings, limits, n, base_ybus, keep_flows)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_solve_one, [(args, oc) for oc in ocs], chunksize=4))
    else:
        results = []
        for k, oc in enumerate(ocs):
            results.append(_solve_one((args, oc)))
            if progress is not None:
                progress(k + 1, len(ocs))

    kept, angles, excluded = [], [], []
    si, stressed, feasible, flows = [], [], [], []
    for oc, res in zip(ocs, results):
        if res is None:
            log.warning("OC %d excluded: base case did not converge", oc.oc_id)
            excluded.append({"oc_id": oc.oc_id, "reason": "base case did not converge"})
            continue
        base, s, st, fe, fl = res
        kept.append(oc)
        angles.append(base.v_ang)
        si.append(s)
        stressed.append(st)
        feasible.append(fe)
        if keep_flows:
            flows.append(fl)
    nc = len(contingencies)
    n_oc = len(kept)
    return Dataset(
        case_fingerprint=case_fingerprint(case),
        bus_ids=tuple(case.bus_ids),
        contingencies=list(contingencies),
        oc_ids=np.array([oc.oc_id for oc in kept], dtype=np.int64),
        slots=np.array([oc.slot for oc in kept], dtype=np.int64),
        angles=np.array(angles, dtype=np.float32).reshape(n_oc, case.n_bus),
        oc_index=np.repeat(np.arange(n_oc), nc),
        contingency_id=np.tile(np.array([c.id for c in contingencies], dtype=np.int64), n_oc),
        label_si=np.concatenate(si) if si else np.zeros(0),
        label_stressed=np.concatenate(stressed) if stressed else np.zeros(0, bool),
        feasible=np.concatenate(feasible) if feasible else np.zeros(0, bool),
        seed=seed, config=dict(config or {}), excluded_ocs=excluded,
        debug_flows=np.concatenate(flows) if keep_flows and flows else None,
        ratings=ratings,
    )


def _solve_one(item):
    (case, prepared, ratings, limits, n, base_ybus, keep_flows), oc = item
    return solve_condition(case, oc, prepared, ratings, limits, n,
                           base_ybus=base_ybus, keep_flows=keep_flows)


def split_dataset(ds: Dataset, train_frac: float = 0.7, seed: int = 0,
                  feasible_only: bool = True) -> np.ndarray:
    """Random train/test assignment per pattern, stratified by stress label.

    Infeasible patterns are marked ``UNASSIGNED`` when ``feasible_only``.
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    idx = ds.indices("all", feasible_only=feasible_only)
    n_train = int(round(train_frac * idx.size))
    if n_train == 0 or n_train == idx.size:
        raise ValueError(f"a {train_frac:.2f} split of {idx.size} patterns leaves a split empty")
    rng = np.random.default_rng([seed, 0x5B17])
    split = np.full(len(ds), UNASSIGNED, dtype=np.uint8)
    labels = ds.label_stressed[idx]
    chosen = []
    remaining = n_train
    groups = [idx[labels], idx[~labels]]
    for g_i, group in enumerate(groups):
        if g_i == len(groups) - 1:
            take = remaining
        else:
            take = int(round(train_frac * group.size))
            # keep both sides populated for the minority class
            if group.size >= 2:
                take = min(max(take, 1), group.size - 1)
        take = min(take, group.size)
        perm = rng.permutation(group)
        chosen.append(perm[:take])
        remaining -= take
    train = np.concatenate(chosen)
    split[idx] = TEST
    split[train] = TRAIN
    return split


# ---------------------------------------------------------------------------
# binary container
#
# offset  size  field
# 0       4     magic b"GSDS"
# 4       2     version (uint16 LE), currently 1
# 6       2     reserved, zero
# 8       8     header length H (uint64 LE)
# 16      H     header: UTF-8 JSON, keys sorted, no whitespace
# ...           zero padding to a multiple of 8
# then the sections listed in header["sections"] in order, each padded to a
# multiple of 8 bytes.  All numbers little-endian.  Pattern records use the
# fixed 24-byte layout of RECORD_DTYPE.

MAGIC = b"GSDS"
VERSION = 1
RECORD_DTYPE = np.dtype({
    "names": ["oc_index", "contingency_id", "label_si", "flags"],
    "formats": ["<u4", "<u4", "<f8", "u1"],
    "offsets": [0, 4, 8, 16],
    "itemsize": 24,
})
FLAG_STRESSED, FLAG_FEASIBLE = 1, 2


def _pad(n: int) -> int:
    return (-n) % 8


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_bytes(ds: Dataset) -> bytes:
    n_oc, n = ds.angles.shape
    records = np.zeros(len(ds), dtype=RECORD_DTYPE)
    records["oc_index"] = ds.oc_index
    records["contingency_id"] = ds.contingency_id
    records["label_si"] = ds.label_si
    records["flags"] = (ds.label_stressed * FLAG_STRESSED + ds.feasible * FLAG_FEASIBLE)
    sections = [
        ("oc_ids", np.ascontiguousarray(ds.oc_ids, dtype="<i8")),
        ("slots", np.ascontiguousarray(ds.slots, dtype="<i8")),
        # feature-major: all OCs of bus 0, then bus 1, ...
        ("angles", np.ascontiguousarray(ds.angles.T, dtype="<f4")),
        ("records", records),
    ]
    if ds.split is not None:
        sections.append(("split", np.ascontiguousarray(ds.split, dtype="u1")))
    if ds.norm_mean is not None:
        sections.append(("norm_mean", np.ascontiguousarray(ds.norm_mean, dtype="<f8")))
        sections.append(("norm_scale", np.ascontiguousarray(ds.norm_scale, dtype="<f8")))
    if ds.ratings is not None:
        sections.append(("ratings", np.ascontiguousarray(ds.ratings, dtype="<f8")))
    header = {
        "n_bus": n, "n_oc": n_oc, "n_patterns": len(ds),
        "n_contingencies": ds.n_contingencies,
        "contingencies": [[c.id, c.kind, c.element] for c in ds.contingencies],
        "bus_ids": list(ds.bus_ids), "seed": ds.seed, "config": ds.config,
        "case_fingerprint": ds.case_fingerprint, "fingerprint": ds.fingerprint,
        "excluded_ocs": ds.excluded_ocs,
        "sections": [[name, arr.nbytes] for name, arr in sections],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<HHQ", VERSION, 0, len(head)))
    out.write(head + b"\0" * _pad(len(head)))
    for _, arr in sections:
        raw = arr.tobytes()
        out.write(raw + b"\0" * _pad(len(raw)))
    return out.getvalue()


class DatasetFormatError(ValueError):
    pass


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    version, _, hlen = struct.unpack_from("<HHQ", blob, 4)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    header = json.loads(blob[16:16 + hlen])
    pos = 16 + hlen + _pad(hlen)
    raw = {}
    for name, size in header["sections"]:
        raw[name] = blob[pos:pos + size]
        pos += size + _pad(size)
    n, n_oc = header["n_bus"], header["n_oc"]
    rec = np.frombuffer(raw["records"], dtype=RECORD_DTYPE)
    ds = Dataset(
        case_fingerprint=header["case_fingerprint"],
        bus_ids=tuple(header["bus_ids"]),
        contingencies=[Contingency(i, k, e) for i, k, e in header["contingencies"]],
        oc_ids=np.frombuffer(raw["oc_ids"], "<i8").astype(np.int64),
        slots=np.frombuffer(raw["slots"], "<i8").astype(np.int64),
        angles=np.frombuffer(raw["angles"], "<f4").reshape(n, n_oc).T.copy(),
        oc_index=rec["oc_index"].astype(np.int64),
        contingency_id=rec["contingency_id"].astype(np.int64),
        label_si=rec["label_si"].astype(np.float64),
        label_stressed=(rec["flags"] & FLAG_STRESSED) > 0,
        feasible=(rec["flags"] & FLAG_FEASIBLE) > 0,
        seed=header["seed"], config=header["config"], excluded_ocs=header["excluded_ocs"],
    )
    if "split" in raw:
        ds.split = np.frombuffer(raw["split"], "u1").copy()
    if "norm_mean" in raw:
        ds.norm_mean = np.frombuffer(raw["norm_mean"], "<f8").copy()
        ds.norm_scale = np.frombuffer(raw["norm_scale"], "<f8").copy()
    if "ratings" in raw:
        ds.ratings = np.frombuffer(raw["ratings"], "<f8").copy()
    if ds.fingerprint != header["fingerprint"]:
        raise DatasetFormatError(f"{path}: fingerprint mismatch")
    return ds


def export_csv(ds: Dataset, fh) -> None:
    """One row per pattern: ids, labels and split (angles are not expanded)."""
    w = csv.writer(fh)
    w.writerow(["oc_id", "slot", "contingency_id", "contingency", "feasible",
                "label_si", "label_stressed", "split"])
    names = {c.id: c.label for c in ds.contingencies}
    split_name = {TRAIN: "train", TEST: "test", UNASSIGNED: ""}
    for k in range(len(ds)):
        oc = ds.oc_index[k]
        si = ds.label_si[k]
        w.writerow([
            int(ds.oc_ids[oc]), int(ds.slots[oc]), int(ds.contingency_id[k]),
            names[int(ds.contingency_id[k])], int(ds.feasible[k]),
            "" if math.isnan(si) else repr(float(si)), int(ds.label_stressed[k]),
            "" if ds.split is None else split_name[int(ds.split[k])],
        ])
