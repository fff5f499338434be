"""Line stress, the composite security index and the stress state.

With ``PF`` the active flow of a line, ``PF_N`` its normal rating and the
alarm/stress limits ``PF_AL < PF_SL`` given as fractions of ``PF_N``:

    TL = (|PF| - PF_SL) / PF_N      if |PF| > PF_SL else 0
    d  = (|PF| - PF_AL) / PF_N      if |PF| > PF_AL else 0
    g  = (PF_SL - PF_AL) / PF_N
    SI = (sum_i (d_i / g_i) ** (2 n)) ** (1 / (2 n))

A line exactly at its stress limit has ``d / g == 1``, so any line above its
stress limit pushes SI to at least one; SI in (0, 1) means alarm only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

UNSTRESSED, ALARM, STRESSED = "unstressed", "alarm", "stressed"


@dataclass(frozen=True)
class StressLimits:
    alarm_frac: float = 0.90
    stress_frac: float = 1.10
    # per-line (alarm_frac, stress_frac) overrides keyed by branch index
    overrides: Mapping[int, tuple[float, float]] = field(default_factory=dict)
    # branch indices making up the monitored set M; None means every line
    monitored: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0 < self.alarm_frac < self.stress_frac:
            raise ValueError(
                f"need 0 < alarm_frac < stress_frac, got {self.alarm_frac}, {self.stress_frac}")
        for k, (al, sl) in self.overrides.items():
            if not 0 < al < sl:
                raise ValueError(f"line {k}: need 0 < alarm < stress, got {al}, {sl}")

    def fractions(self, n_lines: int) -> tuple[np.ndarray, np.ndarray]:
        al = np.full(n_lines, self.alarm_frac)
        sl = np.full(n_lines, self.stress_frac)
        for k, (a, s) in self.overrides.items():
            al[k], sl[k] = a, s
        return al, sl


PROFILES = {
    "p90-110": StressLimits(0.90, 1.10),
    "p95-97": StressLimits(0.95, 0.97),
}


def line_stress(pf: float, pf_n: float, limits: StressLimits) -> float:
    if not pf_n > 0:
        raise ValueError("rating must be positive")
    sl = limits.stress_frac * pf_n
    return (abs(pf) - sl) / pf_n if abs(pf) > sl else 0.0


def deviation_and_normalizer(pf: float, pf_n: float, limits: StressLimits) -> tuple[float, float]:
    if not pf_n > 0:
        raise ValueError("rating must be positive")
    al = limits.alarm_frac * pf_n
    sl = limits.stress_frac * pf_n
    d = (abs(pf) - al) / pf_n if abs(pf) > al else 0.0
    return d, (sl - al) / pf_n


@dataclass(frozen=True)
class StressReport:
    tl: np.ndarray
    d: np.ndarray
    g: np.ndarray
    si: float
    stressed: bool

    @property
    def state(self) -> str:
        return classify(self.si, self.stressed)


def classify(si: float, stressed: bool | None = None) -> str:
    """Tri-state reading of an index value."""
    if stressed if stressed is not None else si >= 1.0:
        return STRESSED
    return ALARM if si > 0 else UNSTRESSED


def _select(limits: StressLimits, pf, ratings):
    pf = np.abs(np.asarray(pf, dtype=float))
    ratings = np.asarray(ratings, dtype=float)
    if pf.shape != ratings.shape:
        raise ValueError("one rating per line required")
    al, sl = limits.fractions(pf.size)
    if limits.monitored is not None:
        idx = np.asarray(limits.monitored, dtype=int)
        pf, ratings, al, sl = pf[idx], ratings[idx], al[idx], sl[idx]
    if np.any(~(ratings > 0)):
        raise ValueError("ratings must be positive")
    return pf, ratings, al, sl


def stress_report(pf, ratings, limits: StressLimits, n: int = 1) -> StressReport:
    """Evaluate every monitored line for active flows ``pf`` against ``ratings``.

    ``pf`` and ``ratings`` must share units.  Infinite ratings contribute
    nothing.
    """
    if n < 1 or int(n) != n:
        raise ValueError("exponent n must be a positive integer")
    pf, ratings, al, sl = _select(limits, pf, ratings)
    finite = np.isfinite(ratings)
    scale = np.where(finite, ratings, 1.0)
    over_sl = finite & (pf > sl * ratings)
    over_al = finite & (pf > al * ratings)
    tl = np.where(over_sl, (pf - sl * ratings) / scale, 0.0)
    d = np.where(over_al, (pf - al * ratings) / scale, 0.0)
    g = sl - al
    if np.any(g <= 0):
        raise ValueError("alarm and stress limits coincide")
    return StressReport(tl=tl, d=d, g=g, si=_si(d / g, n), stressed=bool(np.any(over_sl)))


def _si(ratio: np.ndarray, n: int) -> float:
    top = float(np.max(ratio)) if ratio.size else 0.0
    if top == 0.0:
        return 0.0
    # scaled p-norm so large exponents cannot overflow
    p = 2 * n
    return top * float(np.sum((ratio / top) ** p)) ** (1.0 / p)


def security_index(flows, ratings, limits: StressLimits, n: int = 1) -> float:
    """SI for the active flows (a BranchFlows or a plain array of PF values)."""
    pf = getattr(flows, "p_from", flows)
    if hasattr(flows, "p_to"):
        # the larger terminal flow is the one the line actually carries
        pf = np.maximum(np.abs(flows.p_from), np.abs(flows.p_to))
    return stress_report(pf, ratings, limits, n).si


def stress_state(flows, ratings, limits: StressLimits) -> bool:
    pf = getattr(flows, "p_from", flows)
    if hasattr(flows, "p_to"):
        pf = np.maximum(np.abs(flows.p_from), np.abs(flows.p_to))
    pf, ratings, _, sl = _select(limits, pf, ratings)
    return bool(np.any(np.isfinite(ratings) & (pf > sl * ratings)))


def line_loading(flows) -> np.ndarray:
    """|PF| per line as used by the index: the larger of the two terminal flows."""
    return np.maximum(np.abs(flows.p_from), np.abs(flows.p_to))


def brute_force_si(pf: Sequence[float], ratings: Sequence[float],
                   limits: StressLimits, n: int = 1) -> float:
    """Plain-Python evaluation one line at a time (reference route)."""
    total = 0.0
    for flow, rating in zip(pf, ratings):
        d, g = deviation_and_normalizer(flow, rating, limits)
        total += (d / g) ** (2 * n)
    return math.pow(total, 1.0 / (2 * n)) if total > 0 else 0.0
