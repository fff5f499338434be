"""Metrics, cross-validation, model comparison and the timing benchmark."""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import stdtr

from . import powerflow as pf
from .scenario import (Contingency, Dataset, OperatingCondition,
                       prepare_contingencies, solve_condition)
from .stress import StressLimits

# ---------------------------------------------------------------------------
# point metrics


def mape_accuracy(y_true, y_pred) -> tuple[float, float]:
    """MAPE over the samples with ``y_true > 0`` and ``1 - MAPE``.

    Unstressed samples have a true index of exactly zero, where the relative
    error is undefined; they are left out here and covered by classification
    accuracy instead.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    keep = y_true > 0
    if not keep.any():
        raise ValueError("no sample with a nonzero target; MAPE undefined")
    mape = float(np.mean(np.abs(y_true[keep] - y_pred[keep]) / y_true[keep]))
    return mape, 1.0 - mape


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    @staticmethod
    def _rate(num, den):
        return num / den if den else None

    @property
    def accuracy(self):
        return self._rate(self.tp + self.tn, self.total)

    @property
    def fn_rate(self):
        return self._rate(self.fn, self.positives)

    @property
    def fp_rate(self):
        return self._rate(self.fp, self.negatives)

    @property
    def tp_rate(self):
        return self._rate(self.tp, self.positives)

    def rates(self) -> dict:
        out = {"accuracy": self.accuracy, "fn_rate": self.fn_rate,
               "fp_rate": self.fp_rate, "tp_rate": self.tp_rate}
        return {k: v for k, v in out.items() if v is not None}

    def to_dict(self) -> dict:
        return {**asdict(self), **self.rates()}

    def table(self, title: str = "") -> str:
        rows = [f"{title:<12}{'Stressed':>10}{'Unstressed':>12}{'Sum':>8}",
                f"{'Stressed':<12}{self.tp:>10}{self.fn:>12}{self.positives:>8}",
                f"{'Unstressed':<12}{self.fp:>10}{self.tn:>12}{self.negatives:>8}",
                f"{'Sum':<12}{self.tp + self.fp:>10}{self.fn + self.tn:>12}{self.total:>8}"]
        return "\n".join(rows)


def confusion(y_true, y_pred) -> ConfusionMatrix:
    """Rows are the actual state, columns the predicted one; stressed is positive."""
    t = np.asarray(y_true, dtype=bool)
    p = np.asarray(y_pred, dtype=bool)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    return ConfusionMatrix(tp=int(np.sum(t & p)), fn=int(np.sum(t & ~p)),
                           fp=int(np.sum(~t & p)), tn=int(np.sum(~t & ~p)))


def margin_issues(cm: ConfusionMatrix, row_sums=None, col_sums=None, total=None,
                  actual=None) -> list[str]:
    """Inconsistencies between a confusion table's cells and its printed margins.

    ``row_sums`` are the printed (stressed, unstressed) row totals, i.e. the
    actual class sizes; ``col_sums`` the predicted class sizes.  ``actual``
    is the class composition of the test set the table claims to describe
    (for tables sharing one test set).  An empty list means consistent.
    """
    issues = []
    if row_sums is not None:
        if row_sums[0] != cm.positives:
            issues.append(f"stressed row: TP+FN = {cm.positives}, printed {row_sums[0]}")
        if row_sums[1] != cm.negatives:
            issues.append(f"unstressed row: FP+TN = {cm.negatives}, printed {row_sums[1]}")
    if col_sums is not None:
        if col_sums[0] != cm.tp + cm.fp:
            issues.append(f"stressed column: TP+FP = {cm.tp + cm.fp}, printed {col_sums[0]}")
        if col_sums[1] != cm.fn + cm.tn:
            issues.append(f"unstressed column: FN+TN = {cm.fn + cm.tn}, printed {col_sums[1]}")
    if total is not None and total != cm.total:
        issues.append(f"total: cells sum to {cm.total}, printed {total}")
    if actual is not None:
        if cm.positives != actual[0]:
            issues.append(f"actual stressed count {cm.positives} differs from the test set's {actual[0]}")
        if cm.negatives != actual[1]:
            issues.append(f"actual unstressed count {cm.negatives} differs from the test set's {actual[1]}")
    return issues


# ---------------------------------------------------------------------------
# cross-validation


def stratified_folds(labels, k: int, seed: int = 0) -> np.ndarray:
    """Fold id per sample; each class is dealt round-robin over the folds."""
    labels = np.asarray(labels)
    n = labels.size
    if k < 2:
        raise ValueError("K must be at least 2")
    if k > n:
        raise ValueError(f"K={k} exceeds the sample count {n}")
    rng = np.random.default_rng([seed, 0xF01D])
    folds = np.empty(n, dtype=np.int64)
    offset = 0
    for value in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == value))
        folds[members] = (np.arange(members.size) + offset) % k
        offset += members.size
    return folds


@dataclass
class FoldReport:
    fold: int
    n_train: int
    n_test: int
    accuracy: float
    mape: float | None = None
    confusion: ConfusionMatrix = field(default_factory=ConfusionMatrix)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.to_dict()
        return d


# recipe(ds, train_idx, test_idx, (mean, scale)) -> (stressed predictions, SI predictions or None)
Recipe = Callable[[Dataset, np.ndarray, np.ndarray, tuple], tuple]


def kfold(ds: Dataset, k: int, seed: int, recipe: Recipe, feasible_only: bool = True):
    """Train and test ``recipe`` once per fold.

    Normalization statistics are recomputed from each fold's training part.
    Returns ``(reports, mean_accuracy, std_accuracy)``.
    """
    idx = ds.indices("all", feasible_only=feasible_only)
    folds = stratified_folds(ds.label_stressed[idx], k, seed)
    reports = []
    for f in range(k):
        test, train = idx[folds == f], idx[folds != f]
        stats = ds.subset_stats(train)
        pred, si_pred = recipe(ds, train, test, stats)
        cm = confusion(ds.label_stressed[test], pred)
        mape = None
        if si_pred is not None and np.any(ds.label_si[test] > 0):
            mape = mape_accuracy(ds.label_si[test], si_pred)[0]
        reports.append(FoldReport(f, int(train.size), int(test.size), cm.accuracy or 0.0,
                                  mape, cm))
    accs = [r.accuracy for r in reports]
    return reports, float(np.mean(accs)), float(np.std(accs, ddof=1)) if k > 1 else 0.0


# ---------------------------------------------------------------------------
# model comparison


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    winner: str  # "a", "b" or "indistinguishable"
    n: int
    mean_diff: float


def paired_t_test(errors_a, errors_b, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on ``errors_a - errors_b``.

    Lower error wins; the winner is named only when ``p < alpha``.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, "indistinguishable", n, 0.0)
        t, p = math.copysign(math.inf, mean), 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        p = float(min(1.0, 2.0 * stdtr(n - 1, -abs(t))))
    if p < alpha:
        winner = "b" if mean > 0 else "a"
    else:
        winner = "indistinguishable"
    return TTestResult(float(t), p, winner, n, mean)


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class TimingReport:
    t_traditional: float
    t_model: float
    speedup: float
    repetitions: int
    n_contingencies: int
    excluded: tuple[int, ...] = ()
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["excluded"] = list(self.excluded)
        return d

    def text(self) -> str:
        return "\n".join([
            f"{'method':<28}{'time (s)':>12}",
            f"{'contingency analysis (NR)':<28}{self.t_traditional:>12.4f}",
            f"{'trained model':<28}{self.t_model:>12.4f}",
            f"speedup: {self.speedup:.1f}x over {self.n_contingencies} contingencies, "
            f"median of {self.repetitions} runs",
        ] + ([f"note: {self.note}"] if self.note else []))


def timing_benchmark(case, oc: OperatingCondition, contingencies: Sequence[Contingency],
                     model, ratings, limits: StressLimits, n: int = 1,
                     repetitions: int = 5, note: str = "") -> TimingReport:
    """Median wall time of the full post-contingency sweep versus model inference.

    The traditional side applies each outage, rebuilds the admittance matrix,
    runs Newton-Raphson and evaluates the index.  The model side receives the
    pre-contingency angles (as measured) and scores every contingency.
    Contingencies that do not solve are dropped from both sides.
    """
    from .models import predict_contingencies

    if repetitions < 5:
        raise ValueError("at least 5 repetitions required")
    if model.norm_mean.size != case.n_bus ** 2:
        raise ValueError("model geometry does not match the case")
    ratings = np.asarray(ratings, dtype=float)
    probe = solve_condition(case, oc, prepare_contingencies(case, contingencies),
                            ratings, limits, n)
    if probe is None:
        raise pf.PowerFlowError("base case did not converge")
    base, _, _, feasible, _ = probe
    kept = [c for c, ok in zip(contingencies, feasible) if ok]
    excluded = tuple(c.id for c, ok in zip(contingencies, feasible) if not ok)
    if not kept:
        raise pf.PowerFlowError("no contingency converged")
    ids = np.array([c.id for c in kept])

    def traditional():
        solve_condition(case, oc, prepare_contingencies(case, kept), ratings, limits, n)

    def inference():
        predict_contingencies(model, base.v_ang, ids)

    t_trad = _median_time(traditional, repetitions)
    t_model = _median_time(inference, repetitions)
    return TimingReport(t_trad, t_model, t_trad / t_model, repetitions, len(kept),
                        excluded, note)


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# reports


def holdout_report(ds: Dataset, stressed_pred=None, si_pred=None) -> dict:
    """Metrics on the dataset's test split for given predictions."""
    test = ds.indices("test")
    if test.size == 0:
        raise ValueError("empty test split")
    out = {"n_test": int(test.size)}
    if stressed_pred is not None:
        cm = confusion(ds.label_stressed[test], stressed_pred)
        out["confusion"] = cm.to_dict()
    if si_pred is not None:
        mape, acc = mape_accuracy(ds.label_si[test], si_pred)
        out.update({"mape": mape, "si_accuracy": acc,
                    "n_nonzero_si": int(np.sum(ds.label_si[test] > 0))})
    return out


def fold_table(reports: Sequence[FoldReport]) -> str:
    """Accuracy per fold plus the mean, one column per fold."""
    head = "".join(f"{'fold ' + str(r.fold + 1):>10}" for r in reports) + f"{'mean':>10}"
    accs = [r.accuracy for r in reports]
    row = "".join(f"{100 * a:>10.2f}" for a in accs) + f"{100 * float(np.mean(accs)):>10.2f}"
    return head + "\n" + row


def to_json(obj) -> str:
    def default(o):
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))
    return json.dumps(obj, indent=2, sort_keys=True, default=default)
