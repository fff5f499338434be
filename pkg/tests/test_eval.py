import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gridstress import eval as ev
from gridstress import models as M
from gridstress import scenario as sc
from synth import synthetic_dataset


def test_mape_examples():
    assert ev.mape_accuracy([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)
    assert ev.mape_accuracy([2.0], [1.0]) == (0.5, 0.5)


def test_mape_skips_zero_targets():
    assert ev.mape_accuracy([0.0, 2.0], [5.0, 1.0]) == (0.5, 0.5)
    with pytest.raises(ValueError):
        ev.mape_accuracy([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        ev.mape_accuracy([1.0], [1.0, 2.0])


def test_mape_inclusion_depends_only_on_truth(rng):
    # two models scored on the same truth see the same included samples
    y = np.where(rng.random(50) < 0.4, 0.0, rng.uniform(0.1, 3, 50))
    a, b = rng.uniform(0, 3, 50), rng.uniform(0, 3, 50)
    keep = y > 0
    assert ev.mape_accuracy(y, a)[0] == pytest.approx(np.mean(np.abs(y - a)[keep] / y[keep]))
    assert ev.mape_accuracy(y, b)[0] == pytest.approx(np.mean(np.abs(y - b)[keep] / y[keep]))


def test_confusion_perfect_classifier():
    cm = ev.ConfusionMatrix(tp=234, fn=0, fp=0, tn=1687)
    assert cm.accuracy == 1.0 and cm.fn_rate == 0.0
    assert ev.margin_issues(cm, (234, 1687), (234, 1687), 1921) == []


def test_confusion_missed_stress():
    cm = ev.ConfusionMatrix(tp=128, fn=113, fp=106, tn=1574)
    assert cm.fn_rate == pytest.approx(113 / 241, abs=1e-12)
    assert round(cm.fn_rate, 2) == 0.47
    assert cm.accuracy == pytest.approx(1702 / 1921, abs=1e-12)
    assert cm.total == 1921


def test_table_vi_flagged():
    # stressed row sums to 334; the shared test set has 234 stressed samples
    cm = ev.ConfusionMatrix(tp=134, fn=200, fp=100, tn=1487)
    issues = ev.margin_issues(cm, actual=(234, 1687))
    assert issues and any("334" in s for s in issues)
    assert cm.tp_rate == pytest.approx(134 / 334)  # the printed "40%"


def test_margin_checker_row_and_column_sums():
    cm = ev.ConfusionMatrix(1, 2, 3, 4)
    assert ev.margin_issues(cm, (3, 7), (4, 6), 10) == []
    assert len(ev.margin_issues(cm, (4, 7), (4, 5), 11)) == 3


def test_confusion_from_labels():
    cm = ev.confusion([1, 1, 0, 0, 1], [1, 0, 1, 0, 1])
    assert (cm.tp, cm.fn, cm.fp, cm.tn) == (2, 1, 1, 1)
    with pytest.raises(ValueError):
        ev.confusion([1], [1, 0])
    with pytest.raises(ValueError):
        ev.ConfusionMatrix(-1, 0, 0, 0)


def test_undefined_rates_are_none():
    cm = ev.ConfusionMatrix(0, 0, 0, 5)
    assert cm.fn_rate is None and cm.accuracy == 1.0
    assert ev.ConfusionMatrix().accuracy is None


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    if k > n:
        with pytest.raises(ValueError):
            ev.stratified_folds(np.zeros(n), k, seed)
        return
    labels = np.random.default_rng(seed).random(n) < 0.3
    folds = ev.stratified_folds(labels, k, seed)
    assert folds.min() >= 0 and folds.max() < k
    counts = np.bincount(folds, minlength=k)
    assert counts.max() - counts.min() <= 1
    for value in (True, False):
        c = np.bincount(folds[labels == value], minlength=k)
        assert c.max() - c.min() <= 1


def test_leave_one_out():
    folds = ev.stratified_folds(np.arange(7) % 2, 7, 0)
    assert sorted(folds) == list(range(7))
    with pytest.raises(ValueError):
        ev.stratified_folds(np.zeros(5), 1)


def test_kfold_harness():
    ds = synthetic_dataset(n_oc=20)
    seen = []

    def recipe(d, train, test, stats):
        assert not set(train) & set(test)
        seen.append(test)
        return d.label_stressed[test], np.where(d.label_si[test] > 0, d.label_si[test], 0.0)

    reports, mean, std = ev.kfold(ds, 4, 0, recipe)
    union = np.sort(np.concatenate(seen))
    assert np.array_equal(union, ds.indices("all"))
    assert mean == 1.0 and std == 0.0
    assert all(r.mape == 0.0 for r in reports if r.mape is not None)
    table = ev.fold_table(reports)
    assert "fold 4" in table and "100.00" in table


def test_fold_table_format():
    accs = [0.9880, 0.9892, 0.9876, 0.9864, 0.9886]
    reports = [ev.FoldReport(i, 1, 1, a) for i, a in enumerate(accs)]
    row = ev.fold_table(reports).splitlines()[1].split()
    assert row == ["98.80", "98.92", "98.76", "98.64", "98.86", "98.80"]
    with pytest.raises(ValueError):
        ev.FoldReport(0, 1, 1, 1.5)


def test_t_test_matches_scipy(rng):
    for _ in range(30):
        n = int(rng.integers(3, 40))
        a, b = rng.normal(0, 1, n), rng.normal(0.3, 1, n)
        ours = ev.paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert ours.t == pytest.approx(ref.statistic, rel=1e-10)
        assert ours.p == pytest.approx(ref.pvalue, abs=1e-8)


def test_t_test_swap_symmetry(rng):
    a, b = rng.random(20), rng.random(20) + 0.2
    ab, ba = ev.paired_t_test(a, b), ev.paired_t_test(b, a)
    assert ab.t == -ba.t and ab.p == ba.p
    assert ab.winner == "a" and ba.winner == "b"


def test_t_test_identical_and_errors():
    r = ev.paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3])
    assert (r.t, r.p, r.winner) == (0.0, 1.0, "indistinguishable")
    assert ev.paired_t_test([1.0, 1.0], [0.0, 0.0]).winner == "b"
    with pytest.raises(ValueError):
        ev.paired_t_test([1.0], [1.0])
    with pytest.raises(ValueError):
        ev.paired_t_test([1.0, 2.0], [1.0])


def test_holdout_report_requires_test_split():
    ds = synthetic_dataset()
    test = ds.indices("test")
    rep = ev.holdout_report(ds, ds.label_stressed[test], ds.label_si[test])
    assert rep["confusion"]["tp"] + rep["confusion"]["fn"] == int(ds.label_stressed[test].sum())
    assert rep["si_accuracy"] == 1.0
    empty = ds.with_split(np.zeros(len(ds), np.uint8) + sc.TRAIN)
    with pytest.raises(ValueError):
        ev.holdout_report(empty)


def test_to_json_handles_reports():
    text = ev.to_json({"cm": ev.ConfusionMatrix(1, 2, 3, 4), "x": np.float64(0.5)})
    assert '"tp": 1' in text and "0.5" in text


def test_timing_benchmark_small(three_bus):
    from gridstress import stress
    conts = sc.enumerate_contingencies(three_bus)
    oc = sc.nominal_condition(three_bus)
    ratings = np.full(three_bus.n_branch, 1.0)
    limits = stress.StressLimits(0.9, 1.1)
    ds = synthetic_dataset(n_bus=three_bus.n_bus, n_c=len(conts))
    spec = M.NetworkSpec((3,), ({"type": "dense", "width": 4}, {"type": "dense", "width": 1}),
                         M.CLASSIFICATION, len(conts), "onehot", M.PAIRS, (0, 1, 2))
    model = M.train(spec, ds, M.TrainConfig(epochs=1))
    rep = ev.timing_benchmark(three_bus, oc, conts[:1], model, ratings, limits, repetitions=5)
    assert rep.t_traditional > 0 and rep.t_model > 0 and np.isfinite(rep.speedup)
    assert "speedup" in rep.text()
    with pytest.raises(ValueError):
        ev.timing_benchmark(three_bus, oc, conts, model, ratings, limits, repetitions=4)
