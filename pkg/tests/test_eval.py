import csv
import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modimpute.data import Cohort, DataError, SubjectRecord
from modimpute.evaluate import (
    ClassifierHyper,
    GeneratedSet,
    InfiniteEffectError,
    classifier_dims,
    cohens_d,
    downstream_classify,
    effect_size_table,
    emit_reports,
    read_effect_sizes,
    weighted_precision_recall,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
samples = st.lists(finite, min_size=2, max_size=30)


def stats_d(a, b):
    na, nb = len(a), len(b)
    pooled = ((na - 1) * statistics.variance(a) + (nb - 1) * statistics.variance(b)) / (na + nb - 2)
    return (statistics.fmean(a) - statistics.fmean(b)) / math.sqrt(pooled)


# --- Cohen's d ----------------------------------------------------------------

def test_cohens_d_examples():
    assert cohens_d([1, 2, 3], [2, 3, 4]) == -1.0
    assert cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    assert cohens_d([5, 5], [5, 5]) == 0.0
    with pytest.raises(InfiniteEffectError):
        cohens_d([5, 5], [6, 6])
    with pytest.raises(ValueError):
        cohens_d([1], [1, 2])


@settings(max_examples=200)
@given(samples, samples)
def test_cohens_d_matches_statistics_module(a, b):
    if statistics.variance(a) + statistics.variance(b) < 1e-6:
        return
    assert cohens_d(a, b) == pytest.approx(stats_d(a, b), rel=1e-9, abs=1e-9)
    assert cohens_d(a, b) == pytest.approx(-cohens_d(b, a), abs=1e-12)


@settings(max_examples=100)
@given(samples, samples, st.floats(1e-2, 1e2), st.floats(-1e3, 1e3))
def test_cohens_d_scale_and_shift_invariant(a, b, c, shift):
    if statistics.variance(a) + statistics.variance(b) < 1e-3:
        return
    d = cohens_d(a, b)
    assert cohens_d([c * x for x in a], [c * x for x in b]) == pytest.approx(d, rel=1e-9, abs=1e-9)
    assert cohens_d([x + shift for x in a], [x + shift for x in b]) == pytest.approx(d, rel=1e-6, abs=1e-6)


# --- precision / recall ----------------------------------------------------------

def test_weighted_precision_recall_examples():
    assert weighted_precision_recall(np.diag([3, 4, 5]))[:2] == (1.0, 1.0)
    p, r, flag = weighted_precision_recall([[5, 0], [5, 0]])
    assert (p, r, flag) == (0.25, 0.5, True)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_weighted_metrics_identities(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 5))
    cm = rng.integers(0, 20, size=(C, C)) + np.eye(C, dtype=int)
    p, r, _ = weighted_precision_recall(cm)
    # recall weighted by support is the accuracy
    assert r == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)
    perm = rng.permutation(C)
    p2, r2, _ = weighted_precision_recall(cm[np.ix_(perm, perm)])
    assert p2 == pytest.approx(p, abs=1e-12) and r2 == pytest.approx(r, abs=1e-12)
    assert 0 <= p <= 1


# --- effect-size table -------------------------------------------------------------

def make_actual(n=6, P=3, seed=0):
    rng = np.random.default_rng(seed)
    subjects = [SubjectRecord(f"s{i}", i % 3, [rng.normal(size=P) for _ in range(4)]) for i in range(n)]
    return Cohort(["CT", "Tau", "FDG", "Abeta"], ["CN", "EMCI", "LMCI"], P, subjects)


def test_generated_equal_to_real_gives_zero():
    actual = make_actual(12)
    gen = GeneratedSet()
    for rec in actual.subjects:
        for s in actual.modalities:
            for t, name in enumerate(actual.modalities):
                gen.add(rec.subject_id, s, name, rec.features[t])
    table = effect_size_table(actual, gen)
    assert len(table.entries) == 48
    assert all(v == 0.0 for v in table.entries.values())
    for key, d in table.per_roi.items():
        assert float(d.mean()) == table.entries[key]


def test_sparse_strata_flagged_not_fabricated():
    actual = make_actual(12)
    gen = GeneratedSet()
    gen.add("s0", "CT", "Tau", np.zeros(3))
    table = effect_size_table(actual, gen)
    assert all(v is None for v in table.entries.values())
    assert len(table.missing()) == 48
    with pytest.raises(DataError):
        gen.add("nobody", "CT", "Tau", np.zeros(3))
        effect_size_table(actual, gen)


def test_table_invariant_to_order():
    actual = make_actual(30, seed=1)
    rng = np.random.default_rng(2)
    recs = [(r.subject_id, "CT", "Tau", rng.normal(size=3)) for r in actual.subjects]
    a = effect_size_table(actual, GeneratedSet(list(recs)))
    b = effect_size_table(actual.subset(actual.subject_ids()[::-1]), GeneratedSet(recs[::-1]))
    for k in a.entries:
        assert a.entries[k] == pytest.approx(b.entries[k], abs=1e-12) if a.entries[k] is not None else b.entries[k] is None


# --- report emission -----------------------------------------------------------------

def test_emit_reports_roundtrip(tmp_path):
    actual = make_actual(30, seed=3)
    rng = np.random.default_rng(4)
    gen = GeneratedSet([(r.subject_id, s, t, rng.normal(size=3))
                        for r in actual.subjects for s in ("CT", "Tau") for t in ("FDG",)])
    table = effect_size_table(actual, gen)
    files = emit_reports({"ours": table}, [], tmp_path)
    present = [k for k, v in table.entries.items() if v is not None]
    assert len(files) == 1 + 1 + len(present)
    per_roi, summary = read_effect_sizes(tmp_path / "effect_sizes.csv")
    for key in present:
        assert np.mean(per_roi[key]) == pytest.approx(summary[key], abs=1e-9)
        assert summary[key] == table.entries[key]
    assert json.loads((tmp_path / "classification.json").read_text()) == {"reports": []}


def test_emit_empty_table_is_header_only(tmp_path):
    empty = effect_size_table(make_actual(6), GeneratedSet())
    empty.entries = {}
    emit_reports({"x": empty}, [], tmp_path)
    rows = list(csv.reader((tmp_path / "effect_sizes.csv").open()))
    assert rows == [["source", "target", "class", "roi", "abs_d"]]


def test_emit_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_reports({}, [], blocker / "sub")


# --- downstream classification ------------------------------------------------------------

def separable_cohort(n_per=20, shuffle=False, seed=0):
    rng = np.random.default_rng(seed)
    subjects = []
    labels = np.repeat(np.arange(3), n_per)
    if shuffle:
        signal = rng.permutation(labels)
    else:
        signal = labels
    for i, (y, sig) in enumerate(zip(labels, signal)):
        feats = [rng.normal(size=4) * 0.1 + (5.0 * sig if not shuffle else 0.0) for _ in range(2)]
        if shuffle:
            feats = [rng.normal(size=4) for _ in range(2)]
        subjects.append(SubjectRecord(f"s{i:03d}", int(y), feats))
    return Cohort(["A", "B"], ["CN", "EMCI", "LMCI"], 4, subjects)


FAST = ClassifierHyper(epochs=400, lr=1e-2)


def test_separable_cohort_classifies_perfectly():
    rep = downstream_classify(separable_cohort(), depth=2, k=5, seed=0, hyper=FAST)
    assert rep.summary()["accuracy"]["mean"] >= 0.99
    assert len(rep.fold_metrics) == 5
    assert rep.hidden_dims == classifier_dims(8, 3, 2)[1:-1]


def test_label_noise_cohort_is_at_chance():
    accs = [downstream_classify(separable_cohort(40, shuffle=True, seed=s), depth=3, k=5, seed=s, hyper=FAST)
            .summary()["accuracy"]["mean"] for s in range(3)]
    assert abs(np.mean(accs) - 1 / 3) <= 0.08


def test_classification_deterministic_and_valid():
    c = separable_cohort(10, seed=5)
    a = downstream_classify(c, depth=4, k=3, seed=7, hyper=ClassifierHyper(epochs=5))
    b = downstream_classify(c, depth=4, k=3, seed=7, hyper=ClassifierHyper(epochs=5))
    assert a.to_dict() == b.to_dict()
    for m in a.fold_metrics:
        assert 0 <= m["accuracy"] <= 1 and 0 <= m["precision"] <= 1
        assert m["recall"] == pytest.approx(m["accuracy"], abs=1e-12)


def test_fold_pool_keeps_extra_subjects_in_training():
    c = separable_cohort(12)
    ids = c.subject_ids()
    pool = ids[:10] + ids[12:22] + ids[24:34]
    rep = downstream_classify(c, depth=2, k=3, seed=0, fold_pool=pool, hyper=ClassifierHyper(epochs=2))
    assert sum(m["n_test"] for m in rep.fold_metrics) == 30
    assert all(m["n_train"] + m["n_test"] < len(c) for m in rep.fold_metrics)


def test_classify_rejects_incomplete_and_tiny():
    c = separable_cohort(10)
    c.subjects[0].features[1] = None
    with pytest.raises(DataError, match="s000"):
        downstream_classify(c, depth=2, k=3, seed=0, hyper=ClassifierHyper(epochs=1))
    with pytest.raises(DataError):
        downstream_classify(separable_cohort(2), depth=2, k=5, seed=0)


def test_classifier_dims():
    assert classifier_dims(640, 3, 2) == [640, 44, 3]
    assert classifier_dims(640, 3, 4) == [640, 167, 44, 11, 3]
    with pytest.raises(ValueError):
        classifier_dims(10, 3, 0)
