"""Realism (per-ROI Cohen's d) and downstream-utility (CV classification) evaluation."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Cohort, DataError, kfold_split
from .nncore import AdamW, cross_entropy, init_mlp, mlp_backward, mlp_forward
from .phase1 import confusion_matrix


class InfiniteEffectError(ArithmeticError):
    pass


def cohens_d(sample_a, sample_b) -> float:
    """Signed standardized mean difference with pooled (ddof=1) standard deviation."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("cohens_d needs at least two values per sample")
    diff = a.mean() - b.mean()
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled == 0:
        if diff == 0:
            return 0.0
        raise InfiniteEffectError("zero pooled variance with unequal means")
    return float(diff / math.sqrt(pooled))


def cohens_d_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise :func:`cohens_d` for ``(n_a, P)`` and ``(n_b, P)`` arrays; NaN where undefined."""
    out = np.empty(a.shape[1])
    for p in range(a.shape[1]):
        try:
            out[p] = cohens_d(a[:, p], b[:, p])
        except InfiniteEffectError:
            out[p] = np.nan
    return out


# --- effect-size table --------------------------------------------------------

@dataclass
class GeneratedSet:
    """Generated target vectors attributed to their source modality.

    ``records`` holds ``(subject_id, source, target, vector)`` tuples.
    """

    records: list[tuple[str, str, str, np.ndarray]] = field(default_factory=list)

    def add(self, subject_id: str, source: str, target: str, vector: np.ndarray) -> None:
        self.records.append((subject_id, source, target, vector))

    @classmethod
    def from_completed(cls, completed: Cohort, provenance: Iterable[Mapping]) -> "GeneratedSet":
        index = {r.subject_id: r for r in completed.subjects}
        out = cls()
        for row in provenance:
            rec = index[row["subject_id"]]
            t = completed.modality_index(row["modality"])
            out.add(row["subject_id"], row["source_modality"], row["modality"], rec.features[t])
        return out


@dataclass
class EffectSizeTable:
    modalities: list[str]
    labels: list[str]
    entries: dict[tuple[str, str, str], float | None]
    per_roi: dict[tuple[str, str, str], np.ndarray]

    def mean_abs_d(self) -> float:
        vals = [v for v in self.entries.values() if v is not None and np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def class_means(self) -> dict[str, float]:
        out = {}
        for c in self.labels:
            vals = [v for (s, t, cl), v in self.entries.items() if cl == c and v is not None]
            out[c] = float(np.mean(vals)) if vals else float("nan")
        return out

    def missing(self) -> list[tuple[str, str, str]]:
        return [k for k, v in self.entries.items() if v is None]


def effect_size_table(actual: Cohort, generated: GeneratedSet) -> EffectSizeTable:
    """Average |d| over ROIs for every (source, target, class) stratum.

    Real values come from ``actual`` (observed target vectors of that
    class); generated values are grouped by source and target. Strata with
    fewer than two values on either side are recorded as ``None``.
    """
    label_of = {r.subject_id: actual.labels[r.label] for r in actual.subjects}
    grouped: dict[tuple[str, str, str], list[np.ndarray]] = {}
    for sid, src, tgt, vec in generated.records:
        if sid not in label_of:
            raise DataError(f"generated subject {sid!r} is not in the actual cohort")
        grouped.setdefault((src, tgt, label_of[sid]), []).append(vec)
    real: dict[tuple[str, str], np.ndarray] = {}
    for t, tname in enumerate(actual.modalities):
        for c, cname in enumerate(actual.labels):
            rows = [r.features[t] for r in actual.subjects if r.label == c and r.features[t] is not None]
            real[(tname, cname)] = np.array(rows).reshape(len(rows), actual.roi_count)

    entries: dict[tuple[str, str, str], float | None] = {}
    per_roi: dict[tuple[str, str, str], np.ndarray] = {}
    for s in actual.modalities:
        for t in actual.modalities:
            for c in actual.labels:
                key = (s, t, c)
                gen = grouped.get(key, [])
                ref = real[(t, c)]
                if len(gen) < 2 or ref.shape[0] < 2:
                    entries[key] = None
                    continue
                d = np.abs(cohens_d_columns(np.array(gen), ref))
                if not np.all(np.isfinite(d)):
                    entries[key] = None
                    continue
                per_roi[key] = d
                entries[key] = float(d.mean())
    return EffectSizeTable(list(actual.modalities), list(actual.labels), entries, per_roi)


# --- classification -----------------------------------------------------------

def weighted_precision_recall(confusion) -> tuple[float, float, bool]:
    """Support-weighted precision and recall from a (true x predicted) confusion matrix.

    Returns ``(precision, recall, zero_division)``; classes never predicted
    contribute 0 precision and set the flag.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    support = cm.sum(axis=1)
    total = support.sum()
    if total == 0:
        return 0.0, 0.0, True
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    flag = bool(np.any((predicted == 0) & (support > 0)))
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    w = support / total
    return float(np.sum(w * precision)), float(np.sum(w * recall)), flag


@dataclass
class ClassifierHyper:
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64
    val_fraction_folds: int = 5  # inner split: one of this many folds is held out for snapshot selection


@dataclass
class ClassificationReport:
    method: str
    model_depth: int
    k: int
    generator_count: int
    fold_metrics: list[dict]
    hidden_dims: list[int]

    def summary(self) -> dict:
        out = {}
        for key in ("accuracy", "precision", "recall"):
            vals = np.array([m[key] for m in self.fold_metrics])
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d


def classifier_dims(in_dim: int, n_classes: int, depth: int) -> list[int]:
    """Geometric interpolation of widths from the input down to the class count."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    dims = [in_dim]
    for i in range(1, depth):
        dims.append(max(n_classes, int(round(in_dim * (n_classes / in_dim) ** (i / depth)))))
    return dims + [n_classes]


def _flatten(cohort: Cohort, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    index = {r.subject_id: r for r in cohort.subjects}
    X, y = [], []
    for sid in ids:
        rec = index[sid]
        if any(f is None for f in rec.features):
            raise DataError(f"subject {sid!r} is not fully observed")
        X.append(np.concatenate(rec.features))
        y.append(rec.label)
    return np.array(X), np.array(y, dtype=np.int64)


def train_classifier(X: np.ndarray, y: np.ndarray, n_classes: int, depth: int, hyper: ClassifierHyper,
                     rng: np.random.Generator, X_val=None, y_val=None):
    """AdamW-trained MLP; keeps the parameters with the lowest validation loss."""
    net = init_mlp(classifier_dims(X.shape[1], n_classes, depth), rng, output_activation="softmax_logits")
    opt = AdamW(lr=hyper.lr, weight_decay=hyper.weight_decay)
    best, best_loss = net.copy(), math.inf
    n = X.shape[0]
    bs = min(hyper.batch_size, n)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            logits, tape = mlp_forward(net, X[idx], record=True)
            _, g = cross_entropy(logits, y[idx])
            grads, _ = mlp_backward(net, tape, g)
            opt.step(net, grads)
        if X_val is not None and len(X_val):
            loss, _ = cross_entropy(mlp_forward(net, X_val), y_val)
            if loss < best_loss:
                best_loss, best = loss, net.copy()
    return best if X_val is not None and len(X_val) else net


def downstream_classify(
    cohort: Cohort,
    depth: int,
    k: int = 5,
    seed: int = 0,
    fold_pool: Sequence[str] | None = None,
    hyper: ClassifierHyper | None = None,
    method: str = "",
    generator_count: int = 0,
) -> ClassificationReport:
    """Stratified k-fold CV of an MLP on concatenated modality vectors.

    Folds are drawn from ``fold_pool`` (default: every subject). Subjects
    outside the pool are never tested and join every training split, which
    is how imputed subjects augment training while evaluation stays on
    fully observed ones.
    """
    hyper = hyper or ClassifierHyper()
    pool_ids = list(fold_pool) if fold_pool is not None else cohort.subject_ids()
    pool = cohort.subset(pool_ids)
    if len(pool) < k * cohort.n_classes:
        raise DataError(f"{len(pool)} subjects cannot give {k} folds covering {cohort.n_classes} classes")
    folds = kfold_split(pool, k, seed)
    extra = [sid for sid in cohort.subject_ids() if sid not in set(pool_ids)]
    dims = classifier_dims(cohort.n_modalities * cohort.roi_count, cohort.n_classes, depth)
    metrics = []
    for f, test_ids in enumerate(folds):
        train_pool = pool.subset([sid for g, fold in enumerate(folds) if g != f for sid in fold])
        inner = kfold_split(train_pool, hyper.val_fraction_folds, seed + 1000 + f)
        val_ids = inner[0]
        fit_ids = [sid for sid in train_pool.subject_ids() if sid not in set(val_ids)] + extra
        X_fit, y_fit = _flatten(cohort, fit_ids)
        X_val, y_val = _flatten(cohort, val_ids)
        X_test, y_test = _flatten(cohort, test_ids)
        rng = np.random.default_rng([seed, f, depth])
        net = train_classifier(X_fit, y_fit, cohort.n_classes, depth, hyper, rng, X_val, y_val)
        pred = np.argmax(mlp_forward(net, X_test), axis=1)
        cm = confusion_matrix(y_test, pred, cohort.n_classes)
        precision, recall, flag = weighted_precision_recall(cm)
        if flag:
            warnings.warn(f"fold {f}: a class was never predicted; its precision counts as 0", stacklevel=2)
        metrics.append({
            "fold": f,
            "accuracy": float(np.trace(cm) / cm.sum()),
            "precision": precision,
            "recall": recall,
            "n_train": len(fit_ids),
            "n_test": len(test_ids),
            "confusion": cm.tolist(),
            "zero_division": flag,
        })
    return ClassificationReport(method, depth, k, generator_count, metrics, dims[1:-1])


# --- report emission ----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


EFFECT_HEADER = ["source", "target", "class", "roi", "abs_d"]


def emit_reports(tables: Mapping[str, EffectSizeTable], reports: Sequence[ClassificationReport],
                 out_dir, extra: Mapping | None = None) -> list[Path]:
    """Write ``effect_sizes.csv``, ``classification.json`` and per-stratum ROI maps.

    ``tables`` maps a method name to its table; ROI maps are emitted for the
    first table only (file names carry no method). Summary rows use
    ``roi = "mean"``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    written = []
    eff_path = out / "effect_sizes.csv"
    multi = len(tables) > 1
    header = (["method"] if multi else []) + EFFECT_HEADER
    with eff_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for method, table in tables.items():
            prefix = [method] if multi else []
            for (s, t, c), d in table.per_roi.items():
                for p, v in enumerate(d):
                    w.writerow(prefix + [s, t, c, p, _fmt(v)])
            for (s, t, c), v in table.entries.items():
                w.writerow(prefix + [s, t, c, "mean", "" if v is None else _fmt(v)])
    written.append(eff_path)

    cls_path = out / "classification.json"
    doc = {"reports": [r.to_dict() for r in reports]}
    if extra:
        doc.update(extra)
    cls_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(cls_path)

    if tables:
        first = next(iter(tables.values()))
        for (s, t, c), d in first.per_roi.items():
            p = out / f"roi_map_{s}_{t}_{c}.csv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["roi", "abs_d"])
                for i, v in enumerate(d):
                    w.writerow([f"f{i:03d}", _fmt(v)])
            written.append(p)
    return written


def read_effect_sizes(path) -> tuple[dict, dict]:
    """Parse ``effect_sizes.csv`` into ``(per_roi, summary)`` dicts keyed by stratum."""
    per_roi: dict[tuple, list[float]] = {}
    summary: dict[tuple, float | None] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = tuple(row[k] for k in (["method"] if "method" in row else []) + ["source", "target", "class"])
            if row["roi"] == "mean":
                summary[key] = float(row["abs_d"]) if row["abs_d"] else None
            else:
                per_roi.setdefault(key, []).append(float(row["abs_d"]))
    return per_roi, summary
