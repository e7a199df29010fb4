"""Cohort model, long-format CSV I/O, standardization, folds and synthetic cohorts."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_MODALITIES = ("CT", "Tau", "FDG", "Abeta")
DEFAULT_LABELS = ("CN", "EMCI", "LMCI")
DEFAULT_ROI_COUNT = 160


class DataError(ValueError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    label: int
    features: list[np.ndarray | None]

    @property
    def mask(self) -> list[bool]:
        return [f is not None for f in self.features]

    def observed(self) -> list[int]:
        return [s for s, f in enumerate(self.features) if f is not None]


@dataclass
class Standardization:
    mean: np.ndarray  # (S, P)
    std: np.ndarray  # (S, P); 0 flags a constant column

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Cohort:
    modalities: list[str]
    labels: list[str]
    roi_count: int
    subjects: list[SubjectRecord]
    standardization: Standardization | None = None

    def __post_init__(self):
        if len(self.modalities) < 2:
            raise DataError("a cohort needs at least two modalities")
        if len(set(self.modalities)) != len(self.modalities):
            raise DataError("duplicate modality names")
        seen = set()
        for rec in self.subjects:
            if rec.subject_id in seen:
                raise DataError(f"duplicate subject {rec.subject_id!r}")
            seen.add(rec.subject_id)
            if len(rec.features) != len(self.modalities):
                raise DataError(f"subject {rec.subject_id!r}: wrong modality count")
            if not 0 <= rec.label < len(self.labels):
                raise DataError(f"subject {rec.subject_id!r}: label index {rec.label} out of range")
            if not rec.observed():
                raise DataError(f"subject {rec.subject_id!r} has no observed modality")
            for f in rec.features:
                if f is not None and (f.shape != (self.roi_count,) or not np.all(np.isfinite(f))):
                    raise DataError(f"subject {rec.subject_id!r}: bad feature vector")

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.subjects)

    def modality_index(self, name: str) -> int:
        try:
            return self.modalities.index(name)
        except ValueError:
            raise DataError(f"unknown modality {name!r}") from None

    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.subjects]

    def label_array(self) -> np.ndarray:
        return np.array([r.label for r in self.subjects], dtype=np.int64)

    def mask_array(self) -> np.ndarray:
        return np.array([r.mask for r in self.subjects], dtype=bool).reshape(len(self), self.n_modalities)

    def is_complete(self) -> bool:
        return bool(self.mask_array().all())

    def present_pairs(self, modality: int | None = None):
        """Stack observed vectors: returns ``(X, subject_idx, modality_idx, labels)``."""
        xs, si, mi, ys = [], [], [], []
        for k, rec in enumerate(self.subjects):
            for s, f in enumerate(rec.features):
                if f is None or (modality is not None and s != modality):
                    continue
                xs.append(f)
                si.append(k)
                mi.append(s)
                ys.append(rec.label)
        X = np.array(xs, dtype=np.float64).reshape(len(xs), self.roi_count)
        return X, np.array(si, dtype=np.int64), np.array(mi, dtype=np.int64), np.array(ys, dtype=np.int64)

    def subset(self, ids: Sequence[str]) -> "Cohort":
        """Subjects restricted to ``ids`` (kept in cohort order)."""
        keep = set(ids)
        return Cohort(list(self.modalities), list(self.labels), self.roi_count,
                      [r for r in self.subjects if r.subject_id in keep], self.standardization)

    def copy(self) -> "Cohort":
        subjects = [
            SubjectRecord(r.subject_id, r.label, [None if f is None else f.copy() for f in r.features])
            for r in self.subjects
        ]
        return Cohort(list(self.modalities), list(self.labels), self.roi_count, subjects, self.standardization)

    def equals(self, other: "Cohort") -> bool:
        """Bit-exact equality of structure and every observed value."""
        if (self.modalities, self.labels, self.roi_count) != (other.modalities, other.labels, other.roi_count):
            return False
        if len(self) != len(other):
            return False
        for a, b in zip(self.subjects, other.subjects):
            if a.subject_id != b.subject_id or a.label != b.label or a.mask != b.mask:
                return False
            for fa, fb in zip(a.features, b.features):
                if fa is not None and not np.array_equal(fa, fb):
                    return False
        return True


# --- CSV ---------------------------------------------------------------------

def feature_columns(roi_count: int) -> list[str]:
    return [f"f{i:03d}" for i in range(roi_count)]


def save_cohort(cohort: Cohort, path) -> None:
    """Long format: one row per observed (subject, modality); floats written with repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label", "modality", *feature_columns(cohort.roi_count)])
        for rec in cohort.subjects:
            for s, f in enumerate(rec.features):
                if f is not None:
                    w.writerow([rec.subject_id, cohort.labels[rec.label], cohort.modalities[s],
                                *(repr(float(v)) for v in f)])


def load_cohort(
    path,
    modalities: Sequence[str] | None = None,
    labels: Sequence[str] | None = None,
    roi_count: int | None = None,
) -> Cohort:
    """Parse a long-format cohort CSV.

    When ``modalities``/``labels`` are not given they are inferred: the
    default name sets keep their canonical order, anything else keeps
    first-appearance order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if header[:3] != ["subject_id", "label", "modality"]:
        raise DataError(f"{path}:1: header must start with subject_id,label,modality")
    p = len(header) - 3
    if p < 1 or header[3:] != feature_columns(p):
        raise DataError(f"{path}:1: feature columns must be f000..f{p - 1:03d}")
    if roi_count is not None and p != roi_count:
        raise DataError(f"{path}:1: expected {roi_count} feature columns, found {p}")

    parsed = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
        try:
            values = np.array([float(v) for v in row[3:]], dtype=np.float64)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}:{lineno}: non-finite feature value")
        parsed.append((lineno, row[0], row[1], row[2], values))
    if not parsed:
        raise DataError(f"{path}: no subjects")

    mods = list(modalities) if modalities is not None else _infer_order([r[3] for r in parsed], DEFAULT_MODALITIES)
    labs = list(labels) if labels is not None else _infer_order([r[2] for r in parsed], DEFAULT_LABELS)

    records: dict[str, SubjectRecord] = {}
    for lineno, sid, lab, mod, values in parsed:
        if mod not in mods:
            raise DataError(f"{path}:{lineno}: unknown modality {mod!r}")
        if lab not in labs:
            raise DataError(f"{path}:{lineno}: unknown label {lab!r}")
        rec = records.get(sid)
        if rec is None:
            rec = records[sid] = SubjectRecord(sid, labs.index(lab), [None] * len(mods))
        elif rec.label != labs.index(lab):
            raise DataError(f"{path}:{lineno}: subject {sid!r} has conflicting labels")
        s = mods.index(mod)
        if rec.features[s] is not None:
            raise DataError(f"{path}:{lineno}: duplicate row for subject {sid!r}, modality {mod!r}")
        rec.features[s] = values
    return Cohort(mods, labs, p, list(records.values()))


def _infer_order(seen: Sequence[str], canonical: Sequence[str]) -> list[str]:
    names = list(dict.fromkeys(seen))
    if set(names) <= set(canonical):
        return [c for c in canonical if c in names] if len(names) >= 2 else list(canonical)
    return names


# --- standardization ---------------------------------------------------------

def standardization_stats(cohort: Cohort) -> Standardization:
    S, P = cohort.n_modalities, cohort.roi_count
    mean = np.zeros((S, P))
    std = np.zeros((S, P))
    for s in range(S):
        X = cohort.present_pairs(modality=s)[0]
        if X.shape[0] < 2:
            raise DataError(f"modality {cohort.modalities[s]!r} has fewer than 2 observed values")
        mean[s] = X.mean(axis=0)
        sd = X.std(axis=0, ddof=1)
        # exactly-constant columns get the 0 sentinel
        const = np.all(X == X[0], axis=0)
        std[s] = np.where(const, 0.0, sd)
    return Standardization(mean, std)


def apply_standardization(cohort: Cohort, stats: Standardization) -> Cohort:
    out = cohort.copy()
    for rec in out.subjects:
        for s, f in enumerate(rec.features):
            if f is not None:
                sd = stats.std[s]
                rec.features[s] = np.where(sd > 0, (f - stats.mean[s]) / np.where(sd > 0, sd, 1.0), 0.0)
    out.standardization = stats
    return out


def standardize(cohort: Cohort, stats: Standardization | None = None) -> tuple[Cohort, Standardization]:
    """Per-(modality, ROI) z-score over observed values; stats fitted here unless given."""
    if stats is None:
        stats = standardization_stats(cohort)
    return apply_standardization(cohort, stats), stats


def inverse_standardize(cohort: Cohort, stats: Standardization | None = None) -> Cohort:
    stats = stats or cohort.standardization
    if stats is None:
        raise DataError("cohort carries no standardization stats")
    out = cohort.copy()
    for rec in out.subjects:
        for s, f in enumerate(rec.features):
            if f is not None:
                rec.features[s] = f * stats.std[s] + stats.mean[s]
    out.standardization = None
    return out


# --- folds -------------------------------------------------------------------

def kfold_split(cohort: Cohort, k: int, seed: int, stratify_by_label: bool = True) -> list[list[str]]:
    """Partition subject ids into ``k`` folds, deterministic per seed.

    Stratified folds deal each shuffled class round-robin, continuing from
    where the previous class stopped so fold sizes stay within one.
    """
    if k < 2:
        raise DataError("k must be at least 2")
    ids = cohort.subject_ids()
    if len(ids) < k:
        raise DataError(f"{len(ids)} subjects cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    if not stratify_by_label:
        order = rng.permutation(len(ids))
        for f, chunk in enumerate(np.array_split(order, k)):
            folds[f] = [ids[i] for i in chunk]
        return folds
    labels = cohort.label_array()
    pos = 0
    for c in range(cohort.n_classes):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        if members.size < k:
            raise DataError(f"class {cohort.labels[c]!r} has {members.size} subjects, fewer than k={k}")
        for i in rng.permutation(members):
            folds[pos % k].append(ids[i])
            pos += 1
    order = {sid: i for i, sid in enumerate(ids)}
    return [sorted(f, key=order.__getitem__) for f in folds]


# --- synthetic cohorts -------------------------------------------------------

@dataclass
class ModalityStyle:
    scale: list[list[float]]  # (P, content_dim) map from content to ROIs
    offset: list[float]  # (P,)
    noise_std: float = 0.1


@dataclass
class SynthSpec:
    """Generative recipe: x_s = A_s z + b_s + noise with z ~ N(class shift, I).

    ``styles`` may be left empty, in which case affine styles are drawn from
    ``style_seed`` (``style_strength`` 0 gives identical styles for every
    modality, i.e. a style-free control).
    """

    subjects_per_class: list[int] = field(default_factory=lambda: [200, 200, 200])
    content_dim: int = 16
    roi_count: int = DEFAULT_ROI_COUNT
    modalities: list[str] = field(default_factory=lambda: list(DEFAULT_MODALITIES))
    labels: list[str] = field(default_factory=lambda: list(DEFAULT_LABELS))
    class_shift: list[float] = field(default_factory=lambda: [-2.0, 0.0, 2.0])
    disease_rois: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    missingness: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    styles: list[ModalityStyle] = field(default_factory=list)
    style_strength: float = 1.0
    style_mixing: float = 0.5  # per-modality random matrix mixing content dims; survives standardization
    noise_std: float = 0.1
    style_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        S = len(self.modalities)
        if S < 2:
            raise DataError("modalities: need at least two")
        if len(self.labels) != len(self.subjects_per_class) or len(self.class_shift) != len(self.labels):
            raise DataError("subjects_per_class/class_shift: must have one entry per label")
        if any(n < 0 for n in self.subjects_per_class) or sum(self.subjects_per_class) == 0:
            raise DataError("subjects_per_class: counts must be non-negative with a positive total")
        if self.content_dim < 1 or self.roi_count < self.content_dim:
            raise DataError("content_dim: must be in [1, roi_count]")
        if any(not 0 <= r < self.content_dim for r in self.disease_rois):
            raise DataError("disease_rois: indices must lie in [0, content_dim)")
        if len(self.missingness) != S or any(not 0.0 <= m <= 1.0 for m in self.missingness):
            raise DataError("missingness: need one probability in [0, 1] per modality")
        if self.styles and len(self.styles) != S:
            raise DataError("styles: need one entry per modality")
        for st in self.styles:
            if np.shape(st.scale) != (self.roi_count, self.content_dim) or len(st.offset) != self.roi_count:
                raise DataError("styles: scale must be (roi_count, content_dim) and offset length roi_count")
        if self.noise_std < 0:
            raise DataError("noise_std: must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"{sorted(unknown)[0]}: unknown field")
        d = dict(d)
        if "styles" in d:
            try:
                d["styles"] = [ModalityStyle(**st) for st in d["styles"]]
            except TypeError as exc:
                raise DataError(f"styles: {exc}") from None
        spec = cls(**d)
        spec.validate()
        return spec


def default_styles(spec: SynthSpec) -> list[ModalityStyle]:
    """Random affine styles around a shared identity-like embedding of content into ROIs."""
    rng = np.random.default_rng(spec.style_seed)
    P, D = spec.roi_count, spec.content_dim
    base = np.zeros((P, D))
    base[np.arange(P), np.arange(P) % D] = 1.0
    base += 0.3 * rng.standard_normal((P, D)) / np.sqrt(D)
    styles = []
    for _ in spec.modalities:
        a = base * (1.0 + spec.style_strength * rng.uniform(-0.5, 0.5, size=(P, 1)))
        a = a + spec.style_mixing * rng.standard_normal((P, D)) / np.sqrt(D)
        b = spec.style_strength * rng.standard_normal(P)
        styles.append(ModalityStyle(a.tolist(), b.tolist(), spec.noise_std))
    return styles


@dataclass
class SynthTruth:
    content: np.ndarray  # (K, content_dim)
    scales: list[np.ndarray]
    offsets: list[np.ndarray]
    noise_std: list[float]
    full: np.ndarray  # (K, S, P) every modality, including masked-out ones

    def to_dict(self) -> dict:
        return {
            "content": self.content.tolist(),
            "scales": [a.tolist() for a in self.scales],
            "offsets": [b.tolist() for b in self.offsets],
            "noise_std": list(self.noise_std),
            "full": self.full.tolist(),
        }


def synth_cohort(spec: SynthSpec, return_truth: bool = False):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    styles = spec.styles or default_styles(spec)
    S, P, D = len(spec.modalities), spec.roi_count, spec.content_dim
    scales = [np.asarray(st.scale, dtype=np.float64) for st in styles]
    offsets = [np.asarray(st.offset, dtype=np.float64) for st in styles]
    labels = np.repeat(np.arange(len(spec.labels)), spec.subjects_per_class)
    K = labels.size
    mu = np.zeros((len(spec.labels), D))
    for c, shift in enumerate(spec.class_shift):
        mu[c, spec.disease_rois] = shift
    z = mu[labels] + rng.standard_normal((K, D))
    full = np.empty((K, S, P))
    for s in range(S):
        full[:, s] = z @ scales[s].T + offsets[s] + styles[s].noise_std * rng.standard_normal((K, P))
    miss = np.asarray(spec.missingness)
    masks = rng.random((K, S)) >= miss
    for k in range(K):
        tries = 0
        while not masks[k].any():
            tries += 1
            if tries > 100:
                raise DataError("missingness: could not draw a mask with an observed modality in 100 attempts")
            masks[k] = rng.random(S) >= miss
    width = len(str(K))
    subjects = [
        SubjectRecord(f"sub{k:0{width}d}", int(labels[k]),
                      [full[k, s].copy() if masks[k, s] else None for s in range(S)])
        for k in range(K)
    ]
    cohort = Cohort(list(spec.modalities), list(spec.labels), P, subjects)
    if not return_truth:
        return cohort
    truth = SynthTruth(z, scales, offsets, [st.noise_std for st in styles], full)
    return cohort, truth


def load_synth_spec(path) -> SynthSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"spec JSON parse error at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise DataError("spec: top-level JSON value must be an object")
    try:
        return SynthSpec.from_dict(raw)
    except TypeError as exc:
        raise DataError(f"spec: {exc}") from None
