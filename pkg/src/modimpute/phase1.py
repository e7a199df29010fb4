"""Content extraction: domain-adversarial training of the embedding network.

The extractor feeds two heads. The label head learns the diagnosis, the
domain head learns which modality produced the vector, and the gradient
coming back from the domain head is reversed before it reaches the
extractor so the embedding drifts towards modality-agnostic content.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Cohort
from .nncore import (
    AdamW,
    MlpParams,
    NumericError,
    ShapeError,
    cross_entropy,
    dump_json,
    grad_reverse,
    grl_forward,
    init_mlp,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)


@dataclass
class Phase1Hyper:
    epochs: int = 8000
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 64  # 0 means full batch
    grl_lambda: float = 1.0
    embedding_dim: int = 256
    hidden_dim: int = 256
    extractor_layers: int = 5
    head_layers: int = 2
    embedding_activation: str = "tanh"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 0:
            raise ValueError("Phase1Hyper: epochs/lr must be positive, weight_decay/batch_size non-negative")
        if self.grl_lambda < 0:
            raise ValueError("Phase1Hyper: grl_lambda must be non-negative")
        if self.embedding_activation not in ("tanh", "linear"):
            raise ValueError("Phase1Hyper: embedding_activation must be 'tanh' or 'linear'")
        if min(self.embedding_dim, self.hidden_dim, self.extractor_layers, self.head_layers) < 1:
            raise ValueError("Phase1Hyper: widths and layer counts must be positive")


@dataclass
class ContentModel:
    E: MlpParams
    C_LC: MlpParams
    C_DC: MlpParams
    grl_lambda: float
    modalities: list[str]
    labels: list[str]
    hyper: dict = field(default_factory=dict)
    training_log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.E.out_dim != self.C_LC.in_dim or self.E.out_dim != self.C_DC.in_dim:
            raise ShapeError("extractor output dim must match both head input dims")

    @property
    def embedding_dim(self) -> int:
        return self.E.out_dim

    @property
    def roi_count(self) -> int:
        return self.E.in_dim

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": "content_model",
            "networks": {"E": self.E.to_dict(), "C_LC": self.C_LC.to_dict(), "C_DC": self.C_DC.to_dict()},
            "grl_lambda": self.grl_lambda,
            "modalities": list(self.modalities),
            "labels": list(self.labels),
            "hyper": self.hyper,
            "training_log": self.training_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContentModel":
        nets = d["networks"]
        return cls(
            MlpParams.from_dict(nets["E"]),
            MlpParams.from_dict(nets["C_LC"]),
            MlpParams.from_dict(nets["C_DC"]),
            float(d["grl_lambda"]),
            list(d["modalities"]),
            list(d["labels"]),
            d.get("hyper", {}),
            d.get("training_log", []),
        )

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "ContentModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_content_model(n_rois: int, n_modalities: int, n_classes: int, hyper: Phase1Hyper,
                        rng: np.random.Generator) -> tuple[MlpParams, MlpParams, MlpParams]:
    h, emb = hyper.hidden_dim, hyper.embedding_dim
    E = init_mlp([n_rois] + [h] * (hyper.extractor_layers - 1) + [emb], rng,
                 output_activation=hyper.embedding_activation)
    heads = [h] * (hyper.head_layers - 1)
    C_LC = init_mlp([emb, *heads, n_classes], rng, output_activation="softmax_logits")
    C_DC = init_mlp([emb, *heads, n_modalities], rng, output_activation="softmax_logits")
    return E, C_LC, C_DC


def phase1_step(E, C_LC, C_DC, opts, x, y, s, grl_lambda: float, couple_domain: bool = True):
    """One joint update on a batch. Returns ``(L_LC, L_DC, label_hits, domain_hits)``.

    All gradients come from the same forward pass; the heads and the
    extractor are then stepped. The extractor receives
    dL_LC/dh + reverse(dL_DC/dh).
    """
    h, tape_e = mlp_forward(E, x, record=True)
    lc_logits, tape_lc = mlp_forward(C_LC, h, record=True)
    dc_logits, tape_dc = mlp_forward(C_DC, grl_forward(h), record=True)
    l_lc, g_lc = cross_entropy(lc_logits, y)
    l_dc, g_dc = cross_entropy(dc_logits, s)
    if not (np.isfinite(l_lc) and np.isfinite(l_dc)):
        raise NumericError(f"non-finite phase-1 loss (L_LC={l_lc}, L_DC={l_dc})")
    grad_lc, dh = mlp_backward(C_LC, tape_lc, g_lc)
    grad_dc, dh_dc = mlp_backward(C_DC, tape_dc, g_dc)
    if couple_domain and grl_lambda > 0:
        dh = dh + grad_reverse(dh_dc, grl_lambda)
    grad_e, _ = mlp_backward(E, tape_e, dh)
    opt_e, opt_lc, opt_dc = opts
    opt_lc.step(C_LC, grad_lc)
    opt_dc.step(C_DC, grad_dc)
    opt_e.step(E, grad_e)
    hits_lc = int(np.sum(np.argmax(lc_logits, axis=1) == y))
    hits_dc = int(np.sum(np.argmax(dc_logits, axis=1) == s))
    return l_lc, l_dc, hits_lc, hits_dc


def train_content(cohort: Cohort, hyper: Phase1Hyper | None = None, couple_domain: bool = True,
                  log_every: int = 0) -> ContentModel:
    """Train E, C_LC and C_DC on every observed (subject, modality) vector.

    ``couple_domain=False`` trains C_DC alongside but never lets its
    gradient reach E (used to check the reversal path).
    """
    hyper = hyper or Phase1Hyper()
    hyper.validate()
    if len(cohort) == 0:
        raise ValueError("empty cohort")
    X, _, mods, ys = cohort.present_pairs()
    for s, name in enumerate(cohort.modalities):
        if not np.any(mods == s):
            raise ValueError(f"modality {name!r} has no observed samples")
    if cohort.standardization is None:
        log.warning("training on a cohort without recorded standardization")

    rng = np.random.default_rng(hyper.seed)
    E, C_LC, C_DC = build_content_model(cohort.roi_count, cohort.n_modalities, cohort.n_classes, hyper, rng)
    opts = tuple(AdamW(lr=hyper.lr, weight_decay=hyper.weight_decay) for _ in range(3))
    n = X.shape[0]
    bs = n if hyper.batch_size == 0 else min(hyper.batch_size, n)
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        tot_lc = tot_dc = 0.0
        hits_lc = hits_dc = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            l_lc, l_dc, h_lc, h_dc = phase1_step(
                E, C_LC, C_DC, opts, X[idx], ys[idx], mods[idx], hyper.grl_lambda, couple_domain
            )
            tot_lc += l_lc * idx.size
            tot_dc += l_dc * idx.size
            hits_lc += h_lc
            hits_dc += h_dc
        entry = {"epoch": epoch, "L_LC": tot_lc / n, "L_DC": tot_dc / n,
                 "label_acc": hits_lc / n, "domain_acc": hits_dc / n}
        history.append(entry)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("phase1 epoch %d: %s", epoch + 1, entry)
    for net in (E, C_LC, C_DC):
        if not net.is_finite():
            raise NumericError("phase-1 parameters became non-finite")
    return ContentModel(E, C_LC, C_DC, hyper.grl_lambda, list(cohort.modalities), list(cohort.labels),
                        asdict(hyper), history)


def embed(model: ContentModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.roi_count:
        raise ShapeError(f"feature vector length {x.shape[-1]} != {model.roi_count}")
    return mlp_forward(model.E, x)


def predict_heads(model: ContentModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = embed(model, X)
    return np.argmax(mlp_forward(model.C_LC, h), axis=-1), np.argmax(mlp_forward(model.C_DC, h), axis=-1)


def confusion_matrix(true: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, s_true, s_pred, n_classes: int) -> dict:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    s_true, s_pred = np.asarray(s_true), np.asarray(s_pred)
    n = y_true.size
    return {
        "label_acc": float(np.sum(y_true == y_pred) / n) if n else 0.0,
        "domain_acc": float(np.sum(s_true == s_pred) / n) if n else 0.0,
        "confusion": confusion_matrix(y_true, y_pred, n_classes).tolist(),
        "n": int(n),
    }


def phase1_metrics(model: ContentModel, cohort_holdout: Cohort) -> dict:
    """Label/domain accuracy of the trained heads on every observed vector of a held-out cohort."""
    X, _, mods, ys = cohort_holdout.present_pairs()
    y_pred, s_pred = predict_heads(model, X)
    return metrics_from_predictions(ys, y_pred, mods, s_pred, cohort_holdout.n_classes)
