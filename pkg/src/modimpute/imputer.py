"""Cohort completion: the shared-content generators plus baseline imputers.

Every imputer returns ``(completed_cohort, provenance)`` where provenance
is a list of ``{subject_id, modality, strategy, source_modality}`` rows,
one per filled cell. Observed cells are never rewritten.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Cohort, DataError
from .evaluate import GeneratedSet
from .nncore import (
    AdamW,
    MlpParams,
    ShapeError,
    add_grads,
    clip_weights,
    dump_json,
    gan_discriminator_logit_grads,
    gan_discriminator_loss,
    gan_generator_logit_grad,
    gan_generator_loss,
    init_mlp,
    mlp_backward,
    mlp_forward,
    wgan_critic_loss,
)
from .phase1 import ContentModel
from .phase2 import Phase2Hyper, StylePair

PROVENANCE_HEADER = ["subject_id", "modality", "strategy", "source_modality"]

# generator callback: (source index, target index, X_source (n, P), labels (n,)) -> (n, P)
GeneratorFn = Callable[[int, int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ImputationPlan:
    strategy: str = "first_available"  # or "average"
    priority: list[str] = field(default_factory=list)

    def resolve(self, cohort: Cohort) -> list[int]:
        if self.strategy not in ("first_available", "average"):
            raise ValueError(f"unknown imputation strategy {self.strategy!r}")
        order = self.priority or list(cohort.modalities)
        if sorted(order) != sorted(cohort.modalities):
            raise ValueError("priority must be a permutation of the cohort modalities")
        return [cohort.modality_index(m) for m in order]


def impute_one(content_model: ContentModel, style_pair: StylePair, x_source) -> np.ndarray:
    x = np.asarray(x_source, dtype=np.float64)
    if x.shape[-1] != content_model.roi_count:
        raise ShapeError(f"source vector length {x.shape[-1]} != {content_model.roi_count}")
    return mlp_forward(style_pair.G, mlp_forward(content_model.E, x))


def shared_content_generator(content_model: ContentModel, style_pairs: dict[str, StylePair],
                             modalities: Sequence[str]) -> GeneratorFn:
    def gen(s: int, t: int, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        name = modalities[t]
        if name not in style_pairs:
            raise KeyError(f"no style checkpoint for modality {name!r}")
        return impute_one(content_model, style_pairs[name], X)
    return gen


def impute_with(cohort: Cohort, gen: GeneratorFn, plan: ImputationPlan | None = None,
                method: str = "shared_content") -> tuple[Cohort, list[dict]]:
    """Fill every missing (subject, modality) cell using ``gen``.

    Generation is batched per (source, target) so the result does not
    depend on subject order.
    """
    plan = plan or ImputationPlan()
    order = plan.resolve(cohort)
    out = cohort.copy()
    jobs: dict[tuple[int, int], list[int]] = {}
    sources_of: dict[tuple[int, int], list[int]] = {}
    for k, rec in enumerate(cohort.subjects):
        observed = rec.observed()
        if not observed:
            raise DataError(f"subject {rec.subject_id!r} has no observed modality to impute from")
        for t, f in enumerate(rec.features):
            if f is not None:
                continue
            if plan.strategy == "first_available":
                srcs = [next(s for s in order if s in observed)]
            else:
                srcs = [s for s in order if s in observed]
            sources_of[(k, t)] = srcs
            for s in srcs:
                jobs.setdefault((s, t), []).append(k)
    generated: dict[tuple[int, int, int], np.ndarray] = {}
    for (s, t), ks in sorted(jobs.items()):
        X = np.array([cohort.subjects[k].features[s] for k in ks])
        y = np.array([cohort.subjects[k].label for k in ks], dtype=np.int64)
        Y = gen(s, t, X, y)
        for k, row in zip(ks, Y):
            generated[(k, t, s)] = row
    provenance = []
    for (k, t), srcs in sorted(sources_of.items()):
        vecs = [generated[(k, t, s)] for s in srcs]
        value = vecs[0].copy() if len(vecs) == 1 else np.mean(vecs, axis=0)
        if not np.all(np.isfinite(value)):
            raise ArithmeticError(f"non-finite imputation for subject {cohort.subjects[k].subject_id!r}")
        out.subjects[k].features[t] = value
        provenance.append({
            "subject_id": cohort.subjects[k].subject_id,
            "modality": cohort.modalities[t],
            "strategy": f"{method}:{plan.strategy}",
            "source_modality": "|".join(cohort.modalities[s] for s in srcs),
        })
    return out, provenance


def impute_cohort(cohort: Cohort, content_model: ContentModel, style_pairs: dict[str, StylePair],
                  plan: ImputationPlan | None = None) -> tuple[Cohort, list[dict]]:
    return impute_with(cohort, shared_content_generator(content_model, style_pairs, cohort.modalities), plan)


def generate_all_pairs(cohort: Cohort, gen: GeneratorFn) -> GeneratedSet:
    """Translate every observed source vector into every target modality (evaluation set)."""
    out = GeneratedSet()
    S = cohort.n_modalities
    for s in range(S):
        X, si, _, ys = cohort.present_pairs(modality=s)
        if X.shape[0] == 0:
            continue
        for t in range(S):
            Y = gen(s, t, X, ys)
            for k, row in zip(si, Y):
                out.add(cohort.subjects[k].subject_id, cohort.modalities[s], cohort.modalities[t], row)
    return out


# --- class-mean baseline ------------------------------------------------------

def class_means(cohort: Cohort) -> np.ndarray:
    """``(C, S, P)`` mean of observed vectors per (class, modality)."""
    C, S, P = cohort.n_classes, cohort.n_modalities, cohort.roi_count
    sums = np.zeros((C, S, P))
    counts = np.zeros((C, S))
    for rec in cohort.subjects:
        for s, f in enumerate(rec.features):
            if f is not None:
                sums[rec.label, s] += f
                counts[rec.label, s] += 1
    return sums, counts


def mean_impute(cohort: Cohort, fit_on: Cohort | None = None) -> tuple[Cohort, list[dict]]:
    """Fill missing cells with the class-specific mean of that modality (fitted on ``fit_on``)."""
    sums, counts = class_means(fit_on if fit_on is not None else cohort)
    out = cohort.copy()
    provenance = []
    for rec in out.subjects:
        for t, f in enumerate(rec.features):
            if f is not None:
                continue
            n = counts[rec.label, t]
            if n == 0:
                raise DataError(f"no observed {cohort.modalities[t]!r} values for class "
                                f"{cohort.labels[rec.label]!r} to average")
            rec.features[t] = sums[rec.label, t] / n
            provenance.append({"subject_id": rec.subject_id, "modality": cohort.modalities[t],
                               "strategy": "class_mean", "source_modality": ""})
    return out, provenance


# --- pairwise GAN baselines ---------------------------------------------------

WGAN_CLIP = 0.01
WGAN_CRITIC_STEPS = 5


@dataclass
class PairwiseGenerator:
    source: str
    target: str
    kind: str  # "cgan" or "wgan"
    n_classes: int
    G: MlpParams
    D: MlpParams
    training_log: list[dict] = field(default_factory=list)

    def generate(self, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return mlp_forward(self.G, self._input(X, labels))

    def _input(self, X, labels):
        if self.kind != "cgan":
            return X
        return np.hstack([X, np.eye(self.n_classes)[labels]])

    def to_dict(self) -> dict:
        return {"schema_version": 1, "kind": f"pairwise_{self.kind}", "source": self.source,
                "target": self.target, "n_classes": self.n_classes,
                "networks": {"G": self.G.to_dict(), "D": self.D.to_dict()},
                "training_log": self.training_log}

    @classmethod
    def from_dict(cls, d: dict) -> "PairwiseGenerator":
        return cls(d["source"], d["target"], d["kind"].removeprefix("pairwise_"), int(d["n_classes"]),
                   MlpParams.from_dict(d["networks"]["G"]), MlpParams.from_dict(d["networks"]["D"]),
                   d.get("training_log", []))


def train_pairwise_baseline(cohort: Cohort, source, target, kind: str = "cgan",
                            hyper: Phase2Hyper | None = None) -> PairwiseGenerator:
    """One source->target GAN with the same layer counts, widths and epochs as the style pairs.

    Batches are drawn from subjects observing both modalities when there
    are any; otherwise source and target marginals are sampled
    independently.
    ``cgan`` conditions G and D on the one-hot label and uses the standard
    cross-entropy GAN losses with the configured G:D schedule; ``wgan``
    uses a linear critic with weight clipping at 0.01 and 5 critic steps
    per generator step.
    """
    if kind not in ("cgan", "wgan"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    hyper = hyper or Phase2Hyper()
    hyper.validate()
    s = source if isinstance(source, int) else cohort.modality_index(source)
    t = target if isinstance(target, int) else cohort.modality_index(target)
    Xs, si_s, _, ys_s = cohort.present_pairs(modality=s)
    Xt, si_t, _, ys_t = cohort.present_pairs(modality=t)
    if Xs.shape[0] == 0 or Xt.shape[0] == 0:
        raise ValueError(f"empty modality for pair {cohort.modalities[s]!r}->{cohort.modalities[t]!r}")
    pos_t = {int(k): i for i, k in enumerate(si_t)}
    paired = [(i, pos_t[int(k)]) for i, k in enumerate(si_s) if int(k) in pos_t]

    C, P, h = cohort.n_classes, cohort.roi_count, hyper.hidden_dim
    cond = C if kind == "cgan" else 0
    rng = np.random.default_rng([hyper.seed, s, t, 1 if kind == "cgan" else 2])
    G = init_mlp([P + cond] + [h] * (hyper.generator_layers - 1) + [P], rng)
    D = init_mlp([P + cond] + [h] * (hyper.discriminator_layers - 1) + [1], rng,
                 output_activation="sigmoid" if kind == "cgan" else "linear")
    if kind == "wgan":
        clip_weights(D, WGAN_CLIP)
    model = PairwiseGenerator(cohort.modalities[s], cohort.modalities[t], kind, C, G, D)
    opt_g = AdamW(lr=hyper.lr_G, weight_decay=hyper.weight_decay)
    opt_d = AdamW(lr=hyper.lr_D, weight_decay=hyper.weight_decay)
    eye = np.eye(C)
    bs = hyper.batch_size
    schedule = hyper.schedule() if kind == "cgan" else ["D"] * WGAN_CRITIC_STEPS + ["G"]

    def batch():
        if paired:
            picks = rng.integers(0, len(paired), bs)
            i_s = np.array([paired[p][0] for p in picks])
            i_t = np.array([paired[p][1] for p in picks])
        else:
            i_s = rng.integers(0, Xs.shape[0], bs)
            i_t = rng.integers(0, Xt.shape[0], bs)
        return Xs[i_s], ys_s[i_s], Xt[i_t], ys_t[i_t]

    def d_in(X, y):
        return np.hstack([X, eye[y]]) if cond else X

    for epoch in range(hyper.epochs):
        sums = {"L_G": 0.0, "L_D": 0.0}
        counts = {"G": 0, "D": 0}
        for which in schedule:
            xs, ys, xt, yt = batch()
            if which == "D":
                fake = model.generate(xs, ys)
                d_real, tape_r = mlp_forward(D, d_in(xt, yt), record=True)
                d_fake, tape_f = mlp_forward(D, d_in(fake, ys), record=True)
                if kind == "cgan":
                    loss, _ = gan_discriminator_loss(d_real[:, 0], d_fake[:, 0])
                    g_r, g_f = gan_discriminator_logit_grads(tape_r.pre[-1][:, 0], tape_f.pre[-1][:, 0])
                else:
                    loss = wgan_critic_loss(d_real[:, 0], d_fake[:, 0])
                    g_r = np.full(bs, -1.0 / bs)
                    g_f = np.full(bs, 1.0 / bs)
                # logit gradients for cgan; the wgan critic output is already linear
                grad_r, _ = mlp_backward(D, tape_r, g_r[:, None], wrt_logits=True)
                grad_f, _ = mlp_backward(D, tape_f, g_f[:, None], wrt_logits=True)
                opt_d.step(D, add_grads(grad_r, grad_f))
                if kind == "wgan":
                    clip_weights(D, WGAN_CLIP)
                sums["L_D"] += loss
            else:
                fake, tape_g = mlp_forward(G, model._input(xs, ys), record=True)
                score, tape_d = mlp_forward(D, d_in(fake, ys), record=True)
                if kind == "cgan":
                    loss, _ = gan_generator_loss(score[:, 0])
                    g = gan_generator_logit_grad(tape_d.pre[-1][:, 0])
                else:
                    loss = -float(np.mean(score[:, 0]))
                    g = np.full(bs, -1.0 / bs)
                _, dx = mlp_backward(D, tape_d, g[:, None], wrt_logits=True)
                grad_g, _ = mlp_backward(G, tape_g, dx[:, :P])
                opt_g.step(G, grad_g)
                sums["L_G"] += loss
            counts[which] += 1
        model.training_log.append({"epoch": epoch, "L_G": sums["L_G"] / counts["G"],
                                   "L_D": sums["L_D"] / counts["D"]})
    if not (G.is_finite() and D.is_finite()):
        raise ArithmeticError(f"pairwise {kind} {model.source}->{model.target} diverged")
    return model


@dataclass
class PairwiseModelSet:
    kind: str
    models: dict[tuple[str, str], PairwiseGenerator]

    @property
    def generator_count(self) -> int:
        return len(self.models)

    def generator_fn(self, modalities: Sequence[str]) -> GeneratorFn:
        def gen(s: int, t: int, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
            key = (modalities[s], modalities[t])
            if key not in self.models:
                raise KeyError(f"no pairwise model for {key[0]!r}->{key[1]!r}")
            return self.models[key].generate(X, labels)
        return gen

    def save(self, out_dir) -> None:
        for (s, t), m in self.models.items():
            dump_json(m.to_dict(), Path(out_dir) / f"{self.kind}_{s}_{t}.json")


def train_pairwise_set(cohort: Cohort, kind: str = "cgan", hyper: Phase2Hyper | None = None) -> PairwiseModelSet:
    """Every ordered (source, target) pair, identity pairs included: S**2 generators."""
    models = {}
    for s in cohort.modalities:
        for t in cohort.modalities:
            models[(s, t)] = train_pairwise_baseline(cohort, s, t, kind, hyper)
    return PairwiseModelSet(kind, models)


# --- provenance I/O -----------------------------------------------------------

def save_provenance(provenance: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=PROVENANCE_HEADER, lineterminator="\n")
        w.writeheader()
        for row in provenance:
            w.writerow({k: row[k] for k in PROVENANCE_HEADER})


def load_provenance(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
