"""Style injection: one generator/discriminator pair per target modality.

The extractor from phase 1 stays frozen. A generator maps embeddings of
any observed vector to the target modality; its objective mixes the
non-saturating GAN loss with an embedding-preservation term.
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
    add_grads,
    dump_json,
    gan_discriminator_logit_grads,
    gan_discriminator_loss,
    gan_generator_logit_grad,
    gan_generator_loss,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from .phase1 import ContentModel

log = logging.getLogger(__name__)


@dataclass
class Phase2Hyper:
    epochs: int = 30000
    lr_G: float = 1e-3
    lr_D: float = 1e-5
    weight_decay: float = 0.01
    alpha: float = 1.0
    beta: float = 100.0
    update_ratio: int = 9
    ratio_favors: str = "G"  # "G": update_ratio G-steps per D-step; "D": the inverse
    batch_size: int = 64
    hidden_dim: int = 256
    generator_layers: int = 13
    discriminator_layers: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.lr_G <= 0 or self.lr_D <= 0 or self.batch_size < 1:
            raise ValueError("Phase2Hyper: epochs, learning rates and batch_size must be positive")
        if self.alpha < 0 or self.beta < 0 or self.weight_decay < 0:
            raise ValueError("Phase2Hyper: alpha, beta and weight_decay must be non-negative")
        if self.update_ratio < 1 or self.ratio_favors not in ("G", "D"):
            raise ValueError("Phase2Hyper: update_ratio >= 1 and ratio_favors in {'G', 'D'}")
        if min(self.hidden_dim, self.generator_layers, self.discriminator_layers) < 1:
            raise ValueError("Phase2Hyper: widths and layer counts must be positive")

    def schedule(self) -> list[str]:
        """Which network each inner step of one epoch updates."""
        major = self.ratio_favors
        minor = "D" if major == "G" else "G"
        return [major] * self.update_ratio + [minor]


@dataclass
class StylePair:
    target_modality: str
    G: MlpParams
    D: MlpParams
    hyper: dict = field(default_factory=dict)
    training_log: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": "style_pair",
            "target_modality": self.target_modality,
            "networks": {"G": self.G.to_dict(), "D": self.D.to_dict()},
            "hyper": self.hyper,
            "training_log": self.training_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StylePair":
        nets = d["networks"]
        return cls(d["target_modality"], MlpParams.from_dict(nets["G"]), MlpParams.from_dict(nets["D"]),
                   d.get("hyper", {}), d.get("training_log", []))

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "StylePair":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def style_filename(modality: str) -> str:
    return f"style_{modality}.json"


def content_loss(content_model: ContentModel, x_src, x_gen) -> float:
    x_src = np.asarray(x_src, dtype=np.float64)
    x_gen = np.asarray(x_gen, dtype=np.float64)
    if x_src.shape != x_gen.shape or x_src.shape[-1] != content_model.roi_count:
        raise ShapeError("content_loss needs two vectors of the cohort's ROI length")
    diff = mlp_forward(content_model.E, x_src) - mlp_forward(content_model.E, x_gen)
    return float(np.linalg.norm(diff))


def total_generator_loss(l_g: float, l_content: float, alpha: float, beta: float) -> float:
    return alpha * l_g + beta * l_content


def _content_term(E: MlpParams, e_src: np.ndarray, x_gen: np.ndarray):
    """Mean over rows of ||e_src - E(x_gen)||_2 and its gradient w.r.t. ``x_gen``."""
    e_gen, tape = mlp_forward(E, x_gen, record=True)
    diff = e_gen - e_src
    norms = np.linalg.norm(diff, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    g = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0) / x_gen.shape[0]
    _, dx = mlp_backward(E, tape, g)
    return float(norms.mean()), dx


def generator_gradients(G: MlpParams, D: MlpParams, E: MlpParams, e_src: np.ndarray,
                        alpha: float, beta: float):
    """Batch losses and the gradient of ``alpha*L_G + beta*L_content`` w.r.t. G.

    D and E only pass gradients through; their parameters are untouched.
    Returns ``(l_g, l_content, grad_G)``. The adversarial part is taken
    through D's logit so a saturated D still passes gradient to G.
    """
    x_gen, tape_g = mlp_forward(G, e_src, record=True)
    d_fake, tape_d = mlp_forward(D, x_gen, record=True)
    l_g, _ = gan_generator_loss(d_fake[:, 0])
    g_logit = gan_generator_logit_grad(tape_d.pre[-1][:, 0])
    _, dx_adv = mlp_backward(D, tape_d, g_logit[:, None], wrt_logits=True)
    l_c, dx_c = _content_term(E, e_src, x_gen)
    grad_g, _ = mlp_backward(G, tape_g, alpha * dx_adv + beta * dx_c)
    return l_g, l_c, grad_g


def discriminator_step(G: MlpParams, D: MlpParams, opt: AdamW, e_src: np.ndarray, x_real: np.ndarray) -> float:
    x_fake = mlp_forward(G, e_src)
    d_real, tape_r = mlp_forward(D, x_real, record=True)
    d_fake, tape_f = mlp_forward(D, x_fake, record=True)
    loss, _ = gan_discriminator_loss(d_real[:, 0], d_fake[:, 0])
    g_r, g_f = gan_discriminator_logit_grads(tape_r.pre[-1][:, 0], tape_f.pre[-1][:, 0])
    grad_r, _ = mlp_backward(D, tape_r, g_r[:, None], wrt_logits=True)
    grad_f, _ = mlp_backward(D, tape_f, g_f[:, None], wrt_logits=True)
    opt.step(D, add_grads(grad_r, grad_f))
    return loss


def source_pool(cohort: Cohort) -> np.ndarray:
    """Every observed vector of every modality, in cohort order."""
    return cohort.present_pairs()[0]


def train_style(cohort: Cohort, content_model: ContentModel, target, hyper: Phase2Hyper | None = None,
                log_every: int = 0) -> StylePair:
    hyper = hyper or Phase2Hyper()
    hyper.validate()
    t = target if isinstance(target, int) else cohort.modality_index(target)
    name = cohort.modalities[t]
    real = cohort.present_pairs(modality=t)[0]
    if real.shape[0] == 0:
        raise ValueError(f"modality {name!r} has no observed samples")
    if content_model.roi_count != cohort.roi_count:
        raise ShapeError("content model and cohort disagree on ROI count")
    E = content_model.E
    pool = mlp_forward(E, source_pool(cohort))

    rng = np.random.default_rng([hyper.seed, t])
    h = hyper.hidden_dim
    G = init_mlp([content_model.embedding_dim] + [h] * (hyper.generator_layers - 1) + [cohort.roi_count], rng)
    D = init_mlp([cohort.roi_count] + [h] * (hyper.discriminator_layers - 1) + [1], rng,
                 output_activation="sigmoid")
    opt_g = AdamW(lr=hyper.lr_G, weight_decay=hyper.weight_decay)
    opt_d = AdamW(lr=hyper.lr_D, weight_decay=hyper.weight_decay)
    null_objective = hyper.alpha == 0 and hyper.beta == 0
    bs = hyper.batch_size
    history = []
    for epoch in range(hyper.epochs):
        sums = {"L_G": 0.0, "L_content": 0.0, "L_D": 0.0}
        counts = {"G": 0, "D": 0}
        for which in hyper.schedule():
            e_src = pool[rng.integers(0, pool.shape[0], bs)]
            if which == "G":
                l_g, l_c, grad_g = generator_gradients(G, D, E, e_src, hyper.alpha, hyper.beta)
                if not (np.isfinite(l_g) and np.isfinite(l_c)):
                    raise NumericError(f"non-finite phase-2 loss for {name!r} (L_G={l_g}, L_content={l_c})")
                if not null_objective:
                    opt_g.step(G, grad_g)
                sums["L_G"] += l_g
                sums["L_content"] += l_c
            else:
                x_real = real[rng.integers(0, real.shape[0], bs)]
                l_d = discriminator_step(G, D, opt_d, e_src, x_real)
                if not np.isfinite(l_d):
                    raise NumericError(f"non-finite discriminator loss for {name!r}")
                sums["L_D"] += l_d
            counts[which] += 1
        entry = {
            "epoch": epoch,
            "L_G": sums["L_G"] / counts["G"],
            "L_content": sums["L_content"] / counts["G"],
            "L_D": sums["L_D"] / counts["D"],
        }
        entry["L_total"] = total_generator_loss(entry["L_G"], entry["L_content"], hyper.alpha, hyper.beta)
        history.append(entry)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("phase2[%s] epoch %d: %s", name, epoch + 1, entry)
    if not (G.is_finite() and D.is_finite()):
        raise NumericError(f"phase-2 parameters for {name!r} became non-finite")
    return StylePair(name, G, D, asdict(hyper), history)


def train_all_styles(cohort: Cohort, content_model: ContentModel, hyper: Phase2Hyper | None = None,
                     log_every: int = 0) -> dict[str, StylePair]:
    return {m: train_style(cohort, content_model, m, hyper, log_every) for m in cohort.modalities}


def generate(content_model: ContentModel, pair: StylePair, x_source) -> np.ndarray:
    return mlp_forward(pair.G, mlp_forward(content_model.E, x_source))


def discriminator_accuracy(content_model: ContentModel, pair: StylePair, x_real: np.ndarray,
                           x_source: np.ndarray) -> float:
    """Fraction of real vectors scored > 0.5 and generated ones scored < 0.5."""
    d_real = mlp_forward(pair.D, x_real)[:, 0]
    d_fake = mlp_forward(pair.D, generate(content_model, pair, x_source))[:, 0]
    hits = np.sum(d_real > 0.5) + np.sum(d_fake < 0.5)
    return float(hits / (d_real.size + d_fake.size))
