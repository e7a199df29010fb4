"""Finite-difference checks of every network and loss used in training.

Architectures keep their layer counts but run at small widths so the
whole suite finishes in seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nncore import (
    cross_entropy,
    gan_discriminator_loss,
    gan_generator_loss,
    grad_reverse,
    init_mlp,
    max_relative_error,
    mlp_backward,
    mlp_forward,
    numeric_grad,
)
from .phase1 import Phase1Hyper, build_content_model
from .phase2 import _content_term, generator_gradients

TOLERANCE = 1e-4
KINK_MARGIN = 1e-4  # central differences are meaningless within a step of a leaky-ReLU kink


@dataclass
class GradcheckSizes:
    rois: int = 10
    hidden: int = 8
    embedding: int = 6
    modalities: int = 4
    classes: int = 3
    batch: int = 3
    generator_layers: int = 13
    discriminator_layers: int = 5


def _worst(params, grads, loss) -> float:
    return max(max_relative_error(g, numeric_grad(loss, p)) for p, g in zip(params.tensors(), grads.tensors()))


def _min_margin(chains) -> float:
    worst = np.inf
    for nets, x in chains:
        for net in nets:
            x, tape = mlp_forward(net, x, record=True)
            for pre in tape.pre[:-1]:
                worst = min(worst, float(np.abs(pre).min()))
    return worst


def _draw(seed: int, z: GradcheckSizes, max_tries: int = 1000):
    """Networks and a batch whose hidden pre-activations all keep clear of zero."""
    hyper = Phase1Hyper(embedding_dim=z.embedding, hidden_dim=z.hidden)
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        E, C_LC, C_DC = build_content_model(z.rois, z.modalities, z.classes, hyper, rng)
        G = init_mlp([z.embedding] + [z.hidden] * (z.generator_layers - 1) + [z.rois], rng)
        D = init_mlp([z.rois] + [z.hidden] * (z.discriminator_layers - 1) + [1], rng,
                     output_activation="sigmoid")
        x = rng.normal(size=(z.batch, z.rois))
        x_real = rng.normal(size=(z.batch, z.rois))
        chains = [((E, C_LC), x), ((E, C_DC), x), ((E, G, D), x), ((E, G, E), x), ((D,), x_real)]
        if _min_margin(chains) > KINK_MARGIN:
            return rng, E, C_LC, C_DC, G, D, x, x_real
    raise RuntimeError("could not draw a kink-free gradcheck configuration")


def run_gradcheck(seed: int = 0, sizes: GradcheckSizes | None = None) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per check."""
    z = sizes or GradcheckSizes()
    rng, E, C_LC, C_DC, G, D, x, x_real = _draw(seed, z)
    y = rng.integers(0, z.classes, z.batch)
    s = rng.integers(0, z.modalities, z.batch)
    lam = 0.7
    out: dict[str, float] = {}

    # phase 1: heads on their own losses, extractor on L_LC - lam * L_DC
    def l_lc():
        return cross_entropy(mlp_forward(C_LC, mlp_forward(E, x)), y)[0]

    def l_dc():
        return cross_entropy(mlp_forward(C_DC, mlp_forward(E, x)), s)[0]

    h, tape_e = mlp_forward(E, x, record=True)
    lc, tape_lc = mlp_forward(C_LC, h, record=True)
    dc, tape_dc = mlp_forward(C_DC, h, record=True)
    g_lc, dh = mlp_backward(C_LC, tape_lc, cross_entropy(lc, y)[1])
    g_dc, dh_dc = mlp_backward(C_DC, tape_dc, cross_entropy(dc, s)[1])
    g_e, _ = mlp_backward(E, tape_e, dh + grad_reverse(dh_dc, lam))
    out["C_LC/cross_entropy"] = _worst(C_LC, g_lc, l_lc)
    out["C_DC/cross_entropy"] = _worst(C_DC, g_dc, l_dc)
    out["E/label_minus_reversed_domain"] = _worst(E, g_e, lambda: l_lc() - lam * l_dc())

    # phase 2: discriminator loss, generator total loss and its parts
    e_src = mlp_forward(E, x)

    def l_d():
        fake = mlp_forward(G, e_src)
        return gan_discriminator_loss(mlp_forward(D, x_real)[:, 0], mlp_forward(D, fake)[:, 0])[0]

    fake = mlp_forward(G, e_src)
    d_real, tape_r = mlp_forward(D, x_real, record=True)
    d_fake, tape_f = mlp_forward(D, fake, record=True)
    _, (gr, gf) = gan_discriminator_loss(d_real[:, 0], d_fake[:, 0])
    grad_r, _ = mlp_backward(D, tape_r, gr[:, None])
    grad_f, _ = mlp_backward(D, tape_f, gf[:, None])
    out["D/gan_discriminator"] = max(
        max_relative_error(a + b, numeric_grad(l_d, p))
        for a, b, p in zip(grad_r.tensors(), grad_f.tensors(), D.tensors())
    )

    for name, alpha, beta in (("G/gan_generator", 1.0, 0.0), ("G/content", 0.0, 1.0), ("G/total", 1.0, 100.0)):
        def l_g(alpha=alpha, beta=beta):
            x_gen = mlp_forward(G, e_src)
            adv = gan_generator_loss(mlp_forward(D, x_gen)[:, 0])[0]
            return alpha * adv + beta * _content_term(E, e_src, x_gen)[0]

        _, _, grad_g = generator_gradients(G, D, E, e_src, alpha, beta)
        out[name] = _worst(G, grad_g, l_g)
    return out


def gradcheck_main(seed: int = 0) -> tuple[bool, dict[str, float], float]:
    t0 = time.perf_counter()
    errs = run_gradcheck(seed)
    elapsed = time.perf_counter() - t0
    return max(errs.values()) < TOLERANCE, errs, elapsed
