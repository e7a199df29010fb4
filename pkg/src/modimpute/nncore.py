"""Dense MLP engine with hand-written backprop, GAN/DANN losses and AdamW.

Everything runs in float64. Inputs may be a single vector ``(d,)`` or a
batch ``(B, d)``; batched gradients are summed over rows, so callers that
want a mean loss scale ``output_grad`` by ``1/B`` themselves.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SCHEMA_VERSION = 1
PROB_EPS = 1e-7

HIDDEN_ACTIVATIONS = ("leaky_relu", "relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid", "softmax_logits", "tanh")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class MlpParams:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "leaky_relu"
    output_activation: str = "linear"
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(int(d) < 1 for d in self.layer_dims):
            raise ShapeError(f"bad layer_dims {self.layer_dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError("weights/biases count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != want or b.shape != (want[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {want}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def tensors(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
            self.leaky_slope,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "layer_dims": list(self.layer_dims),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "leaky_slope": self.leaky_slope,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
        dims = [int(x) for x in d["layer_dims"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(dims[i + 1], dims[i])
            for i, w in enumerate(d["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return cls(dims, weights, biases, d["hidden_activation"], d["output_activation"],
                   float(d.get("leaky_slope", 0.01)))


def init_mlp(
    layer_dims: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "leaky_relu",
    output_activation: str = "linear",
    leaky_slope: float = 0.01,
) -> MlpParams:
    # Kaiming-uniform on fan-in for weights, zero biases
    dims = [int(d) for d in layer_dims]
    gain = math.sqrt(2.0 / (1.0 + leaky_slope**2)) if hidden_activation != "tanh" else 5.0 / 3.0
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = gain * math.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases, hidden_activation, output_activation, leaky_slope)


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        list(params.layer_dims),
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        params.hidden_activation,
        params.output_activation,
        params.leaky_slope,
    )


# --- activations -----------------------------------------------------------

def _hidden(name: str, z: np.ndarray, slope: float) -> np.ndarray:
    if name == "leaky_relu":
        return np.where(z > 0, z, slope * z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _hidden_grad(name: str, z: np.ndarray, a: np.ndarray, slope: float) -> np.ndarray:
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, slope)
    if name == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --- forward / backward ----------------------------------------------------

@dataclass
class GradTape:
    """Cached layer inputs and pre-activations from one recorded forward pass."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    output: np.ndarray
    squeeze: bool
    layer_dims: tuple[int, ...]
    consumed: bool = field(default=False)


def mlp_forward(params: MlpParams, x, record: bool = False):
    """Run the network. Returns ``output`` or ``(output, tape)`` when ``record``."""
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {np.shape(x)} does not match input dim {params.in_dim}")
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite input to mlp_forward")
    inputs, pre = [], []
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if record:
            inputs.append(a)
        z = a @ w.T + b
        if record:
            pre.append(z)
        if i < last:
            a = _hidden(params.hidden_activation, z, params.leaky_slope)
        elif params.output_activation == "sigmoid":
            a = sigmoid(z)
        elif params.output_activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
    out = a[0] if squeeze else a
    if not record:
        return out
    return out, GradTape(inputs, pre, a, squeeze, tuple(params.layer_dims))


def mlp_backward(params: MlpParams, tape: GradTape, output_grad, wrt_logits: bool = False):
    """Backprop ``output_grad`` (dL/d output) through the recorded pass.

    With ``wrt_logits`` the gradient is taken to be dL/d(last pre-activation)
    and the output activation's derivative is skipped.
    Returns ``(param_grads, input_grad)`` where ``param_grads`` is an
    :class:`MlpParams` holding dL/dW and dL/db.
    """
    if tape.consumed:
        raise RuntimeError("GradTape already consumed by a backward pass")
    if tape.layer_dims != tuple(params.layer_dims):
        raise ShapeError("tape was recorded with a different architecture")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.output.shape:
        raise ShapeError(f"output_grad shape {np.shape(output_grad)} vs output {tape.output.shape}")
    tape.consumed = True
    last = params.n_layers - 1
    if wrt_logits:
        pass
    elif params.output_activation == "sigmoid":
        g = g * tape.output * (1.0 - tape.output)
    elif params.output_activation == "tanh":
        g = g * (1.0 - tape.output * tape.output)
    gw: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * params.n_layers  # type: ignore[list-item]
    for i in range(last, -1, -1):
        if i < last:
            z = tape.pre[i]
            g = g * _hidden_grad(params.hidden_activation, z, tape.inputs[i + 1], params.leaky_slope)
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grads = MlpParams(list(params.layer_dims), gw, gb, params.hidden_activation,
                      params.output_activation, params.leaky_slope)
    return grads, (g[0] if tape.squeeze else g)


def grl_forward(x) -> np.ndarray:
    """Forward pass of the gradient-reversal layer: the input itself, untouched."""
    return x


def grad_reverse(input_grad, lam: float) -> np.ndarray:
    """Backward rule of the gradient-reversal layer (its forward is the identity)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return -lam * np.asarray(input_grad, dtype=np.float64)


def add_grads(a: MlpParams, b: MlpParams, scale_a: float = 1.0, scale_b: float = 1.0) -> MlpParams:
    return MlpParams(
        list(a.layer_dims),
        [scale_a * x + scale_b * y for x, y in zip(a.weights, b.weights)],
        [scale_a * x + scale_b * y for x, y in zip(a.biases, b.biases)],
        a.hidden_activation,
        a.output_activation,
        a.leaky_slope,
    )


# --- losses ----------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits, label):
    """Softmax cross-entropy.

    A single logit vector with an integer label gives ``(loss, grad)``.
    A batch ``(B, C)`` with ``B`` labels gives the mean loss and the
    gradient of that mean.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("empty logits")
    single = z.ndim == 1
    if single:
        z = z[None, :]
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ShapeError("label count does not match logits batch")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ShapeError(f"label out of range for {z.shape[1]} classes")
    lsm = log_softmax(z)
    rows = np.arange(z.shape[0])
    losses = -lsm[rows, y]
    grad = np.exp(lsm)
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / z.shape[0]


def _clamp_prob(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


def gan_discriminator_loss(d_real, d_fake):
    """``-log D(x) - log(1 - D(G(.)))`` with probabilities clamped to [eps, 1-eps].

    Scalars give ``(loss, (g_real, g_fake))``; arrays give the batch mean and
    gradients of that mean.
    """
    r, f = _clamp_prob(d_real), _clamp_prob(d_fake)
    if np.ndim(d_real) == 0 and np.ndim(d_fake) == 0:
        return float(-np.log(r) - np.log1p(-f)), (float(-1.0 / r), float(1.0 / (1.0 - f)))
    loss = np.mean(-np.log(r)) + np.mean(-np.log1p(-f))
    return float(loss), (-1.0 / r / r.size, 1.0 / (1.0 - f) / f.size)


def gan_generator_loss(d_fake):
    """Non-saturating generator loss ``-log D(G(.))``."""
    f = _clamp_prob(d_fake)
    if np.ndim(d_fake) == 0:
        return float(-np.log(f)), float(-1.0 / f)
    return float(np.mean(-np.log(f))), -1.0 / f / f.size


def gan_discriminator_logit_grads(z_real, z_fake):
    """Gradients of the batch-mean discriminator loss w.r.t. D's logits.

    These are exact for the unclamped loss and stay informative when D
    saturates, where the gradient through the clamp would be zero.
    """
    zr = np.asarray(z_real, dtype=np.float64)
    zf = np.asarray(z_fake, dtype=np.float64)
    return -sigmoid(-zr) / zr.size, sigmoid(zf) / zf.size


def gan_generator_logit_grad(z_fake):
    """Gradient of the batch-mean ``-log sigmoid(z)`` w.r.t. the fake logits."""
    zf = np.asarray(z_fake, dtype=np.float64)
    return -sigmoid(-zf) / zf.size


def wgan_critic_loss(d_real_score, d_fake_score) -> float:
    return float(np.mean(d_fake_score) - np.mean(d_real_score))


def clip_weights(params: MlpParams, c: float) -> MlpParams:
    """Clamp every weight and bias in place to ``[-c, c]``; returns ``params``."""
    for t in params.tensors():
        np.clip(t, -c, c, out=t)
    return params


# --- optimizer -------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: list[np.ndarray] | None = None
    second_moment: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ValueError("invalid AdamW hyperparameters")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("invalid AdamW hyperparameters")

    def step(self, params: MlpParams, grads: MlpParams) -> MlpParams:
        """Decoupled-weight-decay update, applied to ``params`` in place."""
        ps, gs = params.tensors(), grads.tensors()
        if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
            raise ShapeError("gradient shapes do not match parameters")
        if self.first_moment is None:
            self.first_moment = [np.zeros_like(p) for p in ps]
            self.second_moment = [np.zeros_like(p) for p in ps]
        elif any(m.shape != p.shape for m, p in zip(self.first_moment, ps)):
            raise ShapeError("optimizer state does not match parameters")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(ps, gs, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p
            p -= self.lr * update
        return params

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay, "step_count": self.step_count,
            "first_moment": None if self.first_moment is None else [m.ravel().tolist() for m in self.first_moment],
            "second_moment": None if self.second_moment is None else [v.ravel().tolist() for v in self.second_moment],
        }

    @classmethod
    def from_state_dict(cls, d: dict, params: MlpParams) -> "AdamW":
        opt = cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["weight_decay"], int(d["step_count"]))
        if d.get("first_moment") is not None:
            shapes = [p.shape for p in params.tensors()]
            opt.first_moment = [np.asarray(m, dtype=np.float64).reshape(s) for m, s in zip(d["first_moment"], shapes)]
            opt.second_moment = [np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(d["second_moment"], shapes)]
        return opt


# --- checkpoints -----------------------------------------------------------

def dump_json(obj, path) -> None:
    """Write JSON deterministically (sorted keys, repr floats)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def save_params(params: MlpParams, path, optimizer: AdamW | None = None, **extra) -> None:
    doc = params.to_dict()
    if optimizer is not None:
        doc["optimizer_state"] = optimizer.state_dict()
    doc.update(extra)
    dump_json(doc, path)


def load_params(path) -> MlpParams:
    return MlpParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- finite-difference checking --------------------------------------------

def numeric_grad(f: Callable[[], float], tensor: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``tensor`` (perturbed in place)."""
    out = np.zeros_like(tensor)
    flat, gflat = tensor.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return out


def max_relative_error(analytic, numeric, abs_floor: float = 1e-8) -> float:
    """Largest ``|a-n| / max(|a|,|n|)`` over components whose absolute gap exceeds ``abs_floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    gap = np.abs(a - n)
    mask = gap > abs_floor
    if not np.any(mask):
        return 0.0
    return float(np.max(gap[mask] / np.maximum(np.abs(a[mask]), np.abs(n[mask]))))
