"""Minimal dense-network engine: forward, reverse-mode gradients, Adam.

Everything is float64 and purely functional; fixed seeds give bit-identical
training trajectories on one machine. Inputs may be a single vector or a
batch with a leading axis; parameter gradients are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    """Raised when a training signal (loss or gradient) goes non-finite."""


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _dsilu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


ACTIVATIONS = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64)),
    "silu": (_silu, _dsilu),
}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    activation: str = "silu"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError("need at least 2 positive layer widths")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list  # (fan_in, fan_out) per layer
    biases: list   # (fan_out,) per layer


def init_params(spec: MlpSpec) -> MlpParams:
    """Fan-in-scaled zero-mean normal weights, zero biases; seed-deterministic."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


def _as_batch(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != {params.spec.widths[0]}")
    return x, single


def _trace(params: MlpParams, x):
    """Run the net caching pre-activations and post-activation hiddens."""
    act, _ = ACTIVATIONS[params.spec.activation]
    n_layers = len(params.weights)
    pre, hidden = [], []
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        pre.append(a)
        if i < n_layers - 1:
            h = act(a)
            hidden.append(h)
        else:
            h = a  # last layer affine
    return h, pre, hidden


def forward(params: MlpParams, x):
    """Affine + activation stack; last layer affine."""
    x2d, single = _as_batch(params, x)
    y, _, _ = _trace(params, x2d)
    return y[0] if single else y


def forward_with_hidden(params: MlpParams, x):
    """Like forward, but also returns the post-activation hidden layers."""
    x2d, single = _as_batch(params, x)
    y, _, hidden = _trace(params, x2d)
    if single:
        return y[0], [h[0] for h in hidden]
    return y, hidden


def backward(params: MlpParams, x, out_grad, hidden_grads=None):
    """Reverse-mode gradients under the given output cotangent.

    hidden_grads, if given, is a list of extra cotangents injected at each
    post-activation hidden layer (same order as forward_with_hidden).
    Returns ((weight_grads, bias_grads), input_grad); parameter gradients
    are summed over the batch.
    """
    x2d, single = _as_batch(params, x)
    g = np.asarray(out_grad, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (x2d.shape[0], params.spec.widths[-1]):
        raise ValueError("out_grad shape does not match network output")
    _, dact = ACTIVATIONS[params.spec.activation]
    _, pre, hidden = _trace(params, x2d)

    n_layers = len(params.weights)
    w_grads = [None] * n_layers
    b_grads = [None] * n_layers
    inputs = [x2d] + hidden  # input to layer i is inputs[i]
    for i in range(n_layers - 1, -1, -1):
        w_grads[i] = inputs[i].T @ g
        b_grads[i] = g.sum(axis=0)
        gh = g @ params.weights[i].T
        if i > 0:
            if hidden_grads is not None and hidden_grads[i - 1] is not None:
                hg = np.asarray(hidden_grads[i - 1], dtype=np.float64)
                gh = gh + (hg[None, :] if single else hg)
            g = gh * dact(pre[i - 1])
        else:
            g = gh
    return (w_grads, b_grads), (g[0] if single else g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)


def init_adam(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m_w=[np.zeros_like(w) for w in params.weights],
        v_w=[np.zeros_like(w) for w in params.weights],
        m_b=[np.zeros_like(b) for b in params.biases],
        v_b=[np.zeros_like(b) for b in params.biases],
    )


def adam_step(params: MlpParams, grads, state: AdamState):
    """One bias-corrected adaptive-moment update; returns new params and state."""
    w_grads, b_grads = grads
    for g in list(w_grads) + list(b_grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient entries")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t

    def upd(p, g, m, v):
        m_new = state.beta1 * m + (1.0 - state.beta1) * g
        v_new = state.beta2 * v + (1.0 - state.beta2) * g * g
        p_new = p - state.lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
        return p_new, m_new, v_new

    new_w, new_b = [], []
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t,
                          [], [], [], [])
    for p, g, m, v in zip(params.weights, w_grads, state.m_w, state.v_w):
        p2, m2, v2 = upd(p, g, m, v)
        new_w.append(p2)
        new_state.m_w.append(m2)
        new_state.v_w.append(v2)
    for p, g, m, v in zip(params.biases, b_grads, state.m_b, state.v_b):
        p2, m2, v2 = upd(p, g, m, v)
        new_b.append(p2)
        new_state.m_b.append(m2)
        new_state.v_b.append(v2)
    return MlpParams(params.spec, new_w, new_b), new_state


def zero_grads(params: MlpParams):
    return ([np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases])


def add_grads(acc, extra, scale: float = 1.0):
    """acc += scale * extra, elementwise over the gradient tree (in place)."""
    for a, e in zip(acc[0], extra[0]):
        a += scale * e
    for a, e in zip(acc[1], extra[1]):
        a += scale * e
    return acc


def save_params(params: MlpParams, path):
    """Self-describing JSON checkpoint (exact float64 round trip)."""
    payload = {
        "widths": list(params.spec.widths),
        "activation": params.spec.activation,
        "seed": params.spec.seed,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_params(path) -> MlpParams:
    with open(path) as f:
        payload = json.load(f)
    spec = MlpSpec(tuple(payload["widths"]), payload["activation"], payload["seed"])
    weights = [np.asarray(w, dtype=np.float64) for w in payload["weights"]]
    biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
    for w, (fi, fo) in zip(weights, zip(spec.widths[:-1], spec.widths[1:])):
        if w.shape != (fi, fo):
            raise ValueError("checkpoint weight shapes do not match spec header")
    return MlpParams(spec, weights, biases)
